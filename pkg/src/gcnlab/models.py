"""Tabular autoregressive generator and prefix discriminator.

Both models keep one parameter row per (context id, prefix): the generator a
logit vector over ``vocab + EOS`` for every non-terminal prefix, the
discriminator a single sigmoid logit for every scorable prefix.  Gradient
tables are dense arrays with the same shape as the parameter table they
belong to; rows that a computation never touches stay zero.

Updates return new model objects and leave their inputs untouched.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from .seqspace import ExactDist, Sequence, SpaceConfig, sample_indices, space_index

GREEDY_TEMPERATURE = 1e-6


class ZeroWeightsError(ValueError):
    """Self-normalized update requested with all weights zero."""


def _masked_log_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits, -np.inf)
    return log_softmax(z, axis=-1)


class TabularGenerator:
    def __init__(self, space: SpaceConfig, logits: np.ndarray | None = None):
        self.space = space
        self.index = space_index(space)
        shape = (space.n_contexts, len(self.index.gen_prefixes), space.vocab.n_symbols)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logit table shape {logits.shape} != {shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("generator logits must be finite")
        self.logits = logits

    @classmethod
    def random(cls, space: SpaceConfig, rng: np.random.Generator, scale: float = 1.0):
        shape = (space.n_contexts, len(space_index(space).gen_prefixes), space.vocab.n_symbols)
        return cls(space, scale * rng.standard_normal(shape))

    @classmethod
    def from_distributions(cls, space: SpaceConfig, dists: list[ExactDist]) -> "TabularGenerator":
        """Logits whose sequence distribution equals ``dists[ctx]`` for every context.

        Each row is set to the log of the subtree masses below the prefix, which
        is exact for full-support targets (the tabular family is saturated).
        """
        gen = cls(space)
        idx = gen.index
        eos = space.vocab.eos
        for ctx, dist in enumerate(dists):
            if dist.sequences != idx.sequences:
                raise ValueError("target distribution must be over the space's sequences")
            if not np.all(np.isfinite(dist.logp)):
                raise ValueError("tabular realization needs a full-support target")
            # log-mass of every prefix subtree, accumulated from the leaves
            mass: dict[Sequence, list[float]] = {}
            for y, lp in zip(idx.sequences, dist.logp):
                for j in range(len(y) + 1):
                    mass.setdefault(y[:j], []).append(lp)
            logmass = {s: float(logsumexp(v)) for s, v in mass.items()}
            for row, prefix in enumerate(idx.gen_prefixes):
                vec = np.zeros(space.vocab.n_symbols)
                for tok in space.allowed_tokens(prefix):
                    vec[tok] = logmass[prefix + (tok,)] - logmass[prefix]
                if not prefix:
                    vec[eos] = 0.0
                gen.logits[ctx, row] = vec
        return gen

    def copy(self) -> "TabularGenerator":
        return TabularGenerator(self.space, self.logits.copy())

    def row(self, prefix: Sequence) -> int:
        return self.index.gen_index[tuple(prefix)]

    def step_logprobs(self, ctx: int, prefix: Sequence, temperature: float = 1.0) -> np.ndarray:
        """Log next-token distribution after ``prefix``; disallowed tokens get ``-inf``."""
        self.space.check_context(ctx)
        r = self.row(prefix)
        return _masked_log_softmax(self.logits[ctx, r] / temperature, self.index.allowed[r])

    def step_probs(self, ctx: int, prefix: Sequence, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.step_logprobs(ctx, prefix, temperature))

    def row_log_softmax(self, ctx: int, temperature: float = 1.0) -> np.ndarray:
        return _masked_log_softmax(self.logits[ctx] / temperature, self.index.allowed)

    def sequence_logprobs(self, ctx: int, temperature: float = 1.0) -> np.ndarray:
        """log p(y | ctx) for every enumerated sequence, in enumeration order."""
        self.space.check_context(ctx)
        idx = self.index
        ls = self.row_log_softmax(ctx, temperature)
        steps = ls[idx.step_rows, idx.step_tokens]
        return np.where(idx.step_mask, steps, 0.0).sum(axis=1)

    def distribution(self, ctx: int = 0) -> ExactDist:
        return ExactDist.from_log_weights(self.index.sequences, self.sequence_logprobs(ctx))

    def distributions(self) -> list[ExactDist]:
        return [self.distribution(c) for c in range(self.space.n_contexts)]

    def to_json(self) -> dict:
        idx = self.index
        return {
            str(ctx): {
                "-".join(map(str, prefix)): self.logits[ctx, r].tolist()
                for r, prefix in enumerate(idx.gen_prefixes)
            }
            for ctx in range(self.space.n_contexts)
        }

    @classmethod
    def from_json(cls, space: SpaceConfig, data: dict) -> "TabularGenerator":
        gen = cls(space)
        for ctx_key, rows in data.items():
            ctx = int(ctx_key)
            space.check_context(ctx)
            for prefix_key, vec in rows.items():
                gen.logits[ctx, gen.row(_parse_prefix(prefix_key))] = vec
        return gen


class PrefixDiscriminator:
    def __init__(self, space: SpaceConfig, logits: np.ndarray | None = None):
        self.space = space
        self.index = space_index(space)
        shape = (space.n_contexts, len(self.index.disc_prefixes))
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"discriminator table shape {logits.shape} != {shape}")
        self.phi = logits

    def copy(self) -> "PrefixDiscriminator":
        return PrefixDiscriminator(self.space, self.phi.copy())

    def logit(self, ctx: int, prefix: Sequence) -> float:
        r = self.index.disc_index.get(tuple(prefix))
        if r is None:
            return 0.0
        return float(self.phi[ctx, r])

    def sequence_scores(self, ctx: int) -> np.ndarray:
        """D(ctx, y) for every enumerated sequence, in enumeration order."""
        idx = self.index
        last = idx.disc_rows[np.arange(len(idx)), idx.lengths - 1]
        return expit(self.phi[ctx, last])

    def to_json(self) -> dict:
        return {
            str(ctx): {
                "-".join(map(str, prefix)): float(self.phi[ctx, r])
                for r, prefix in enumerate(self.index.disc_prefixes)
            }
            for ctx in range(self.space.n_contexts)
        }

    @classmethod
    def from_json(cls, space: SpaceConfig, data: dict) -> "PrefixDiscriminator":
        disc = cls(space)
        for ctx_key, rows in data.items():
            ctx = int(ctx_key)
            space.check_context(ctx)
            for prefix_key, val in rows.items():
                disc.phi[ctx, disc.index.disc_index[_parse_prefix(prefix_key)]] = val
        return disc


def _parse_prefix(key: str) -> Sequence:
    return tuple(int(t) for t in key.split("-")) if key else ()


# -- generator operations ----------------------------------------------------


def gen_logprob(gen: TabularGenerator, ctx: int, y: Sequence) -> float:
    gen.space.check_context(ctx)
    y = tuple(y)
    gen.space.validate(y)
    total = 0.0
    for j, tok in enumerate(y):
        total += float(gen.step_logprobs(ctx, y[:j])[tok])
    return total


def _choose(logp: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature < GREEDY_TEMPERATURE:
        return int(np.argmax(logp))
    return int(sample_indices(np.exp(logp), rng, 1)[0])


def gen_sample(
    gen: TabularGenerator, ctx: int, temperature: float, rng: np.random.Generator
) -> Sequence:
    """Ancestral draw from softmax(logits / temperature), token by token.

    Temperatures below ``GREEDY_TEMPERATURE`` decode greedily.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    gen.space.check_context(ctx)
    t = max(temperature, GREEDY_TEMPERATURE)
    y: Sequence = ()
    while not gen.space.is_terminal(y):
        y += (_choose(gen.step_logprobs(ctx, y, t), temperature, rng),)
    return y


def sample_from_table(
    space: SpaceConfig, table: np.ndarray, ctxs, rng: np.random.Generator, greedy: bool = False
) -> list[Sequence]:
    """Vectorized ancestral sampling from per-(context, generator row) step tables.

    ``table`` has shape ``(n_contexts, n_gen_rows, vocab + 1)`` and holds a
    categorical per row; one sequence is drawn per entry of ``ctxs``.
    """
    ctxs = np.asarray(ctxs, dtype=np.int64)
    idx = space_index(space)
    eos = space.vocab.eos
    m = len(ctxs)
    seqs: list[list[int]] = [[] for _ in range(m)]
    rows = np.full(m, idx.gen_index[()])
    alive = np.ones(m, dtype=bool)
    for _ in range(space.max_len):
        live = np.flatnonzero(alive)
        if live.size == 0:
            break
        p = table[ctxs[live], rows[live]]
        if greedy:
            toks = np.argmax(p, axis=1)
        else:
            cdf = np.cumsum(p, axis=1)
            u = rng.random(live.size) * cdf[:, -1]
            toks = np.minimum((cdf <= u[:, None]).sum(axis=1), p.shape[1] - 1)
        for i, tok in zip(live, toks):
            tok = int(tok)
            seqs[i].append(tok)
            if tok == eos or len(seqs[i]) >= space.max_len:
                alive[i] = False
            else:
                rows[i] = idx.gen_index[tuple(seqs[i])]
    return [tuple(s) for s in seqs]


def gen_sample_batch(
    gen: TabularGenerator, ctxs, temperature: float, rng: np.random.Generator
) -> list[Sequence]:
    """Batched ``gen_sample``: one ancestral draw per entry of ``ctxs``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = max(temperature, GREEDY_TEMPERATURE)
    probs = np.exp(_masked_log_softmax(gen.logits / t, gen.index.allowed))
    return sample_from_table(gen.space, probs, ctxs, rng, greedy=temperature < GREEDY_TEMPERATURE)


def gen_grad_logprob(gen: TabularGenerator, ctx: int, y: Sequence) -> np.ndarray:
    """Gradient of log p(y | ctx) with respect to the whole logit table."""
    gen.space.check_context(ctx)
    y = tuple(y)
    grad = np.zeros_like(gen.logits)
    for j, tok in enumerate(y):
        r = gen.row(y[:j])
        g = -gen.step_probs(ctx, y[:j])
        g[tok] += 1.0
        grad[ctx, r] += g
    return grad


def weighted_logprob_grad(
    gen: TabularGenerator, samples, weights, self_normalize: bool
) -> np.ndarray:
    """Sum of w_i * grad log p(y_i | x_i), optionally divided by sum(w)."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(samples):
        raise ValueError("one weight per sample is required")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    if self_normalize:
        total = weights.sum()
        if total <= 0:
            raise ZeroWeightsError("all importance weights are zero")
        weights = weights / total

    ctx, seq = _sample_arrays(gen.index, samples)
    idx = gen.index
    live = weights != 0.0
    ctx, seq, weights = ctx[live], seq[live], weights[live]
    probs = np.exp(_masked_log_softmax(gen.logits, idx.allowed))
    rows, toks, mask = idx.step_rows[seq], idx.step_tokens[seq], idx.step_mask[seq]
    c = np.broadcast_to(ctx[:, None], rows.shape)[mask]
    w = np.broadcast_to(weights[:, None], rows.shape)[mask]
    rows, toks = rows[mask], toks[mask]
    grad = np.zeros_like(gen.logits)
    np.add.at(grad, (c, rows), -w[:, None] * probs[c, rows])
    np.add.at(grad, (c, rows, toks), w)
    return grad


def _sample_arrays(idx, samples) -> tuple[np.ndarray, np.ndarray]:
    ctx = np.fromiter((c for c, _ in samples), dtype=np.int64, count=len(samples))
    seq = np.fromiter((idx.seq_index[tuple(y)] for _, y in samples), dtype=np.int64, count=len(samples))
    return ctx, seq


def gen_update_weighted(
    gen: TabularGenerator, samples, weights, lr: float, self_normalize: bool
) -> TabularGenerator:
    """One ascent step on the weighted log-likelihood of ``samples``.

    ``samples`` is a sequence of ``(ctx, y)`` pairs.  With ``self_normalize``
    the weights are divided by their sum first; raises ``ZeroWeightsError``
    when they are all zero.
    """
    grad = weighted_logprob_grad(gen, samples, weights, self_normalize)
    return TabularGenerator(gen.space, gen.logits + lr * grad)


# -- discriminator operations ------------------------------------------------


def disc_score(disc: PrefixDiscriminator, ctx: int, prefix: Sequence) -> float:
    return float(expit(disc.logit(ctx, prefix)))


def _prefix_rows(disc: PrefixDiscriminator, ctx: int, y: Sequence) -> list[int]:
    di = disc.index.disc_index
    y = tuple(y)
    return [di[y[:j]] for j in range(1, len(y) + 1)]


def disc_objective(disc: PrefixDiscriminator, reals, fakes) -> float:
    """Sum over every non-empty prefix of log D(real) + log(1 - D(fake))."""
    total = 0.0
    for ctx, y in reals:
        z = disc.phi[ctx, _prefix_rows(disc, ctx, y)]
        total += float(-np.logaddexp(0.0, -z).sum())
    for ctx, y in fakes:
        z = disc.phi[ctx, _prefix_rows(disc, ctx, y)]
        total += float(-np.logaddexp(0.0, z).sum())
    return total


def disc_grad(disc: PrefixDiscriminator, reals, fakes) -> np.ndarray:
    idx = disc.index
    s = expit(disc.phi)
    grad = np.zeros_like(disc.phi)
    for batch, real in ((reals, True), (fakes, False)):
        ctx, seq = _sample_arrays(idx, batch)
        rows, mask = idx.disc_rows[seq], idx.step_mask[seq]
        c = np.broadcast_to(ctx[:, None], rows.shape)[mask]
        rows = rows[mask]
        np.add.at(grad, (c, rows), 1.0 - s[c, rows] if real else -s[c, rows])
    return grad


def disc_update(disc: PrefixDiscriminator, reals, fakes, lr: float) -> PrefixDiscriminator:
    if not reals and not fakes:
        raise ValueError("discriminator update needs at least one real or fake sample")
    return PrefixDiscriminator(disc.space, disc.phi + lr * disc_grad(disc, reals, fakes))
