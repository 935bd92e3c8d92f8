"""Finite sequence universes, exact distributions over them, and divergences.

A space is every token sequence of length ``1..max_len`` over ``vocab.size``
ordinary tokens.  A sequence ends either by emitting EOS (which is then its
last token) or by reaching ``max_len`` ordinary tokens, in which case it is
forcibly terminal and carries no EOS.  The empty sequence is not part of the
space, so EOS is never allowed as the first token.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MAX_SEQUENCES = 10**7
NORMALIZATION_TOL = 1e-9

Sequence = tuple[int, ...]


class BudgetExceededError(ValueError):
    """The space holds more sequences than the enumeration budget allows."""


class SupportError(ValueError):
    """Two distributions disagree on support where it matters."""


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocab size must be >= 1, got {self.size}")

    @property
    def eos(self) -> int:
        return self.size

    @property
    def n_symbols(self) -> int:
        """Ordinary tokens plus EOS."""
        return self.size + 1


@dataclass(frozen=True)
class SpaceConfig:
    vocab: Vocab
    max_len: int
    num_contexts: int = 0

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.num_contexts < 0:
            raise ValueError("num_contexts must be >= 0")

    @classmethod
    def make(cls, vocab_size: int, max_len: int, num_contexts: int = 0) -> "SpaceConfig":
        return cls(Vocab(vocab_size), max_len, num_contexts)

    @property
    def n_contexts(self) -> int:
        """Number of context ids actually in use (0 contexts means one empty context)."""
        return max(1, self.num_contexts)

    @property
    def size(self) -> int:
        return sum(self.vocab.size**k for k in range(1, self.max_len + 1))

    def check_budget(self, budget: int = MAX_SEQUENCES) -> None:
        n = self.size
        if n > budget:
            raise BudgetExceededError(
                f"space with vocab {self.vocab.size} and max_len {self.max_len} "
                f"has {n} sequences, over the budget of {budget}"
            )

    def check_context(self, ctx: int) -> None:
        if not 0 <= ctx < self.n_contexts:
            raise KeyError(f"unknown context id {ctx} (space has {self.n_contexts})")

    def is_terminal(self, prefix: Sequence) -> bool:
        if prefix and prefix[-1] == self.vocab.eos:
            return True
        return len(prefix) >= self.max_len

    def allowed_tokens(self, prefix: Sequence) -> list[int]:
        """Tokens that may follow ``prefix``; empty for terminal prefixes."""
        if self.is_terminal(prefix):
            return []
        toks = list(range(self.vocab.size))
        if prefix:
            toks.append(self.vocab.eos)
        return toks

    def validate(self, y: Sequence) -> None:
        eos = self.vocab.eos
        if not y or len(y) > self.max_len:
            raise ValueError(f"sequence {y} has invalid length for max_len {self.max_len}")
        if any(t < 0 or t > eos for t in y):
            raise ValueError(f"sequence {y} holds out-of-vocabulary tokens")
        if eos in y[:-1] or y[0] == eos:
            raise ValueError(f"sequence {y} misplaces EOS")
        if y[-1] != eos and len(y) < self.max_len:
            raise ValueError(f"sequence {y} is not terminal")


def format_sequence(y: Sequence, eos: int | None = None) -> str:
    return "-".join("EOS" if t == eos else str(t) for t in y)


def enumerate_sequences(space: SpaceConfig) -> list[Sequence]:
    """Every terminal sequence of ``space`` exactly once, in lexicographic order."""
    space.check_budget()
    return list(space_index(space).sequences)


class SpaceIndex:
    """Row tables shared by the tabular models and the exact oracles.

    ``gen_prefixes`` are the non-terminal prefixes (one generator logit row
    each); ``disc_prefixes`` are every prefix a discriminator can score,
    including the empty one and complete sequences.  ``step_rows``/``step_tokens``
    give, for each enumerated sequence, the generator row and chosen token at
    every position, and ``disc_rows`` the discriminator row of ``y[:j+1]``.
    """

    def __init__(self, space: SpaceConfig):
        space.check_budget()
        self.space = space
        V, L, eos = space.vocab.size, space.max_len, space.vocab.eos

        sequences: list[Sequence] = []
        gen_prefixes: list[Sequence] = []

        def walk(prefix: Sequence):
            gen_prefixes.append(prefix)
            for tok in space.allowed_tokens(prefix):
                nxt = prefix + (tok,)
                if space.is_terminal(nxt):
                    sequences.append(nxt)
                else:
                    walk(nxt)

        walk(())
        self.sequences: tuple[Sequence, ...] = tuple(sequences)
        self.seq_index = {y: i for i, y in enumerate(self.sequences)}
        self.gen_prefixes = tuple(gen_prefixes)
        self.gen_index = {s: i for i, s in enumerate(self.gen_prefixes)}

        disc = [()] + [y[:j] for y in self.sequences for j in range(1, len(y) + 1)]
        self.disc_prefixes = tuple(dict.fromkeys(sorted(disc)))
        self.disc_index = {s: i for i, s in enumerate(self.disc_prefixes)}

        n = len(self.sequences)
        self.lengths = np.array([len(y) for y in self.sequences], dtype=np.int64)
        self.step_rows = np.zeros((n, L), dtype=np.int64)
        self.step_tokens = np.zeros((n, L), dtype=np.int64)
        self.disc_rows = np.zeros((n, L), dtype=np.int64)
        self.step_mask = np.zeros((n, L), dtype=bool)
        for i, y in enumerate(self.sequences):
            for j, tok in enumerate(y):
                self.step_rows[i, j] = self.gen_index[y[:j]]
                self.step_tokens[i, j] = tok
                self.disc_rows[i, j] = self.disc_index[y[: j + 1]]
                self.step_mask[i, j] = True

        self.allowed = np.ones((len(self.gen_prefixes), V + 1), dtype=bool)
        self.allowed[self.gen_index[()], eos] = False

    def __len__(self):
        return len(self.sequences)


@functools.lru_cache(maxsize=32)
def space_index(space: SpaceConfig) -> SpaceIndex:
    return SpaceIndex(space)


class ExactDist:
    """Explicit probability table over an enumerated sequence list.

    Masses are held as log-probabilities (``-inf`` for zero mass); ``probs``
    gives the linear view.
    """

    def __init__(self, sequences, logp):
        self.sequences = tuple(sequences)
        self.logp = np.asarray(logp, dtype=np.float64)
        if self.logp.shape != (len(self.sequences),):
            raise ValueError("one log-mass per sequence is required")
        if np.any(np.isnan(self.logp)) or np.any(self.logp > 1e-12):
            raise ValueError("log-masses must be <= 0 and not NaN")
        total = float(np.exp(logsumexp(self.logp)))
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"distribution mass is {total}, not 1")
        self._index = None

    @classmethod
    def from_probs(cls, sequences, probs, normalize: bool = False) -> "ExactDist":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0):
            raise ValueError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        if normalize:
            logp = logp - logsumexp(logp)
        return cls(sequences, logp)

    @classmethod
    def from_log_weights(cls, sequences, logw) -> "ExactDist":
        logw = np.asarray(logw, dtype=np.float64)
        return cls(sequences, logw - logsumexp(logw))

    @classmethod
    def uniform(cls, sequences) -> "ExactDist":
        n = len(sequences)
        return cls(sequences, np.full(n, -np.log(n)))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    @property
    def logprobs(self) -> np.ndarray:
        return self.logp

    def index(self, y: Sequence) -> int:
        if self._index is None:
            self._index = {s: i for i, s in enumerate(self.sequences)}
        return self._index[y]

    def prob(self, y: Sequence) -> float:
        return float(np.exp(self.logp[self.index(y)]))

    def __getitem__(self, y: Sequence) -> float:
        return self.prob(y)

    def __len__(self):
        return len(self.sequences)

    def sample(self, rng: np.random.Generator, size: int) -> list[Sequence]:
        idx = sample_indices(self.probs, rng, size)
        return [self.sequences[i] for i in idx]

    def mode(self) -> Sequence:
        """Most probable sequence; ties go to the lexicographically first."""
        return self.sequences[int(np.argmax(self.logp))]

    def __repr__(self):
        return f"ExactDist(n={len(self)})"


def sample_indices(probs: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    """Inverse-CDF categorical draws; one uniform per draw."""
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    u = rng.random(size)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def _check_same_support(p: ExactDist, q: ExactDist) -> None:
    if p.sequences != q.sequences:
        raise SupportError("distributions are defined over different sequence lists")


def kl_divergence(p: ExactDist, q: ExactDist) -> float:
    """KL(p || q) in nats; zero-mass terms of ``p`` contribute nothing."""
    _check_same_support(p, q)
    live = np.isfinite(p.logp)
    if np.any(live & ~np.isfinite(q.logp)):
        raise SupportError("q has zero mass where p is positive")
    lp, lq = p.logp[live], q.logp[live]
    return max(float(np.sum(np.exp(lp) * (lp - lq))), 0.0)


def total_variation(p: ExactDist, q: ExactDist) -> float:
    _check_same_support(p, q)
    return 0.5 * float(np.sum(np.abs(p.probs - q.probs)))


def dirichlet_dist(space: SpaceConfig, alpha: float, rng: np.random.Generator) -> ExactDist:
    """Random full-support table drawn from a symmetric Dirichlet."""
    seqs = space_index(space).sequences
    # Gamma draws in log-space keep tiny masses representable for small alpha.
    g = rng.gamma(alpha, size=len(seqs))
    g = np.maximum(g, np.finfo(float).tiny)
    return ExactDist.from_log_weights(seqs, np.log(g))
