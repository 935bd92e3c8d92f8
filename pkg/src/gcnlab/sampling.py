"""Behaviour distributions for the generator update and their importance weights.

A behaviour ``qhat`` is either the generator itself or a mixture
``eps * p + (1 - eps) * guided`` where the guided part is nucleus decoding
or discriminator-guided MCTS.  Mixing with ``eps > 0`` keeps ``qhat``
positive wherever ``p`` is, and caps every raw weight
``p * D / qhat`` at ``D / eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mcts import DecodeOutput, MctsConfig, mcts_decode
from .models import (
    PrefixDiscriminator,
    TabularGenerator,
    gen_logprob,
    sample_from_table,
)
from .nucleus import NucleusSpec, nucleus_density, nucleus_row_table, nucleus_sequence_probs
from .seqspace import Sequence, sample_indices

GUIDED_KINDS = ("nucleus", "mcts")


@dataclass(frozen=True)
class MixtureSpec:
    epsilon: float = 0.1
    guided_kind: str = "nucleus"
    sigma: float = 0.1

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.guided_kind not in GUIDED_KINDS:
            raise ValueError(f"guided_kind must be one of {GUIDED_KINDS}")
        NucleusSpec(self.sigma)


def mcts_mixture_density(
    gen: TabularGenerator,
    ctx: int,
    y: Sequence,
    spec: MixtureSpec,
    decode: DecodeOutput,
    seed: int | None = None,
) -> float:
    """eps * p(y) + (1 - eps) * (search density of y)."""
    decode.check(ctx, seed)
    p = float(np.exp(gen_logprob(gen, ctx, y)))
    return spec.epsilon * p + (1 - spec.epsilon) * decode.guided_prob(y)


def nucleus_mixture_density(gen: TabularGenerator, ctx: int, y: Sequence, spec: MixtureSpec) -> float:
    p = float(np.exp(gen_logprob(gen, ctx, y)))
    return spec.epsilon * p + (1 - spec.epsilon) * nucleus_density(gen, ctx, y, spec.sigma)


def _walk(decode: DecodeOutput, rng: np.random.Generator) -> Sequence:
    if decode.mode == "conditional":
        return decode.sequence
    policy = decode.policy
    space = policy.gen.space
    y: Sequence = ()
    while not space.is_terminal(y):
        y += (int(sample_indices(policy.dist(y), rng, 1)[0]),)
    return y


def mixture_sample_and_density(
    gen: TabularGenerator,
    disc: PrefixDiscriminator,
    ctx: int,
    spec: MixtureSpec,
    mcts_cfg: MctsConfig | None = None,
    rng: np.random.Generator | None = None,
    decode: DecodeOutput | None = None,
) -> tuple[Sequence, float, float]:
    """One draw from the mixture with its density and raw weight p * D / qhat.

    For MCTS mixtures, ``decode`` fixes the search output to use; without it a
    fresh decode is run with ``rng``.
    """
    sampler = MixtureSampler(gen, disc, ctx, spec, mcts_cfg, decode=decode, rng=rng)
    y = sampler.draw(1, rng)[0]
    q = sampler.density(y)
    return y, q, sampler.raw_weight(y, q)


class MixtureSampler:
    """Fixed behaviour distribution for one (generator, discriminator, context).

    ``spec=None`` means sampling from the generator alone.  Densities of the
    generator and nucleus parts are tabulated over the whole space up front;
    MCTS densities are computed on demand and cached.
    """

    def __init__(
        self,
        gen: TabularGenerator,
        disc: PrefixDiscriminator,
        ctx: int,
        spec: MixtureSpec | None,
        mcts_cfg: MctsConfig | None = None,
        decode: DecodeOutput | None = None,
        rng: np.random.Generator | None = None,
        seed: int | None = None,
    ):
        gen.space.check_context(ctx)
        self.gen, self.disc, self.ctx, self.spec = gen, disc, ctx, spec
        self.index = gen.index
        self.p_rows = np.exp(gen.row_log_softmax(ctx))[None]
        self.p_seq = np.exp(gen.sequence_logprobs(ctx))
        self.d_seq = disc.sequence_scores(ctx)
        self.decode = None
        self.guided_seq = None
        if spec is None:
            return
        if spec.guided_kind == "nucleus":
            self.guided_rows = nucleus_row_table(gen, ctx, spec.sigma)[None]
            self.guided_seq = nucleus_sequence_probs(gen, ctx, spec.sigma)
        else:
            if decode is None:
                if mcts_cfg is None:
                    raise ValueError("an MCTS mixture needs an MctsConfig or a decode output")
                decode = mcts_decode(gen, disc, ctx, mcts_cfg, rng=rng, seed=seed)
            decode.check(ctx)
            self.decode = decode
            self._guided_cache: dict[Sequence, float] = {}

    def guided_prob(self, y: Sequence) -> float:
        if self.guided_seq is not None:
            return float(self.guided_seq[self.index.seq_index[y]])
        if y not in self._guided_cache:
            self._guided_cache[y] = self.decode.guided_prob(y)
        return self._guided_cache[y]

    def density(self, y: Sequence) -> float:
        y = tuple(y)
        p = float(self.p_seq[self.index.seq_index[y]])
        if self.spec is None:
            return p
        eps = self.spec.epsilon
        return eps * p + (1 - eps) * self.guided_prob(y)

    def raw_weight(self, y: Sequence, q: float | None = None) -> float:
        i = self.index.seq_index[tuple(y)]
        if q is None:
            q = self.density(y)
        return float(self.p_seq[i] * self.d_seq[i] / q)

    def draw(self, n: int, rng: np.random.Generator) -> list[Sequence]:
        space = self.gen.space
        if self.spec is None:
            return sample_from_table(space, self.p_rows, np.zeros(n, dtype=np.int64), rng)
        from_p = rng.random(n) < self.spec.epsilon
        out: list[Sequence | None] = [None] * n
        picked = np.flatnonzero(from_p)
        ys = sample_from_table(space, self.p_rows, np.zeros(len(picked), dtype=np.int64), rng)
        for i, y in zip(picked, ys):
            out[i] = y
        guided = np.flatnonzero(~from_p)
        if self.spec.guided_kind == "nucleus":
            ys = sample_from_table(space, self.guided_rows, np.zeros(len(guided), dtype=np.int64), rng)
        else:
            ys = [_walk(self.decode, rng) for _ in guided]
        for i, y in zip(guided, ys):
            out[i] = y
        return out

    def sequence_densities(self) -> np.ndarray:
        """qhat over every enumerated sequence (runs searches for all prefixes if MCTS)."""
        if self.spec is None:
            return self.p_seq.copy()
        guided = np.array([self.guided_prob(y) for y in self.index.sequences])
        eps = self.spec.epsilon
        return eps * self.p_seq + (1 - eps) * guided

