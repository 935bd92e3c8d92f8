"""Nucleus (top-sigma mass) truncation of the generator's step distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import TabularGenerator
from .seqspace import Sequence, sample_indices


@dataclass(frozen=True)
class NucleusSpec:
    sigma: float = 0.1

    def __post_init__(self):
        if not 0 < self.sigma <= 1:
            raise ValueError(f"sigma must lie in (0, 1], got {self.sigma}")


def _sigma(spec) -> float:
    return spec.sigma if isinstance(spec, NucleusSpec) else float(spec)


def nucleus_set(token_probs, spec) -> list[int]:
    """Smallest token set holding at least ``sigma`` of the mass.

    Tokens are ranked by descending probability, ties by ascending id.
    ``spec`` may be a ``NucleusSpec`` or a bare sigma.
    """
    sigma = _sigma(spec)
    p = np.asarray(token_probs, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    if sigma >= 1.0:
        return sorted(int(t) for t in order if p[t] > 0)
    cum = np.cumsum(p[order])
    k = int(np.searchsorted(cum, sigma - 1e-12, side="left")) + 1
    return sorted(int(t) for t in order[: min(k, len(p))])


def truncate(token_probs, spec) -> np.ndarray:
    """Step distribution restricted to its nucleus and renormalized."""
    p = np.asarray(token_probs, dtype=np.float64)
    keep = nucleus_set(p, spec)
    out = np.zeros_like(p)
    out[keep] = p[keep]
    return out / out.sum()


def nucleus_row_table(gen: TabularGenerator, ctx: int, spec) -> np.ndarray:
    """Truncated step distributions for every generator row of one context."""
    probs = np.exp(gen.row_log_softmax(ctx))
    return np.stack([truncate(row, spec) for row in probs])


def nucleus_density(gen: TabularGenerator, ctx: int, y: Sequence, spec) -> float:
    """Probability of ``y`` when every step samples from its truncated nucleus."""
    y = tuple(y)
    gen.space.validate(y)
    dens = 1.0
    for j, tok in enumerate(y):
        step = truncate(gen.step_probs(ctx, y[:j]), spec)
        dens *= float(step[tok])
        if dens == 0.0:
            return 0.0
    return dens


def nucleus_sequence_probs(gen: TabularGenerator, ctx: int, spec) -> np.ndarray:
    """Nucleus-sampler density of every enumerated sequence."""
    idx = gen.index
    table = nucleus_row_table(gen, ctx, spec)
    steps = table[idx.step_rows, idx.step_tokens]
    return np.where(idx.step_mask, steps, 1.0).prod(axis=1)


def nucleus_sample(gen: TabularGenerator, ctx: int, spec, rng: np.random.Generator) -> Sequence:
    y: Sequence = ()
    while not gen.space.is_terminal(y):
        step = truncate(gen.step_probs(ctx, y), spec)
        y += (int(sample_indices(step, rng, 1)[0]),)
    return y

