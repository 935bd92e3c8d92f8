"""Sentence-level BLEU, self-BLEU and temperature sweeps.

BLEU here is sentence level: modified n-gram precisions for n = 1..max_n
with add-one smoothing for n >= 2, combined by geometric mean and scaled by
the brevity penalty ``exp(min(0, 1 - r / c))`` where ``r`` is the reference
length closest to the candidate length ``c``.  ``max_n`` is clipped to the
shortest sequence involved so every precision is defined.  EOS is stripped
before counting.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .models import TabularGenerator, gen_sample_batch
from .seqspace import Sequence

BLEU_DESCRIPTION = "sentence BLEU, add-one smoothing for n>=2, max_n clipped to shortest length, EOS stripped"


@dataclass(frozen=True)
class BleuSpec:
    max_n: int = 4
    eos: int | None = None

    def __post_init__(self):
        if self.max_n < 1:
            raise ValueError(f"max_n must be >= 1, got {self.max_n}")


@dataclass(frozen=True)
class CurvePoint:
    temperature: float
    neg_bleu: float
    self_bleu: float


def strip_eos(y: Sequence, eos: int | None) -> tuple[int, ...]:
    y = tuple(y)
    if eos is not None and y and y[-1] == eos:
        return y[:-1]
    return y


def ngrams(y: Sequence, n: int) -> Counter:
    return Counter(tuple(y[i:i + n]) for i in range(len(y) - n + 1))


def _closest_length(c: int, ref_lens) -> int:
    # ties go to the shorter reference
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu(candidate: Sequence, references, spec: BleuSpec = BleuSpec()) -> float:
    refs = [strip_eos(r, spec.eos) for r in references]
    if not refs:
        raise ValueError("bleu needs at least one reference")
    cand = strip_eos(candidate, spec.eos)
    if not cand:
        return 0.0
    ref_lens = [len(r) for r in refs]
    max_n = max(1, min(spec.max_n, len(cand), min(ref_lens)))
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = ngrams(cand, n)
        best: Counter = Counter()
        for r in refs:
            best |= ngrams(r, n)
        matched = sum(min(c, best[g]) for g, c in counts.items())
        total = sum(counts.values())
        if n >= 2:
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total)
    r = _closest_length(len(cand), ref_lens)
    bp = math.exp(min(0.0, 1.0 - r / len(cand)))
    return bp * math.exp(log_p / max_n)


def self_bleu(samples, spec: BleuSpec = BleuSpec()) -> float:
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("self_bleu needs at least two samples")
    scores = [bleu(s, samples[:i] + samples[i + 1:], spec) for i, s in enumerate(samples)]
    return float(np.mean(scores))


def temperature_curve(
    gen: TabularGenerator,
    p_d_samples,
    temperatures,
    n_samples: int,
    spec: BleuSpec,
    rng: np.random.Generator,
    ctx: int = 0,
) -> list[CurvePoint]:
    """neg_bleu (against ``p_d_samples``) and self_bleu at each temperature.

    Every temperature uses the same number of generator draws.
    """
    temps = [float(t) for t in temperatures]
    if temps != sorted(temps):
        raise ValueError("temperatures must be sorted ascending")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    refs = list(p_d_samples)
    points = []
    for t in temps:
        draws = gen_sample_batch(gen, np.full(n_samples, ctx), t, rng)
        quality = float(np.mean([bleu(y, refs, spec) for y in draws]))
        points.append(CurvePoint(t, -quality, self_bleu(draws, spec)))
    return points
