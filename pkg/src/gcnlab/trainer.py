"""Training loop: discriminator on prefixes, then an importance-weighted generator step.

Variants differ only in how the generator weights are formed:

``gcn``
    ``w = p * D / qhat``, self-normalized (the partition of the cooperative
    target acts as the step-size scheduler).
``gan`` / ``gan_scheduler``
    the same raw weights summed without normalization; ``gan_scheduler``
    rescales the learning rate with a linear schedule.
``maligan``
    ``w = p * D / ((1 - D) * qhat)``, clipped, self-normalized.
``exp_d``
    ``w = exp(D) / qhat``, self-normalized; the target ignores the generator.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ConfigError, LinearSchedule, TrainConfig
from .exact import eta_mc
from .mcts import mcts_decode
from .models import (
    PrefixDiscriminator,
    TabularGenerator,
    disc_update,
    gen_sample_batch,
    weighted_logprob_grad,
)
from .sampling import MixtureSampler
from .seqspace import ExactDist, Sequence, SpaceConfig, dirichlet_dist, kl_divergence, total_variation

log = logging.getLogger(__name__)

KL_FLOOR = 1e-2
NORMALIZED_VARIANTS = ("gcn", "maligan", "exp_d")


class DivergenceError(RuntimeError):
    """Raised by callers that treat a divergence abort as an error."""


@dataclass
class IterRecord:
    iter: int
    kl_exact: float
    tv: float
    z_est: float
    eta_mc: float
    grad_norm: float
    weight_max: float
    weight_ess: float
    lr: float
    skipped: int
    wall_ms: float = 0.0


CSV_FIELDS = [
    "iter", "kl_exact", "tv", "z_est", "eta_mc", "grad_norm",
    "weight_max", "weight_ess", "lr", "skipped",
]


@dataclass
class RunResult:
    config: TrainConfig
    target: list[ExactDist]
    initial_kl: float
    initial_tv: float
    records: list[IterRecord]
    generator: TabularGenerator
    discriminator: PrefixDiscriminator
    status: str = "completed"
    notes: list[str] = field(default_factory=list)

    @property
    def final_kl(self) -> float:
        return self.records[-1].kl_exact if self.records else self.initial_kl


def scheduler_lr(base: float, it: int, total: int, kind: LinearSchedule | None) -> float:
    """Learning rate at iteration ``it`` of ``total`` (``it`` counts from 0)."""
    if kind is None:
        return base
    if total <= 0:
        return base * kind.start
    return base * (kind.start + (kind.end - kind.start) * it / total)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def build_target(cfg: TrainConfig) -> list[ExactDist]:
    """Per-context data distributions, reproducible from the target seed."""
    space = cfg.space
    rng = _rng(cfg.effective_target_seed, 1)
    if cfg.target_kind == "dirichlet":
        return [dirichlet_dist(space, cfg.target_alpha, rng) for _ in range(space.n_contexts)]
    if cfg.target_kind == "hidden_generator":
        return TabularGenerator.random(space, rng, cfg.target_scale).distributions()
    dist = _explicit(space, cfg.target_probs, "target.probs")
    return [dist] * space.n_contexts


def _explicit(space: SpaceConfig, probs, key: str) -> ExactDist:
    seqs = TabularGenerator(space).index.sequences
    if len(probs) != len(seqs):
        raise ConfigError(f"{key} needs {len(seqs)} values, got {len(probs)}")
    try:
        return ExactDist.from_probs(seqs, probs)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def initial_distributions(cfg: TrainConfig, target: list[ExactDist]) -> list[ExactDist]:
    """Starting distributions; explicit ones may lack support (the exact oracle checks)."""
    if cfg.init_kind == "explicit":
        return [_explicit(cfg.space, cfg.init_probs, "init.probs")] * cfg.space.n_contexts
    return build_generator(cfg, target).distributions()


def build_generator(cfg: TrainConfig, target: list[ExactDist]) -> TabularGenerator:
    space = cfg.space
    if cfg.init_kind == "uniform":
        return TabularGenerator(space)
    if cfg.init_kind == "random":
        return TabularGenerator.random(space, _rng(cfg.seed, 2), cfg.init_scale)
    if cfg.init_kind == "target":
        return TabularGenerator.from_distributions(space, target)
    return TabularGenerator.from_distributions(space, initial_distributions(cfg, target))


def evaluate_checkpoint(gen: TabularGenerator, p_d: ExactDist, ctx: int = 0) -> tuple[float, float, Sequence]:
    """Exact KL(p_d || p_gen), total variation, and the generator's modal sequence."""
    q = gen.distribution(ctx)
    return kl_divergence(p_d, q), total_variation(p_d, q), q.mode()


def _divergences(gen: TabularGenerator, target: list[ExactDist]) -> tuple[float, float]:
    kls, tvs = [], []
    for ctx, p_d in enumerate(target):
        q = gen.distribution(ctx)
        kls.append(kl_divergence(p_d, q))
        tvs.append(total_variation(p_d, q))
    return float(np.mean(kls)), float(np.mean(tvs))


def _weights(variant: str, p, d, q, clip: float) -> np.ndarray:
    if variant in ("gcn", "gan", "gan_scheduler"):
        return p * d / q
    if variant == "maligan":
        return np.minimum(p * d / ((1.0 - d) * q), clip)
    if variant == "exp_d":
        return np.exp(d) / q
    raise ValueError(f"unknown variant {variant!r}")


def train(cfg: TrainConfig, workers: int = 1, d_scale: float = 1.0) -> RunResult:
    """Run ``cfg.iters`` iterations; deterministic given ``cfg.seed``.

    ``d_scale`` multiplies every discriminator output entering the generator
    weights (a diagnostic for the normalization invariance of ``gcn``).
    ``workers`` bounds the threads used for per-context MCTS decodes.
    """
    space = cfg.space
    n_ctx = space.n_contexts
    m = cfg.batch_size
    target = build_target(cfg)
    gen = build_generator(cfg, target)
    disc = PrefixDiscriminator(space)
    rng = np.random.default_rng(cfg.seed)
    cdfs = [np.cumsum(p.probs) for p in target]
    seqs = gen.index.sequences
    seq_index = gen.index.seq_index
    mixture = cfg.mixture
    mcts_cfg = cfg.mcts
    normalize = cfg.variant in NORMALIZED_VARIANTS

    kl0, tv0 = _divergences(gen, target)
    result = RunResult(cfg, target, kl0, tv0, [], gen, disc)
    limit = cfg.divergence_factor * max(kl0, KL_FLOOR)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and cfg.qhat == "mcts" else None

    try:
        for t in range(1, cfg.iters + 1):
            start = time.perf_counter()
            ctxs = rng.integers(n_ctx, size=m)
            u = rng.random(m)
            ks = np.empty(m, dtype=np.int64)
            for c in range(n_ctx):
                sel = ctxs == c
                ks[sel] = np.searchsorted(cdfs[c], u[sel] * cdfs[c][-1], side="right")
            ks = np.minimum(ks, len(seqs) - 1)
            reals = [(int(c), seqs[k]) for c, k in zip(ctxs, ks)]

            for _ in range(cfg.disc_steps):
                fakes = list(zip(ctxs.tolist(), gen_sample_batch(gen, ctxs, 1.0, rng)))
                disc = disc_update(disc, reals, fakes, cfg.lr_disc)

            scores = [disc.sequence_scores(c) for c in range(n_ctx)]
            real_d = [scores[c][seq_index[y]] for c, y in reals]
            fake_d = [scores[c][seq_index[y]] for c, y in fakes]
            eta = eta_mc(real_d, fake_d)

            present = sorted(set(ctxs.tolist()))
            decodes = {}
            if cfg.qhat == "mcts":
                def decode(c):
                    s = derived_seed(cfg.seed, t, c)
                    return mcts_decode(gen, disc, c, mcts_cfg, rng=np.random.default_rng(s), seed=s)

                mapper = pool.map if pool is not None else map
                decodes = dict(zip(present, mapper(decode, present)))

            samples: list[tuple[int, Sequence]] = [None] * m
            p = np.empty(m)
            d = np.empty(m)
            q = np.empty(m)
            for c in present:
                sampler = MixtureSampler(gen, disc, c, mixture, decode=decodes.get(c))
                where = np.flatnonzero(ctxs == c)
                for i, y in zip(where, sampler.draw(len(where), rng)):
                    j = seq_index[y]
                    samples[i] = (c, y)
                    p[i] = sampler.p_seq[j]
                    d[i] = sampler.d_seq[j] * d_scale
                    q[i] = sampler.density(y)

            raw = p * d / q
            w = _weights(cfg.variant, p, d, q, cfg.maligan_clip)
            lr = scheduler_lr(cfg.lr_gen, t - 1, cfg.iters, cfg.scheduler)
            skipped = 0
            if normalize and w.sum() <= 0:
                log.warning("iteration %d: all weights zero, generator step skipped", t)
                skipped, grad_norm = 1, 0.0
            else:
                step = lr * weighted_logprob_grad(gen, samples, w, self_normalize=normalize)
                grad_norm = float(np.linalg.norm(step))
                gen = TabularGenerator(space, gen.logits + step)

            kl, tv = _divergences(gen, target)
            ess = float(w.sum() ** 2 / np.sum(w**2)) if np.any(w > 0) else 0.0
            rec = IterRecord(
                t, kl, tv, float(raw.mean()), eta, grad_norm, float(w.max()), ess, lr,
                skipped, (time.perf_counter() - start) * 1e3,
            )
            result.records.append(rec)
            result.generator, result.discriminator = gen, disc
            if not np.isfinite(kl) or kl > limit:
                result.status = "diverged"
                result.notes.append(
                    f"iteration {t}: KL {kl:.6g} exceeded {cfg.divergence_factor:g}x "
                    f"initial {max(kl0, KL_FLOOR):.6g}"
                )
                log.info(result.notes[-1])
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def record_row(rec: IterRecord) -> dict:
    row = asdict(rec)
    return {k: row[k] for k in CSV_FIELDS}
