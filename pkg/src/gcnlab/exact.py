"""Brute-force dynamics of the cooperative update on enumerable spaces.

Everything here works on whole probability tables: the optimal
discriminator, the cooperative target ``q ∝ p_prev * D``, the exact
iteration it induces, the auxiliary ``zhat`` recursion that explains its
convergence, and the ``eta`` quality measure that bounds each KL step.
Discriminator tables are arrays aligned with ``ExactDist.sequences``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .seqspace import ExactDist, SupportError, kl_divergence

EQ_TOL = 1e-9
STRICT_TOL = 1e-12


class DegenerateTargetError(ValueError):
    """The cooperative target has zero partition function."""


class LogOfZeroError(ValueError):
    """A discriminator hits 0 or 1 where an eta expectation needs its log."""


@dataclass(frozen=True)
class StepReport:
    z_t: float
    kl_before: float
    kl_after: float
    delta_t: float
    eta: float
    bound: float


@dataclass
class ZhatTable:
    values: np.ndarray
    step: int = 0

    @property
    def spread(self) -> float:
        return float(self.values.max() - self.values.min())


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def optimal_discriminator(p_d: ExactDist, p_prev: ExactDist) -> np.ndarray:
    """p_d / (p_d + p_prev) per sequence.

    Sequences with no mass under either distribution never carry weight; they
    get 0.5.
    """
    if p_d.sequences != p_prev.sequences:
        raise SupportError("distributions are defined over different sequence lists")
    denom = np.logaddexp(p_d.logp, p_prev.logp)
    dead = ~np.isfinite(denom)
    with np.errstate(invalid="ignore"):
        d = np.exp(p_d.logp - denom)
    d[dead] = 0.5
    return d


def cooperative_target(p_prev: ExactDist, D) -> tuple[ExactDist, float]:
    """q ∝ p_prev * D together with its partition z = sum(p_prev * D)."""
    D = np.asarray(D, dtype=np.float64)
    if np.any(D < 0) or np.any(D > 1):
        raise ValueError("discriminator values must lie in [0, 1]")
    logw = p_prev.logp + _log(D)
    log_z = logsumexp(logw)
    if not np.isfinite(log_z):
        raise DegenerateTargetError("sum of p_prev * D is zero")
    return ExactDist(p_prev.sequences, logw - log_z), float(np.exp(log_z))


def eta_of(D, p_d: ExactDist, p_prev: ExactDist) -> float:
    """exp(min(E_{p_d}[log D], E_{p_prev}[log(1 - D)]))."""
    D = np.asarray(D, dtype=np.float64)
    real, fake = p_d.probs > 0, p_prev.probs > 0
    if np.any(D[real] <= 0) or np.any(D[fake] >= 1):
        raise LogOfZeroError("discriminator saturates on the support of an expectation")
    e_real = float(np.sum(p_d.probs[real] * np.log(D[real])))
    e_fake = float(np.sum(p_prev.probs[fake] * np.log1p(-D[fake])))
    return math.exp(min(e_real, e_fake))


def eta_mc(real_scores, fake_scores) -> float:
    """Sample estimate of eta from discriminator scores on real and generated batches."""
    real_scores = np.clip(np.asarray(real_scores, dtype=np.float64), 1e-300, 1.0)
    fake_scores = np.clip(np.asarray(fake_scores, dtype=np.float64), 0.0, 1 - 1e-16)
    return math.exp(min(np.mean(np.log(real_scores)), np.mean(np.log1p(-fake_scores))))


def kl_step_bound(eta: float) -> float:
    """log(1/eta - 1): the guaranteed KL change when eta > 1/2."""
    if eta >= 1.0:
        return -math.inf
    return math.log(1.0 / eta - 1.0)


def _check_support(p_d: ExactDist, p_prev: ExactDist) -> None:
    if np.any((p_d.probs > 0) & ~np.isfinite(p_prev.logp)):
        raise SupportError(
            "support hypothesis violated: the starting distribution must be "
            "positive wherever the data distribution is"
        )


def step_with(p_d: ExactDist, p_prev: ExactDist, D) -> tuple[ExactDist, StepReport]:
    """Exact update p_next ∝ p_prev * D with an arbitrary discriminator table."""
    p_next, z = cooperative_target(p_prev, D)
    before = kl_divergence(p_d, p_prev)
    after = kl_divergence(p_d, p_next)
    eta = eta_of(D, p_d, p_prev)
    report = StepReport(z, before, after, after - before, eta, kl_step_bound(eta))
    return p_next, report


def exact_step(p_d: ExactDist, p_prev: ExactDist) -> tuple[ExactDist, StepReport]:
    """One iteration with both inner problems solved exactly."""
    _check_support(p_d, p_prev)
    return step_with(p_d, p_prev, optimal_discriminator(p_d, p_prev))


def zhat_init(p_d: ExactDist, p_0: ExactDist) -> ZhatTable:
    _check_support(p_d, p_0)
    live = p_0.probs > 0
    vals = np.zeros(len(p_d))
    vals[live] = np.exp(p_d.logp[live] - p_0.logp[live])
    return ZhatTable(vals, 0)


def zhat_step(prev: ZhatTable, z_t: float) -> ZhatTable:
    if not 0.0 < z_t <= 1.0:
        raise ValueError(f"partition z_t={z_t} outside (0, 1]")
    return ZhatTable(z_t * (prev.values + 1.0), prev.step + 1)


def zhat_unnormalized(p_d: ExactDist, zhat: ZhatTable) -> np.ndarray:
    """p_d / (zhat + 1): the unnormalized next iterate implied by ``zhat``."""
    return p_d.probs / (zhat.values + 1.0)


def variant_target(p_prev: ExactDist, D, kind: str) -> ExactDist:
    """Target distribution for the ``cooperative``, ``maligan`` or ``exp_d`` update."""
    D = np.asarray(D, dtype=np.float64)
    if kind == "cooperative":
        return cooperative_target(p_prev, D)[0]
    if kind == "maligan":
        live = np.isfinite(p_prev.logp)
        if np.any(D[live] >= 1.0):
            raise ZeroDivisionError("maligan weighting needs D < 1 on the support")
        logw = np.full(len(D), -np.inf)
        logw[live] = p_prev.logp[live] + _log(D[live]) - np.log1p(-D[live])
        return ExactDist.from_log_weights(p_prev.sequences, logw)
    if kind == "exp_d":
        return ExactDist.from_log_weights(p_prev.sequences, D)
    raise ValueError(f"unknown target kind {kind!r}")


@dataclass
class ExactRun:
    """Trajectory of exact iterates plus the zhat bookkeeping."""

    dists: list[ExactDist]
    reports: list[StepReport]
    zhats: list[ZhatTable]
    violations: list[str] = field(default_factory=list)


def iterate_exact(
    p_d: ExactDist, p_0: ExactDist, steps: int, stop_kl: float = STRICT_TOL
) -> ExactRun:
    """Run up to ``steps`` exact iterations, stopping once KL(p_d || p_t) <= stop_kl.

    Alongside the iterates this tracks the zhat recursion and records any
    violated invariant (equivalence with p_d / (zhat + 1), z_t < 1 for t > 1,
    geometric contraction of the zhat spread, strict KL decrease).
    """
    run = ExactRun([p_0], [], [zhat_init(p_d, p_0)])
    spread0 = run.zhats[0].spread
    prod_z = 1.0
    p = p_0
    for t in range(1, steps + 1):
        p_tilde = zhat_unnormalized(p_d, run.zhats[-1])
        p, rep = exact_step(p_d, p)
        zh = zhat_step(run.zhats[-1], rep.z_t)
        prod_z *= rep.z_t
        run.dists.append(p)
        run.reports.append(rep)
        run.zhats.append(zh)

        expected = p_tilde / p_tilde.sum()
        if np.max(np.abs(expected - p.probs)) > EQ_TOL:
            run.violations.append(f"t={t}: iterate differs from p_d/(zhat+1)")
        if t > 1 and rep.kl_before > STRICT_TOL and rep.z_t > 1 - STRICT_TOL:
            run.violations.append(f"t={t}: z_t={rep.z_t} is not < 1")
        if abs(zh.spread - spread0 * prod_z) > EQ_TOL * max(1.0, spread0):
            run.violations.append(f"t={t}: zhat spread does not contract geometrically")
        if rep.kl_before > STRICT_TOL and not rep.kl_after < rep.kl_before:
            run.violations.append(f"t={t}: KL did not decrease")
        if rep.kl_after <= stop_kl:
            break
    return run
