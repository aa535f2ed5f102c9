"""Minimum-rate constrained sum-rate maximization.

Prioritized users maximize their sum rate while every other user keeps a
guaranteed minimum rate.  Two solvers:

* :func:`solve_alternating` dualizes the minimum rates.  Each multiplier is
  the weight of its user in an inner weighted sum-rate solve and follows the
  projected subgradient step ``lam <- max(0, lam + alpha (r_min - R))``.
  After the multipliers settle, the disabled set is enlarged by one
  priority-aware sweep and the multipliers are re-tuned for the new set.
* :func:`solve_heuristic` keeps, for every constrained user, the lowest
  tones of its sum-rate optimal allocation that are just enough to reach
  ``r_min``, disables the rest, and runs one sum-rate solve.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelTensor
from .precoding import PrecoderKind, build_structure, make_order
from .spectrum import (PowerConstraints, PrecoderSolution, SolverSettings, WsrResult,
                       solve_srop, solve_wsr, update_disabled)

log = logging.getLogger(__name__)

DEFAULT_SYMBOL_RATE = 48e3


class InfeasibleDemandError(ValueError):
    """A minimum rate exceeds the user's rate at the sum-rate optimal point."""


@dataclass(frozen=True)
class PriorityPartition:
    """Prioritized users and the minimum rates [bit/s] of all others.

    ``r_min`` has one entry per line; entries of prioritized users are
    ignored and stored as 0.
    """

    prioritized: tuple[int, ...]
    num_lines: int
    r_min: np.ndarray = None

    def __post_init__(self):
        prio = tuple(sorted(int(i) for i in self.prioritized))
        if len(set(prio)) != len(prio):
            raise ValueError(f"duplicate prioritized lines {prio}")
        if any(i < 0 or i >= self.num_lines for i in prio):
            raise ValueError(f"prioritized lines {prio} out of range for {self.num_lines} lines")
        object.__setattr__(self, "prioritized", prio)
        r = np.zeros(self.num_lines) if self.r_min is None else np.array(self.r_min, dtype=float)
        r = np.broadcast_to(r, (self.num_lines,)).copy()
        if np.any(~np.isfinite(r)) or np.any(r < 0):
            raise ValueError(f"r_min must be finite and >= 0, got {r}")
        r[list(prio)] = 0.0
        object.__setattr__(self, "r_min", r)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.num_lines, dtype=bool)
        m[list(self.prioritized)] = True
        return m

    @property
    def constrained(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


@dataclass(frozen=True)
class DemandSettings:
    eps_r: float = 0.005          # relative min-rate tolerance
    eps_lambda: float = 1e-3      # multiplier change, relative to max(1, |lambda|)
    eps_cs: float = 1e-2          # lambda (R - r_min) / r_min, see slackness_residual
    max_iter: int = 200           # subgradient steps per disabled-set stage
    max_stages: int = 32
    alpha0: float = 1.0
    lambda0: float = 1.0
    restore_factor: float = 1.5
    damping: float = 0.5          # per-user step scale factor on a subgradient reversal
    growth: float = 1.25          # per-user step scale factor otherwise (capped at 1)
    guard_prioritized: bool = False


@dataclass(frozen=True)
class LambdaStep:
    """One logged multiplier update; ``lam_next`` follows the subgradient rule
    unless ``restored`` is set."""

    stage: int
    t: int
    lam: np.ndarray
    alpha: np.ndarray          # per constrained user
    rates: np.ndarray          # aggregate rates of the constrained users [bit/s]
    lam_next: np.ndarray
    restored: bool = False


@dataclass
class SolveReport:
    solver: str
    kind: PrecoderKind
    partition: PriorityPartition
    solution: PrecoderSolution
    user_rates: np.ndarray           # bit/s
    srop_rates: np.ndarray           # bit/s
    srop: PrecoderSolution = field(repr=False, default=None)
    lambda_trajectory: list = field(default_factory=list)
    violations: dict = field(default_factory=dict)
    prioritized_below_srop: list = field(default_factory=list)
    wsr_solves: int = 0              # weighted sum-rate solves after the SROP
    stages: int = 0
    converged: bool = True
    wall_time: float = 0.0
    n_max: np.ndarray | None = None
    lam: np.ndarray | None = None    # multipliers of the returned iterate
    flags: list = field(default_factory=list)

    @property
    def normalized_rates(self) -> np.ndarray:
        """User rates relative to the SROP rates (1.0 = SROP)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.srop_rates > 0, self.user_rates / self.srop_rates, np.nan)


def line_lengths_of(tensor: ChannelTensor) -> np.ndarray:
    """Line lengths, or an attenuation-based stand-in for loaded channels."""
    if tensor.line_lengths is not None:
        return np.asarray(tensor.line_lengths, dtype=float)
    return -np.mean(np.log(np.abs(np.diagonal(tensor.H, axis1=1, axis2=2))), axis=0)


def min_rate_violations(rates, partition: PriorityPartition) -> np.ndarray:
    """Relative shortfall ``max(0, (r_min - R) / r_min)`` per line (0 where r_min = 0)."""
    r_min = partition.r_min
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(r_min > 0, (r_min - rates) / r_min, 0.0)
    v[partition.mask] = 0.0
    return np.maximum(v, 0.0)


def slackness_residual(lam, rates, partition: PriorityPartition, rate_unit: float) -> np.ndarray:
    """``lam (R - r_min) / r_min`` per constrained user.

    Users with ``r_min = 0`` are normalized by ``rate_unit`` instead.
    """
    cons = partition.constrained
    r = partition.r_min[cons]
    denom = np.where(r > 0, r, rate_unit)
    return np.asarray(lam) * (np.asarray(rates)[cons] - r) / denom


def subgradient_update(lam, alpha, r_min, rates):
    """Projected subgradient step ``max(0, lam + alpha (r_min - rates))``."""
    return np.maximum(0.0, np.asarray(lam) + alpha * (np.asarray(r_min) - np.asarray(rates)))


def step_size(alpha0: float, t: int, subgradient: np.ndarray, rate_unit: float,
              scale=1.0):
    """Diminishing step ``scale alpha0 / (sqrt(t) max(1, ||g||))``.

    ``g`` is the subgradient measured in units of ``rate_unit``; the step is
    returned in raw rate units so that the multiplier update can use raw
    rates.  ``scale`` (scalar or one entry per user) is the oscillation
    damping kept by the solver.
    """
    g = np.linalg.norm(np.asarray(subgradient) / rate_unit)
    return np.asarray(scale, dtype=float) * alpha0 / (math.sqrt(t) * max(1.0, g)) / rate_unit


def _check_demand(partition, srop_rates):
    over = np.flatnonzero(~partition.mask & (partition.r_min > srop_rates * (1 + 1e-12)))
    if over.size:
        detail = ", ".join(f"line {i}: r_min {partition.r_min[i]:.6g} > SROP {srop_rates[i]:.6g}"
                           for i in over)
        raise InfeasibleDemandError(f"minimum rate above the sum-rate optimal rate ({detail})")


def _prepare(tensor, kind, constraints, gap, partition, order, settings, symbol_rate, srop):
    if partition.num_lines != tensor.num_lines:
        raise ValueError(f"partition covers {partition.num_lines} lines, channel has "
                         f"{tensor.num_lines}")
    if order is None:
        order = make_order(line_lengths_of(tensor), partition.prioritized)
    if srop is None:
        srop = solve_srop(tensor, kind, constraints, gap, order, settings)
    srop_rates = srop.user_rates(symbol_rate)
    _check_demand(partition, srop_rates)
    return np.asarray(order), srop, srop_rates


@dataclass
class _Iterate:
    lam: np.ndarray
    kappa: np.ndarray
    res: WsrResult
    rates: np.ndarray
    violation: float
    prio_sum: float


def solve_alternating(tensor: ChannelTensor, kind, constraints: PowerConstraints, gap: float,
                      partition: PriorityPartition, order=None,
                      settings: DemandSettings | None = None,
                      wsr_settings: SolverSettings | None = None,
                      symbol_rate: float = DEFAULT_SYMBOL_RATE,
                      srop: PrecoderSolution | None = None) -> SolveReport:
    """Dual subgradient solver alternated with priority-aware disabling.

    Parameters
    ----------
    tensor, kind, constraints, gap
        System description.
    partition : PriorityPartition
        ``r_min`` must not exceed any user's SROP rate.
    order : array_like, optional
        Encoding order; defaults to prioritized-first, shortest lines last.
    settings : DemandSettings, optional
    srop : PrecoderSolution, optional
        Precomputed sum-rate optimal point for the same order.

    Returns
    -------
    SolveReport
        The multiplier trajectory is logged step by step.  Stages start from
        the SROP's disabled set.  If a stage hits ``max_iter``, the iterate
        with the smallest violation is taken and the multipliers of its
        violated users are scaled by ``restore_factor`` for one extra solve.

    Raises
    ------
    InfeasibleDemandError
        If some ``r_min`` exceeds the user's SROP rate.
    """
    t0 = time.perf_counter()
    settings = settings or DemandSettings()
    wsr_settings = wsr_settings or SolverSettings()
    kind = PrecoderKind(kind)
    order, srop, srop_rates = _prepare(tensor, kind, constraints, gap, partition, order,
                                       wsr_settings, symbol_rate, srop)
    L = tensor.num_lines
    prio = partition.mask
    cons = partition.constrained
    r_min_c = partition.r_min[cons]
    rate_unit = float(np.mean(srop_rates[cons])) if cons.size else 1.0
    rate_unit = rate_unit if rate_unit > 0 else 1.0
    guard_ref = srop_rates[prio]

    lam = np.full(cons.size, settings.lambda0)
    kappa = np.zeros(int(prio.sum()))
    dis = srop.disabled.copy()
    trajectory: list[LambdaStep] = []
    flags: list[str] = []
    solves = 0
    warm = srop.wsr.duals if srop.wsr is not None else None
    accepted = None            # (structure, iterate, disabled)
    scale = np.ones(cons.size)
    g_prev = None
    stages = 0
    all_converged = True

    for stage in range(1, settings.max_stages + 1):
        stages = stage
        st = build_structure(tensor, kind, ~dis, order)
        history: list[_Iterate] = []
        stage_done = None
        for t in range(1, settings.max_iter + 1):
            w = np.ones(L)
            w[cons] = lam
            if settings.guard_prioritized:
                w[prio] = 1.0 + kappa
            res = solve_wsr(st, w, constraints, gap, tensor.noise_var, wsr_settings, warm)
            solves += 1
            warm = res.duals
            R = res.rates.sum(axis=0) * symbol_rate
            viol = float(min_rate_violations(R, partition).max(initial=0.0))
            it = _Iterate(lam.copy(), kappa.copy(), res, R, viol, float(R[prio].sum()))
            history.append(it)
            g = r_min_c - R[cons]
            if g_prev is not None:
                flip = g * g_prev < 0
                scale = np.where(flip, scale * settings.damping,
                                 np.minimum(1.0, scale * settings.growth))
            g_prev = g
            alpha = step_size(settings.alpha0, t, g, rate_unit, scale)
            lam_next = subgradient_update(lam, alpha, r_min_c, R[cons])
            trajectory.append(LambdaStep(stage, t, lam.copy(), alpha, R[cons].copy(),
                                         lam_next.copy()))
            if settings.guard_prioritized and kappa.size:
                beta = step_size(settings.alpha0, t, guard_ref - R[prio], rate_unit)
                kappa = subgradient_update(kappa, beta, guard_ref, R[prio])
            change = float(np.max(np.abs(lam_next - lam), initial=0.0))
            cs = float(np.max(slackness_residual(lam, R, partition, rate_unit), initial=0.0))
            if (viol <= settings.eps_r and cs <= settings.eps_cs
                    and change <= settings.eps_lambda * max(1.0, float(np.max(lam, initial=0.0)))):
                stage_done = it
                break
            lam = lam_next
        if stage_done is None:
            all_converged = False
            stage_done = _restore(history, st, tensor, constraints, gap, partition, cons,
                                  settings, wsr_settings, symbol_rate, trajectory, stage)
            solves += 1
            lam = stage_done.lam.copy()
            if stage_done.violation > settings.eps_r:
                flags.append(f"stage {stage}: min-rate violation {stage_done.violation:.4g} "
                             f"after restoration")
        else:
            lam = stage_done.lam.copy()
        if accepted is not None:
            prev = accepted[1]
            if (prev.violation <= settings.eps_r
                    and stage_done.prio_sum < prev.prio_sum * (1 - 1e-9)):
                log.debug("stage %d lowered the prioritized sum rate, reverted", stage)
                break
        accepted = (st, stage_done, dis)
        new = update_disabled(stage_done.res.rates, dis, prio)
        if np.array_equal(new, dis):
            break
        dis = new
    else:
        flags.append(f"disabled-set alternation hit the stage cap ({settings.max_stages})")

    st, best, dis = accepted
    sol = PrecoderSolution(kind=kind, order=order, weights=_weights(L, cons, best.lam),
                           structure=st, power=best.res.power, rates=best.res.rates,
                           disabled=dis, objective=best.prio_sum / symbol_rate,
                           sweeps=stages, wsr_solves=solves, converged=all_converged,
                           wsr=best.res)
    report = SolveReport(solver="alternating", kind=kind, partition=partition, solution=sol,
                         user_rates=best.rates, srop_rates=srop_rates, srop=srop,
                         lambda_trajectory=trajectory, wsr_solves=solves, stages=stages,
                         converged=all_converged and best.violation <= settings.eps_r,
                         lam=best.lam, flags=flags)
    _finish(report, settings.eps_r)
    report.wall_time = time.perf_counter() - t0
    return report


def _weights(L, cons, lam):
    w = np.ones(L)
    w[cons] = lam
    return w


def _restore(history, st, tensor, constraints, gap, partition, cons, settings, wsr_settings,
             symbol_rate, trajectory, stage):
    """Feasibility restoration at the iteration cap."""
    feasible = [it for it in history if it.violation <= settings.eps_r]
    if feasible:
        return max(feasible, key=lambda it: it.prio_sum)
    base = min(history, key=lambda it: it.violation)
    viol = min_rate_violations(base.rates, partition)[cons] > settings.eps_r
    lam = base.lam.copy()
    lam[viol] = np.maximum(lam[viol], 1e-3) * settings.restore_factor
    res = solve_wsr(st, _weights(tensor.num_lines, cons, lam), constraints, gap,
                    tensor.noise_var, wsr_settings, base.res.duals)
    R = res.rates.sum(axis=0) * symbol_rate
    trajectory.append(LambdaStep(stage, len(history) + 1, base.lam.copy(), np.zeros(lam.size),
                                 base.rates[cons].copy(), lam.copy(), restored=True))
    v = float(min_rate_violations(R, partition).max(initial=0.0))
    it = _Iterate(lam, base.kappa, res, R, v, float(R[partition.mask].sum()))
    return it if v <= base.violation else base


def _finish(report: SolveReport, eps_r: float):
    part = report.partition
    v = min_rate_violations(report.user_rates, part)
    report.violations = {int(i): float(v[i]) for i in np.flatnonzero(v > 0)}
    prio = np.flatnonzero(part.mask)
    low = prio[report.user_rates[prio] < report.srop_rates[prio] * (1 - eps_r)]
    report.prioritized_below_srop = [int(i) for i in low]
    if low.size:
        report.flags.append(f"prioritized users below their SROP rate: {low.tolist()}")


def heuristic_allocation(srop_bits: np.ndarray, r_min_bits, users) -> np.ndarray:
    """Number of lowest tones each user needs to reach its minimum rate.

    ``srop_bits`` is the (N, L) per-tone bit allocation at the SROP.  For each
    user in ``users`` returns the smallest ``n`` with
    ``sum(srop_bits[:n, l]) >= r_min_bits[l]``; 0 when the minimum rate is 0.
    """
    srop_bits = np.asarray(srop_bits, dtype=float)
    r_min_bits = np.asarray(r_min_bits, dtype=float)
    N = srop_bits.shape[0]
    n_max = np.zeros(srop_bits.shape[1], dtype=int)
    for l in users:
        target = r_min_bits[l]
        if target <= 0:
            continue
        prefix = np.cumsum(srop_bits[:, l])
        n = int(np.searchsorted(prefix, target * (1 - 1e-12), side="left")) + 1
        n_max[l] = min(n, N)
    return n_max


def solve_heuristic(tensor: ChannelTensor, kind, constraints: PowerConstraints, gap: float,
                    partition: PriorityPartition, order=None,
                    wsr_settings: SolverSettings | None = None,
                    symbol_rate: float = DEFAULT_SYMBOL_RATE,
                    srop: PrecoderSolution | None = None, eps_r: float = 0.005) -> SolveReport:
    """One-step subcarrier allocation followed by a single sum-rate solve.

    Disabled tone/user pairs still carry precoding energy for the users
    that remain active on that tone.  A constrained user that ends below
    ``r_min`` after the re-optimization is flagged, not corrected.
    """
    t0 = time.perf_counter()
    wsr_settings = wsr_settings or SolverSettings()
    kind = PrecoderKind(kind)
    order, srop, srop_rates = _prepare(tensor, kind, constraints, gap, partition, order,
                                       wsr_settings, symbol_rate, srop)
    N, L = tensor.num_tones, tensor.num_lines
    cons = partition.constrained
    n_max = heuristic_allocation(srop.rates, partition.r_min / symbol_rate, cons)
    dis = srop.disabled.copy()
    tones = np.arange(N)[:, None]
    cut = np.zeros((N, L), dtype=bool)
    cut[:, cons] = tones >= n_max[cons][None, :]
    dis |= cut
    st = build_structure(tensor, kind, ~dis, order)
    res = solve_wsr(st, np.ones(L), constraints, gap, tensor.noise_var, wsr_settings,
                    srop.wsr.duals if srop.wsr is not None else None)
    R = res.rates.sum(axis=0) * symbol_rate
    sol = PrecoderSolution(kind=kind, order=order, weights=np.ones(L), structure=st,
                           power=res.power, rates=res.rates, disabled=dis,
                           objective=res.objective, sweeps=1, wsr_solves=1,
                           converged=res.converged, wsr=res)
    report = SolveReport(solver="heuristic", kind=kind, partition=partition, solution=sol,
                         user_rates=R, srop_rates=srop_rates, srop=srop, wsr_solves=1,
                         stages=1, n_max=n_max)
    _finish(report, eps_r)
    short = [int(l) for l in cons if R[l] < partition.r_min[l] * (1 - 1e-9)]
    if short:
        report.flags.append(f"rate below r_min after re-optimization for lines {short}")
        report.converged = False
    report.wall_time = time.perf_counter() - t0
    return report


@dataclass
class ComparisonRecord:
    kind: PrecoderKind
    prioritized: tuple
    srop_rates: np.ndarray
    rates: dict                     # solver -> user rates [bit/s]
    normalized: dict                # solver -> user rates / SROP
    runtime: dict                   # solver -> seconds
    wsr_solves: dict                # solver -> solves after the SROP
    meets_r_min: dict               # solver -> bool
    reports: dict = field(repr=False, default_factory=dict)

    def prioritized_gain(self, solver: str) -> float:
        """Mean normalized rate of the prioritized users."""
        return float(np.mean(self.normalized[solver][list(self.prioritized)]))


def compare_solvers(tensor: ChannelTensor, kind, constraints: PowerConstraints, gap: float,
                    partition: PriorityPartition, order=None,
                    settings: DemandSettings | None = None,
                    wsr_settings: SolverSettings | None = None,
                    symbol_rate: float = DEFAULT_SYMBOL_RATE) -> ComparisonRecord:
    """Run both solvers from one shared SROP and tabulate normalized rates."""
    settings = settings or DemandSettings()
    order, srop, srop_rates = _prepare(tensor, kind, constraints, gap, partition, order,
                                       wsr_settings, symbol_rate, None)
    reps = {
        "alternating": solve_alternating(tensor, kind, constraints, gap, partition, order,
                                         settings, wsr_settings, symbol_rate, srop),
        "heuristic": solve_heuristic(tensor, kind, constraints, gap, partition, order,
                                     wsr_settings, symbol_rate, srop, settings.eps_r),
    }
    return ComparisonRecord(
        kind=PrecoderKind(kind), prioritized=partition.prioritized, srop_rates=srop_rates,
        rates={k: r.user_rates for k, r in reps.items()},
        normalized={k: r.normalized_rates for k, r in reps.items()},
        runtime={k: r.wall_time for k, r in reps.items()},
        wsr_solves={k: r.wsr_solves for k, r in reps.items()},
        meets_r_min={k: bool(min_rate_violations(r.user_rates, partition).max(initial=0.0)
                             <= settings.eps_r) for k, r in reps.items()},
        reports=reps)
