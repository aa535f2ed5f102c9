"""Two-group rate regions and round-robin prioritization studies.

Rates are normalized by the sum-rate optimal point (SROP), so the SROP sits
at (100 %, 100 %).  The weight ratio of a sweep point is
``w_unprioritized / w_prioritized``; ratios above 1 are applied as
``(1 / ratio, 1)`` so every weight stays in [0, 1].
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelTensor
from .demand import (DEFAULT_SYMBOL_RATE, DemandSettings, PriorityPartition, line_lengths_of,
                     solve_alternating, solve_heuristic)
from .precoding import PrecoderKind, make_order
from .spectrum import (PowerConstraints, PrecoderSolution, SolverSettings, alternate_disabling,
                       solve_srop)

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.0, 1 / 64, 1 / 16, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 16.0, 64.0)
AVERAGING_NOTE = "normalized coordinates averaged per (kind, ratio) over realizations"


@dataclass(frozen=True)
class RegionSweepSpec:
    prioritized: tuple[int, ...]
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    kinds: tuple[PrecoderKind, ...] = (PrecoderKind.ZF_LINEAR, PrecoderKind.ZF_THP)

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if not r or any(not np.isfinite(x) or x < 0 for x in r):
            raise ValueError(f"ratios must be finite and >= 0, got {r}")
        if list(r) != sorted(r):
            raise ValueError(f"ratios must be sorted ascending, got {r}")
        object.__setattr__(self, "ratios", r)
        object.__setattr__(self, "prioritized", tuple(int(i) for i in self.prioritized))
        object.__setattr__(self, "kinds", tuple(PrecoderKind(k) for k in self.kinds))


@dataclass(frozen=True)
class RegionPoint:
    ratio: float
    kind: PrecoderKind
    group1_pct: float          # prioritized group, percent of its SROP sum rate
    group2_pct: float          # remaining users
    group1_bps: float
    group2_bps: float
    rates: np.ndarray = field(repr=False, default=None)   # per user [bit/s]
    converged: bool = True
    error: str = ""


def ratio_weights(ratio: float, prioritized_mask: np.ndarray) -> np.ndarray:
    """Group-common weights for a ratio ``w_unprioritized / w_prioritized``."""
    if ratio <= 1.0:
        wp, wo = 1.0, ratio
    else:
        wp, wo = 1.0 / ratio, 1.0
    return np.where(prioritized_mask, wp, wo)


def _group_mask(members, L):
    m = np.zeros(L, dtype=bool)
    m[list(members)] = True
    return m


def _weighted_point(tensor, kind, constraints, gap, mask, ratio, settings, srop):
    """Alternating WSR solve with group weights.

    Uses the encoding order of the SROP anchor and starts from its disabled
    set, so the first solve shares the anchor's precoder structure.  The
    heavier group is protected in disabling sweeps.
    """
    weights = ratio_weights(ratio, mask)
    lead = mask if ratio <= 1.0 else ~mask
    start = srop.disabled | (weights == 0)[None, :]
    return alternate_disabling(tensor, kind, constraints, gap, weights, order=srop.order,
                               disabled=start, prioritized=lead, settings=settings)


def pareto_front(points: list[RegionPoint], tol: float = 1e-6) -> list[RegionPoint]:
    """Drop points dominated by another point by more than ``tol`` percent
    in one coordinate while not worse by more than ``tol`` in the other."""
    keep = []
    for p in points:
        dominated = False
        for q in points:
            if q is p or q.error:
                continue
            ge = q.group1_pct >= p.group1_pct - tol and q.group2_pct >= p.group2_pct - tol
            gt = q.group1_pct > p.group1_pct + tol or q.group2_pct > p.group2_pct + tol
            if ge and gt:
                dominated = True
                break
        if not dominated:
            keep.append(p)
    return keep


def _sweep_job(args):
    tensor, kind, constraints, gap, mask, ratio, settings, symbol_rate, srop, ref = args
    try:
        if ratio == 1.0:
            sol = srop
        else:
            sol = _weighted_point(tensor, kind, constraints, gap, mask, ratio, settings, srop)
        R = sol.user_rates(symbol_rate)
        g1, g2 = float(R[mask].sum()), float(R[~mask].sum())
        return RegionPoint(ratio, kind, _pct(g1, ref[0]), _pct(g2, ref[1]), g1, g2, R,
                           bool(sol.converged))
    except (ValueError, np.linalg.LinAlgError) as exc:
        return RegionPoint(ratio, kind, np.nan, np.nan, np.nan, np.nan, None, False, str(exc))


def _pct(x, ref):
    return 100.0 * x / ref if ref > 0 else (100.0 if x == 0 else np.inf)


def _map(fn, jobs, workers):
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def sweep_region(tensor: ChannelTensor, spec: RegionSweepSpec, constraints: PowerConstraints,
                 gap: float, settings: SolverSettings | None = None,
                 symbol_rate: float = DEFAULT_SYMBOL_RATE, pareto: bool = True,
                 workers: int = 1) -> list[RegionPoint]:
    """Trace the two-group region for every precoder kind of ``spec``.

    The SROP of each kind (encoded with the prioritized group first) is the
    normalization anchor and is reused as the ratio-1 point.  Points are
    returned per kind in ascending ratio order; ``pareto`` drops dominated
    points.  Solver failures are annotated on the point instead of raised.
    """
    L = tensor.num_lines
    mask = _group_mask(spec.prioritized, L)
    order = make_order(line_lengths_of(tensor), spec.prioritized)
    out = []
    for kind in spec.kinds:
        srop = solve_srop(tensor, kind, constraints, gap, order, settings)
        R = srop.user_rates(symbol_rate)
        ref = (float(R[mask].sum()), float(R[~mask].sum()))
        jobs = [(tensor, kind, constraints, gap, mask, r, settings, symbol_rate, srop, ref)
                for r in spec.ratios]
        pts = _map(_sweep_job, jobs, workers)
        out.extend(pareto_front(pts) if pareto else pts)
    return out


def average_region(sweeps: list[list[RegionPoint]]) -> list[RegionPoint]:
    """Average normalized coordinates per (kind, ratio) over several sweeps.

    Feed unfiltered sweeps and apply :func:`pareto_front` afterwards if
    needed.  Raw-rate fields hold the averaged raw group sums.
    """
    groups: dict = {}
    for pts in sweeps:
        for p in pts:
            if not p.error:
                groups.setdefault((p.kind, p.ratio), []).append(p)
    out = []
    for (kind, ratio), ps in sorted(groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        out.append(RegionPoint(
            ratio, kind,
            float(np.mean([p.group1_pct for p in ps])), float(np.mean([p.group2_pct for p in ps])),
            float(np.mean([p.group1_bps for p in ps])), float(np.mean([p.group2_bps for p in ps])),
            None, all(p.converged for p in ps)))
    return out


@dataclass(frozen=True)
class GainRecord:
    seed: int
    kind: PrecoderKind
    mode: str
    solver: str
    line: int
    length: float
    prioritized: tuple
    srop_bps: float
    achieved_bps: float

    @property
    def normalized(self) -> float:
        return self.achieved_bps / self.srop_bps if self.srop_bps > 0 else np.nan

    @property
    def gain_pct(self) -> float:
        return 100.0 * (self.normalized - 1.0)


def round_robin_subsets(num_lines: int, group_size: int) -> list[tuple[tuple[int, ...], tuple]]:
    """Consecutive windows of ``group_size`` lines covering every line once.

    When ``group_size`` does not divide ``num_lines`` the last window wraps
    around to line 0.  Returns ``(window, new_lines)`` pairs, where
    ``new_lines`` are the lines prioritized for the first time.

    >>> round_robin_subsets(5, 2)
    [((0, 1), (0, 1)), ((2, 3), (2, 3)), ((4, 0), (4,))]
    """
    if not 1 <= group_size <= num_lines:
        raise ValueError(f"group_size must be in [1, {num_lines}], got {group_size}")
    out = []
    for start in range(0, num_lines, group_size):
        window = tuple((start + k) % num_lines for k in range(group_size))
        new = tuple(i for i in window if i >= start)
        out.append((window, new))
    return out


def _rr_job(args):
    (tensor, kind, constraints, gap, window, new, mode, r_min, solver, settings,
     demand_settings, symbol_rate, seed) = args
    L = tensor.num_lines
    lengths = line_lengths_of(tensor)
    mask = _group_mask(window, L)
    order = make_order(lengths, window)
    srop = solve_srop(tensor, kind, constraints, gap, order, settings)
    srop_R = srop.user_rates(symbol_rate)
    if mode == "extreme":
        if mask.all():
            R = srop_R
        else:
            sol = alternate_disabling(tensor, kind, constraints, gap, mask.astype(float),
                                      order=order, prioritized=mask, settings=settings)
            R = sol.user_rates(symbol_rate)
        used = "wsr"
    else:
        rm = np.where(mask, 0.0, np.broadcast_to(np.asarray(r_min, dtype=float), (L,)))
        rm = np.minimum(rm, srop_R)
        part = PriorityPartition(window, L, rm)
        if solver == "heuristic":
            rep = solve_heuristic(tensor, kind, constraints, gap, part, order, settings,
                                  symbol_rate, srop)
        else:
            rep = solve_alternating(tensor, kind, constraints, gap, part, order,
                                    demand_settings, settings, symbol_rate, srop)
        R = rep.user_rates
        used = solver
    return [GainRecord(seed, PrecoderKind(kind), mode, used, int(i), float(lengths[i]),
                       tuple(window), float(srop_R[i]), float(R[i])) for i in new]


def round_robin_study(tensor: ChannelTensor, group_size: int, constraints: PowerConstraints,
                      gap: float, kind, mode: str = "extreme", r_min=None,
                      solver: str = "alternating", seed: int = 0,
                      settings: SolverSettings | None = None,
                      demand_settings: DemandSettings | None = None,
                      symbol_rate: float = DEFAULT_SYMBOL_RATE,
                      workers: int = 1) -> list[GainRecord]:
    """Prioritize every line exactly once and record its gain over the SROP.

    Parameters
    ----------
    mode : {"extreme", "min_rate"}
        ``extreme`` gives the remaining users zero weight (their lines only
        help the prioritized group).  ``min_rate`` guarantees ``r_min``
        [bit/s] to the remaining users, clipped to their SROP rates.
    solver : {"alternating", "heuristic"}
        Min-rate solver; ignored in extreme mode.

    Returns
    -------
    list of GainRecord
        One record per line, in window order.
    """
    if mode not in ("extreme", "min_rate"):
        raise ValueError(f"mode must be 'extreme' or 'min_rate', got {mode!r}")
    if mode == "min_rate" and r_min is None:
        raise ValueError("min_rate mode needs r_min")
    if solver not in ("alternating", "heuristic"):
        raise ValueError(f"unknown solver {solver!r}")
    kind = PrecoderKind(kind)
    jobs = [(tensor, kind, constraints, gap, w, new, mode, r_min, solver, settings,
             demand_settings, symbol_rate, seed)
            for w, new in round_robin_subsets(tensor.num_lines, group_size)]
    return [rec for recs in _map(_rr_job, jobs, workers) for rec in recs]


@dataclass(frozen=True)
class GainSummary:
    kind: PrecoderKind
    mode: str
    solver: str
    count: int
    mean_normalized: float
    mean_gain_pct: float
    p10_gain_pct: float
    p50_gain_pct: float
    p90_gain_pct: float


def aggregate(records: list[GainRecord]) -> list[GainSummary]:
    """Mean and percentile statistics per (kind, mode, solver)."""
    if not records:
        raise ValueError("aggregate needs at least one record")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.kind.value, r.mode, r.solver), []).append(r)
    out = []
    for (kind, mode, solver), rs in sorted(groups.items()):
        g = np.array([r.gain_pct for r in rs])
        p10, p50, p90 = np.percentile(g, [10, 50, 90])
        out.append(GainSummary(PrecoderKind(kind), mode, solver, len(rs),
                               float(np.mean([r.normalized for r in rs])), float(g.mean()),
                               float(p10), float(p50), float(p90)))
    return out
