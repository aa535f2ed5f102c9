"""Constrained spectrum optimization for ZF / ZF-THP precoders.

The weighted sum-rate problem for a fixed precoder structure is

    max  sum_n sum_l w_l log2(1 + a_nl p_nl)
    s.t. M_n p_n <= p_mask_n            (per tone, per line)
         sum_n M_n p_n <= p_sum         (per line)
         0 <= p_nl <= cap_nl            (bit cap)

with ``a_nl = g_eff / (gap sigma^2)`` and the nonnegative power maps
``M_n``.  Both linear constraint families are dualized; given the prices,
every power has a closed-form water-filling solution, and the convex dual is
minimized with L-BFGS-B.  The primal point recovered from the prices is
scaled back onto the feasible set and certified by its duality gap and KKT
residuals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .channel import ChannelTensor
from .precoding import PrecoderKind, PrecoderStructure, bitcap_to_power_cap, build_structure, rate

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
# relative distance at which a power counts as sitting on its bound
BOUND_TOL = 1e-6


@dataclass(frozen=True)
class PowerConstraints:
    """Mask ``p_mask`` (N, L) and sum power ``p_sum`` (L,) in watts, bit cap ``b_max``."""

    p_mask: np.ndarray
    p_sum: np.ndarray
    b_max: int = 12

    def __post_init__(self):
        p_mask = np.asarray(self.p_mask, dtype=float)
        p_sum = np.asarray(self.p_sum, dtype=float)
        object.__setattr__(self, "p_mask", p_mask)
        object.__setattr__(self, "p_sum", p_sum)
        if p_mask.ndim != 2 or p_sum.shape != (p_mask.shape[1],):
            raise ValueError(f"p_mask {p_mask.shape} and p_sum {p_sum.shape} are inconsistent")
        if not (np.all(p_mask > 0) and np.all(p_sum > 0)):
            raise ValueError("p_mask and p_sum must be strictly positive")
        if not np.all(np.isfinite(p_mask)) or not np.all(np.isfinite(p_sum)):
            raise ValueError("p_mask and p_sum must be finite")
        if int(self.b_max) != self.b_max or self.b_max < 1:
            raise ValueError(f"b_max must be an integer >= 1, got {self.b_max}")


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and budgets of the weighted sum-rate solver."""

    feas_tol: float = 1e-8
    gap_tol: float = 1e-6
    max_iter: int = 5000
    max_sweeps: int = 32


@dataclass
class WsrResult:
    """Power allocation of one weighted sum-rate solve plus its certificate."""

    power: np.ndarray          # (N, L) user powers [W]
    rates: np.ndarray          # (N, L) bits per tone
    objective: float           # weighted sum of bits over tones
    dual_value: float
    gap: float                 # relative duality gap
    kkt_residual: float
    feasibility: float         # max relative constraint violation
    iterations: int
    converged: bool
    duals: tuple = field(repr=False, default=None)

    @property
    def user_bits(self) -> np.ndarray:
        return self.rates.sum(axis=0)


class _Problem:
    """Scaled per-instance data for the dual solver."""

    def __init__(self, structure, weights, constraints, gap, noise_var):
        N, L = structure.num_tones, structure.num_lines
        self.N, self.L = N, L
        self.M = structure.power_map
        self.scale = float(np.median(constraints.p_mask))
        self.mask = constraints.p_mask / self.scale
        self.psum = constraints.p_sum / self.scale
        w = np.broadcast_to(np.asarray(weights, dtype=float), (L,))
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError(f"weights must be >= 0 with at least one > 0, got {w}")
        self.w = np.broadcast_to(w, (N, L))
        cap = bitcap_to_power_cap(structure.gain, gap, noise_var, constraints.b_max) / self.scale
        self.a = structure.gain * self.scale / (gap * noise_var)
        live = structure.active & (structure.gain > 0) & (self.w > 0)
        # the mask alone bounds each user's power: M_jl p_l <= mask_j
        with np.errstate(divide="ignore"):
            mask_bound = np.min(np.where(self.M > 0, self.mask[:, :, None] / self.M, np.inf), axis=1)
        self.ub = np.where(live, np.minimum(cap, mask_bound), 0.0)
        self.live = live & (self.ub > 0)
        self.inv_a = np.where(self.live, 1.0 / np.where(self.live, self.a, 1.0), 0.0)
        self.cap = cap

    def primal(self, mu, nu):
        price = np.einsum("njl,nj->nl", self.M, mu + nu[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.w / (LN2 * price) - self.inv_a
        x = np.where(price > 0, x, np.inf)
        return np.where(self.live, np.clip(x, 0.0, self.ub), 0.0), price

    def objective(self, x):
        return float(np.sum(self.w * np.log2(1.0 + self.a * x)))

    def dual(self, z):
        N, L = self.N, self.L
        mu = z[: N * L].reshape(N, L)
        nu = z[N * L:]
        x, _ = self.primal(mu, nu)
        load = np.einsum("njl,nl->nj", self.M, x)
        g_mu = self.mask - load
        g_nu = self.psum - load.sum(axis=0)
        val = self.objective(x) + np.sum(mu * g_mu) + np.dot(nu, g_nu)
        return val, np.concatenate([g_mu.ravel(), g_nu])

    def make_feasible(self, x):
        load = np.einsum("njl,nl->nj", self.M, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            tone_scale = np.min(np.where(load > self.mask, self.mask / load, 1.0), axis=1)
        x = x * tone_scale[:, None]
        total = np.einsum("njl,nl->j", self.M, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.min(np.where(total > self.psum, self.psum / total, 1.0))
        return np.minimum(x * s, self.ub)

    def violation(self, x):
        load = np.einsum("njl,nl->nj", self.M, x)
        v_mask = np.max((load - self.mask) / self.mask)
        v_sum = np.max((load.sum(axis=0) - self.psum) / self.psum)
        v_box = np.max(np.where(self.ub > 0, (x - self.ub) / np.where(self.ub > 0, self.ub, 1), x))
        return max(0.0, v_mask, v_sum, v_box, -float(x.min(initial=0.0)))

    def kkt(self, x, mu, nu):
        """Max relative stationarity / complementarity residual."""
        price = np.einsum("njl,nj->nl", self.M, mu + nu[None, :])
        grad = self.w * self.a / (LN2 * (1.0 + self.a * x))
        scale = np.maximum(grad, price) + 1e-300
        r = (grad - price) / scale
        lo = x <= BOUND_TOL * self.ub
        hi = x >= self.ub * (1 - BOUND_TOL)
        stat = np.where(self.live & ~lo & ~hi, np.abs(r), 0.0)
        stat = np.where(self.live & lo, np.maximum(r, 0.0), stat)
        stat = np.where(self.live & hi, np.maximum(-r, 0.0), stat)
        load = np.einsum("njl,nl->nj", self.M, x)
        ref = max(float(np.max(mu, initial=0.0)), float(np.max(nu, initial=0.0)), 1e-300)
        cs_mask = np.max(mu * (self.mask - load) / self.mask) / ref if mu.size else 0.0
        cs_sum = np.max(nu * (self.psum - load.sum(axis=0)) / self.psum) / ref
        return float(max(stat.max(initial=0.0), cs_mask, cs_sum))


def solve_wsr(structure: PrecoderStructure, weights, constraints: PowerConstraints, gap: float,
              noise_var: np.ndarray, settings: SolverSettings | None = None,
              warm_start=None) -> WsrResult:
    """Weighted sum-rate optimal power allocation for a fixed precoder structure.

    Parameters
    ----------
    structure : PrecoderStructure
        Built for the active complement of the disabled set.
    weights : array_like, shape (L,)
        Nonnegative user weights; users with zero weight get zero power.
    constraints : PowerConstraints
    gap : float
        Linear SNR gap (>= 1).
    noise_var : ndarray, shape (N, L)
    settings : SolverSettings, optional
    warm_start : tuple, optional
        ``duals`` of a previous result on a problem of the same size.

    Returns
    -------
    WsrResult
        A feasible allocation (mask, sum power and bit cap hold to
        ``feas_tol`` relative) with its duality gap and KKT residual.
    """
    settings = settings or SolverSettings()
    if gap < 1:
        raise ValueError(f"SNR gap must be >= 1, got {gap}")
    prob = _Problem(structure, weights, constraints, gap, noise_var)
    N, L = prob.N, prob.L
    n_dual = N * L + L
    if warm_start is not None and warm_start[0].size == n_dual:
        z0 = np.asarray(warm_start[0], dtype=float).copy()
    else:
        z0 = np.zeros(n_dual)
        # start the sum-power prices near the uniform water level
        z0[N * L:] = 1.0 / (LN2 * np.maximum(prob.psum / max(N, 1), 1e-12)) * 1e-2

    res = scipy.optimize.minimize(
        prob.dual, z0, jac=True, method="L-BFGS-B",
        bounds=[(0.0, None)] * n_dual,
        options={"maxiter": settings.max_iter, "maxfun": 2 * settings.max_iter,
                 "ftol": 1e-15, "gtol": 1e-13, "maxcor": 20})
    z = res.x
    mu = z[: N * L].reshape(N, L)
    nu = z[N * L:]
    x, _ = prob.primal(mu, nu)
    x = prob.make_feasible(x)
    obj = prob.objective(x)
    dual_val = float(res.fun)
    gap_rel = (dual_val - obj) / max(abs(obj), 1e-12)
    feas = prob.violation(x)
    kkt = prob.kkt(x, mu, nu)
    converged = gap_rel <= settings.gap_tol and feas <= settings.feas_tol
    if not converged:
        log.warning("weighted sum-rate solve not certified: gap=%.3g feas=%.3g kkt=%.3g (%s)",
                    gap_rel, feas, kkt, res.message)
    p = x * prob.scale
    rates = np.where(prob.live, rate(structure.gain, p, gap, noise_var), 0.0)
    return WsrResult(power=p, rates=rates, objective=obj, dual_value=dual_val, gap=gap_rel,
                     kkt_residual=kkt, feasibility=feas, iterations=int(res.nit),
                     converged=converged, duals=(z, res.nit))


def update_disabled(rates: np.ndarray, disabled: np.ndarray, prioritized=None,
                    threshold: float = 1.0) -> np.ndarray:
    """One parallel disabling sweep.

    On every tone, the weakest active user below ``threshold`` bits is added
    to the disabled set.  Users outside ``prioritized`` (a boolean mask or an
    index list) are disabled before prioritized ones.  Returns a new mask;
    the input is returned unchanged in value when no user is below threshold.
    """
    rates = np.asarray(rates, dtype=float)
    disabled = np.asarray(disabled, dtype=bool)
    N, L = rates.shape
    prio = _as_mask(prioritized, L)
    weak = ~disabled & (rates < threshold)
    # rank: unprioritized weak users first, then weakest rate, then lowest index
    key = np.where(weak, rates + np.where(prio, 2.0 * threshold + 1.0, 0.0)[None, :], np.inf)
    pick = np.argmin(key, axis=1)
    hit = np.isfinite(key[np.arange(N), pick])
    out = disabled.copy()
    out[np.flatnonzero(hit), pick[hit]] = True
    return out


def _as_mask(members, L):
    if members is None:
        return np.zeros(L, dtype=bool)
    members = np.asarray(members)
    if members.dtype == bool:
        return members.copy()
    mask = np.zeros(L, dtype=bool)
    mask[members.astype(int)] = True
    return mask


@dataclass
class PrecoderSolution:
    """Result of a disabling alternation: structure, powers, rates and I_dis."""

    kind: PrecoderKind
    order: np.ndarray
    weights: np.ndarray
    structure: PrecoderStructure
    power: np.ndarray
    rates: np.ndarray
    disabled: np.ndarray
    objective: float
    sweeps: int
    wsr_solves: int
    converged: bool
    objective_history: list = field(default_factory=list)
    wsr: WsrResult | None = field(default=None, repr=False)

    @property
    def user_bits(self) -> np.ndarray:
        """Aggregate bits per DMT symbol for each user."""
        return self.rates.sum(axis=0)

    def user_rates(self, symbol_rate: float) -> np.ndarray:
        return self.user_bits * symbol_rate


def alternate_disabling(tensor: ChannelTensor, kind, constraints: PowerConstraints, gap: float,
                        weights, order=None, disabled=None, prioritized=None,
                        settings: SolverSettings | None = None) -> PrecoderSolution:
    """Alternate weighted sum-rate solves with parallel disabling sweeps.

    Starts from ``disabled`` and stops at a fixed point of
    :func:`update_disabled`.  A sweep that lowers the weighted objective is
    reverted and ends the alternation.  By default the start set holds every
    tone of the zero-weight users: they receive no power, so serving them
    would only add nulling constraints for the others.
    """
    settings = settings or SolverSettings()
    N, L = tensor.num_tones, tensor.num_lines
    kind = PrecoderKind(kind)
    order = np.arange(L) if order is None else np.asarray(order)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (L,)).copy()
    if disabled is None:
        dis = np.broadcast_to(weights == 0, (N, L)).copy()
    else:
        dis = np.array(disabled, dtype=bool)
    best = None
    history = []
    warm = None
    converged = False
    solves = 0
    for sweep in range(1, settings.max_sweeps + 1):
        st = build_structure(tensor, kind, ~dis, order)
        res = solve_wsr(st, weights, constraints, gap, tensor.noise_var, settings, warm)
        solves += 1
        warm = res.duals
        history.append(res.objective)
        if best is not None and res.objective < best[1].objective * (1 - 1e-9):
            log.debug("disabling sweep %d lowered the objective, reverted", sweep)
            converged = True
            break
        best = (st, res, dis)
        new = update_disabled(res.rates, dis, prioritized)
        if np.array_equal(new, dis):
            converged = True
            break
        dis = new
    else:
        log.warning("disabling alternation hit the sweep cap (%d), returning best so far",
                    settings.max_sweeps)
    st, res, dis = best
    return PrecoderSolution(kind=kind, order=order, weights=weights, structure=st,
                            power=res.power, rates=res.rates, disabled=dis,
                            objective=res.objective, sweeps=len(history), wsr_solves=solves,
                            converged=converged, objective_history=history, wsr=res)


def solve_srop(tensor: ChannelTensor, kind, constraints: PowerConstraints, gap: float,
               order=None, settings: SolverSettings | None = None) -> PrecoderSolution:
    """Sum-rate optimal point: unit weights, disabling alternation to a fixed point."""
    return alternate_disabling(tensor, kind, constraints, gap, np.ones(tensor.num_lines),
                               order=order, settings=settings)


@dataclass
class AuditReport:
    mask_violation: float       # max relative excess over the PSD mask
    sum_violation: float        # max relative excess over the per-line sum power
    max_rate: float             # bits per tone, recomputed from explicit precoders
    rate_mismatch: float        # max |recomputed - reported| bits
    interference: float         # max interference-to-noise ratio left uncancelled

    def ok(self, b_max, tol=1e-6, rate_tol=1e-9) -> bool:
        return (self.mask_violation <= tol and self.sum_violation <= tol
                and self.max_rate <= b_max + rate_tol and self.rate_mismatch <= 1e-6)


def audit_allocation(tensor: ChannelTensor, structure: PrecoderStructure, power: np.ndarray,
                     constraints: PowerConstraints, gap: float, rates=None) -> AuditReport:
    """Recheck a solution from explicit transmit matrices ``T^(n)``.

    Line powers are ``diag(T T^H)``; rates follow from the received signal and
    the interference terms the precoder does not cancel (all cross terms for
    linear ZF; for ZF-THP, those of users encoded earlier).
    """
    from .precoding import explicit_precoders

    T = explicit_precoders(structure, power)
    line_pow = np.sum(np.abs(T) ** 2, axis=2)                  # diag(T T^H), (N, L)
    mask_v = float(np.max((line_pow - constraints.p_mask) / constraints.p_mask))
    sum_v = float(np.max((line_pow.sum(axis=0) - constraints.p_sum) / constraints.p_sum))
    G = np.abs(tensor.H @ T) ** 2                                 # |h_l^H t_j|^2
    L = structure.num_lines
    if structure.kind == PrecoderKind.ZF_THP:
        pos = np.empty(L, dtype=int)
        pos[structure.order] = np.arange(L)
        leak = pos[None, :] < pos[:, None]
    else:
        leak = ~np.eye(L, dtype=bool)
    interf = np.sum(np.where(leak[None], G, 0.0), axis=2)
    signal = np.diagonal(G, axis1=1, axis2=2)
    explicit = np.where(structure.active,
                        np.log2(1.0 + signal / (gap * (interf + tensor.noise_var))), 0.0)
    mismatch = 0.0 if rates is None else float(np.max(np.abs(explicit - rates)))
    inr = np.where(structure.active, interf / tensor.noise_var, 0.0)
    return AuditReport(mask_violation=max(mask_v, 0.0), sum_violation=max(sum_v, 0.0),
                       max_rate=float(explicit.max(initial=0.0)), rate_mismatch=mismatch,
                       interference=float(inr.max(initial=0.0)))
