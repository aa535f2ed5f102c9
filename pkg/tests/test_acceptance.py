"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import time

import numpy as np
from scipy.stats import spearmanr

from conftest import record
from helpers import DESK_R_MIN, GAP, SYMBOL_RATE, desk
from oracles import grid_wsr_2x2, prefix_tone_count, thp_oracle, zf_oracle

from gfast_demand import cli
from gfast_demand.channel import ChannelTensor
from gfast_demand.demand import (DemandSettings, PriorityPartition, compare_solvers,
                                 heuristic_allocation, solve_alternating, solve_heuristic)
from gfast_demand.precoding import (PrecoderKind, build_structure, interference_residuals,
                                    make_order)
from gfast_demand.region import RegionSweepSpec, round_robin_study, sweep_region
from gfast_demand.spectrum import (PowerConstraints, alternate_disabling, audit_allocation,
                                   solve_srop, solve_wsr)

KINDS = (PrecoderKind.ZF_LINEAR, PrecoderKind.ZF_THP)


def test_criterion_01_zf_residuals():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in KINDS}
    for i in range(50):
        L = int(rng.integers(3, 9))
        N = int(rng.integers(16, 129))
        ch, _ = desk(seed=i, L=L, N=N, fext=float(rng.choice([1e-8, 1e-7, 1e-6])), hi=400.0)
        active = rng.random((N, L)) < 0.8
        order = rng.permutation(L)
        for kind in KINDS:
            st = build_structure(ch, kind, active, order)
            worst[kind] = max(worst[kind], float(interference_residuals(ch, st).max()))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-9 and elapsed < 60
    record(1, ok, f"max residual ZF {worst[KINDS[0]]:.2e}, THP {worst[KINDS[1]]:.2e} "
                  f"(< 1e-9), {elapsed:.1f} s (< 60 s)")
    assert ok


def _allocations():
    """Every kind of solution the package returns, on a few desk binders."""
    for seed in range(3):
        ch, cons = desk(seed=seed, L=6, fext=[1e-8, 1e-7, 1e-6][seed])
        prio = (0, 1)
        order = make_order(ch.line_lengths, prio)
        for kind in KINDS:
            srop = solve_srop(ch, kind, cons, GAP, order)
            yield "srop", ch, cons, srop.structure, srop.power, srop.rates
            part = PriorityPartition(prio, 6, 0.6 * srop.user_rates(SYMBOL_RATE))
            for solver in (solve_alternating, solve_heuristic):
                sol = solver(ch, kind, cons, GAP, part, order, srop=srop).solution
                yield solver.__name__, ch, cons, sol.structure, sol.power, sol.rates
            w = np.random.default_rng(seed).uniform(0, 2, 6)
            sol = alternate_disabling(ch, kind, cons, GAP, w, order=order)
            yield "weighted", ch, cons, sol.structure, sol.power, sol.rates


def test_criterion_02_constraint_audit():
    worst_mask = worst_sum = worst_bits = worst_mismatch = 0.0
    b_max, count = None, 0
    for _, ch, cons, st, power, rates in _allocations():
        rep = audit_allocation(ch, st, power, cons, GAP, rates)
        worst_mask = max(worst_mask, rep.mask_violation)
        worst_sum = max(worst_sum, rep.sum_violation)
        worst_bits = max(worst_bits, rep.max_rate)
        worst_mismatch = max(worst_mismatch, rep.rate_mismatch)
        b_max = cons.b_max
        count += 1
    ok = (worst_mask <= 1e-6 and worst_sum <= 1e-6 and worst_bits <= b_max + 1e-9
          and worst_mismatch <= 1e-6)
    record(2, ok, f"{count} allocations: mask {worst_mask:.1e}, sum {worst_sum:.1e} "
                  f"(<= 1e-6 rel), max bits {worst_bits:.12f} (<= {b_max} + 1e-9)")
    assert ok


def _tiny_instance(rng):
    H = rng.normal(size=(2, 2, 2)) + 1j * rng.normal(size=(2, 2, 2))
    H[:, [0, 1], [0, 1]] *= 3.0
    noise = rng.uniform(0.5, 2.0, (2, 2)) * 1e-2
    ch = ChannelTensor(H, noise, 1e6, 3e6)
    mask = rng.uniform(0.2, 1.0, (2, 2))
    p_sum = rng.uniform(0.3, 1.2, 2)
    b_max = int(rng.integers(4, 9))
    return ch, PowerConstraints(mask, p_sum, b_max)


def test_criterion_03_grid_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        ch, cons = _tiny_instance(rng)
        kind = KINDS[i % 2]
        order = rng.permutation(2)
        w = rng.uniform(0.2, 2.0, 2)
        st = build_structure(ch, kind, np.ones((2, 2), bool), order)
        res = solve_wsr(st, w, cons, GAP, ch.noise_var)

        # oracle gains and power maps from independent factorizations
        gain = np.zeros((2, 2))
        M = np.zeros((2, 2, 2))
        for n in range(2):
            if kind == PrecoderKind.ZF_LINEAR:
                cols, g = zf_oracle(ch.H[n])
                gain[n], M[n] = g, np.abs(cols) ** 2
            else:
                cols, g = thp_oracle(ch.H[n][order])
                gain[n, order], M[n][:, order] = g, np.abs(cols) ** 2
        cap = GAP * ch.noise_var * (2.0 ** cons.b_max - 1) / gain
        mask_bound = np.min(cons.p_mask[:, :, None] / M, axis=1)
        ub = np.minimum(cap, mask_bound)
        best = grid_wsr_2x2(gain, M, cons.p_mask, cons.p_sum, ub, w, GAP, ch.noise_var)
        worst = max(worst, abs(res.objective - best) / best)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.005 and elapsed < 30
    record(3, ok, f"max |solver - grid| / grid = {worst:.2e} (<= 0.5%), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_criterion_04_dual_solver_contract():
    settings = DemandSettings()
    fails, worst_short, worst_cs, worst_eq, max_t, n_steps = [], 0.0, -np.inf, 0.0, 0, 0
    for i in range(20):
        L = 4 + i % 3
        ch, cons = desk(seed=100 + i, L=L, N=(64, 128)[i % 2], fext=(1e-8, 1e-7)[i % 2])
        prio = (0, 1)
        order = make_order(ch.line_lengths, prio)
        kind = KINDS[i % 2]
        srop = solve_srop(ch, kind, cons, GAP, order)
        part = PriorityPartition(prio, L, 0.6 * srop.user_rates(SYMBOL_RATE))
        rep = solve_alternating(ch, kind, cons, GAP, part, order, settings, srop=srop)
        cons_idx = part.constrained
        r_min = part.r_min[cons_idx]
        R = rep.user_rates[cons_idx]
        short = float(np.max((r_min - R) / r_min))
        cs = float(np.max(rep.lam * (R - r_min) / r_min))
        worst_short, worst_cs = max(worst_short, short), max(worst_cs, cs)
        for s in rep.lambda_trajectory:
            max_t = max(max_t, s.t)
            if s.restored:
                continue
            closed = np.maximum(0.0, s.lam + s.alpha * (r_min - s.rates))
            worst_eq = max(worst_eq, float(np.max(np.abs(closed - s.lam_next))))
            n_steps += 1
        if not rep.converged:
            fails.append(i)
    ok = (not fails and worst_short <= settings.eps_r and worst_cs <= settings.eps_cs
          and worst_eq <= 1e-12 and max_t <= settings.max_iter)
    record(4, ok, f"non-converged {fails}, max shortfall {worst_short:.2e} (<= 0.5%), "
                  f"max slackness {worst_cs:.2e} (<= {settings.eps_cs}), "
                  f"update error {worst_eq:.1e} over {n_steps} steps, max t {max_t}")
    assert ok


def test_criterion_05_weight_sweep_oracle():
    worst = 0.0
    ratios = np.linspace(0.0, 2.0, 200)
    for seed in range(6):
        ch, cons = desk(seed=seed, L=2, fext=1e-7)
        order = make_order(ch.line_lengths, (0,))
        for kind in KINDS:
            srop = solve_srop(ch, kind, cons, GAP, order)
            part = PriorityPartition((0,), 2, [0.0, 0.6 * srop.user_rates(SYMBOL_RATE)[1]])
            rep = solve_alternating(ch, kind, cons, GAP, part, order, srop=srop)
            st = rep.solution.structure
            best = -np.inf
            for r in ratios:
                res = solve_wsr(st, np.array([1.0, r]), cons, GAP, ch.noise_var)
                R = res.rates.sum(axis=0) * SYMBOL_RATE
                if R[1] >= part.r_min[1] * (1 - 0.005):
                    best = max(best, R[0])
            worst = max(worst, abs(rep.user_rates[0] - best) / best)
    ok = worst <= 0.01
    record(5, ok, f"max |alternating - sweep| / sweep = {worst:.2e} (<= 1%)")
    assert ok


def test_criterion_06_algorithm1():
    mismatches, checked, unflagged = 0, 0, 0
    for seed in range(6):
        ch, cons = desk(seed=seed, L=6, fext=(1e-8, 1e-7)[seed % 2])
        prio = (0, 1)
        order = make_order(ch.line_lengths, prio)
        for kind in KINDS:
            srop = solve_srop(ch, kind, cons, GAP, order)
            sr = srop.user_rates(SYMBOL_RATE)
            for frac in (0.0, 0.3, 0.6, 1.0):
                part = PriorityPartition(prio, 6, frac * sr)
                n_max = heuristic_allocation(srop.rates, part.r_min / SYMBOL_RATE,
                                             part.constrained)
                for l in part.constrained:
                    want = prefix_tone_count(srop.rates[:, l], part.r_min[l] / SYMBOL_RATE)
                    mismatches += int(n_max[l] != want)
                    checked += 1
                rep = solve_heuristic(ch, kind, cons, GAP, part, order, srop=srop)
                low = rep.user_rates < part.r_min * (1 - 1e-9)
                if low.any() and not rep.flags:
                    unflagged += 1
    ok = mismatches == 0 and unflagged == 0
    record(6, ok, f"n_max mismatches {mismatches}/{checked}, unflagged shortfalls {unflagged}")
    assert ok


def test_criterion_07_region_shape():
    spec = RegionSweepSpec((0, 1))
    ch, cons = desk(seed=0, L=8, N=128, fext=0.0)
    flat = sweep_region(ch, spec, cons, GAP)
    dev = max(max(abs(p.group1_pct - 100), abs(p.group2_pct - 100)) for p in flat)

    wins, above, seeds, slowest = 0, 0, 20, 0.0
    abs_wins = 0   # diagnostic only: raw prioritized rates instead of SROP-normalized
    for seed in range(seeds):
        ch, cons = desk(seed=seed, L=8, N=128, fext=1e-7)
        t0 = time.perf_counter()
        pts = sweep_region(ch, spec, cons, GAP)
        slowest = max(slowest, (time.perf_counter() - t0) / len(KINDS))
        end = {p.kind: p.group1_pct for p in pts if p.ratio == 0.0}
        above += all(v > 100.0 for v in end.values())
        wins += end[PrecoderKind.ZF_THP] >= end[PrecoderKind.ZF_LINEAR]
        raw = {p.kind: p.group1_bps for p in pts if p.ratio == 0.0}
        abs_wins += raw[PrecoderKind.ZF_THP] >= raw[PrecoderKind.ZF_LINEAR]
    ok = dev <= 1e-3 and above == seeds and wins >= 0.8 * seeds and slowest < 300
    record(7, ok, f"K_fext=0 max deviation from (100,100) {dev:.1e} pct; ratio-0 > 100% in "
                  f"{above}/{seeds}; THP gain >= ZF gain in {wins}/{seeds} (needs >= 80%; raw "
                  f"ratio-0 rate THP >= ZF in {abs_wins}/{seeds}); slowest sweep {slowest:.1f} s")
    assert ok


def test_criterion_08_gain_structure():
    recs = []
    seeds, L = 5, 8
    for seed in range(seeds):
        ch, cons = desk(seed=seed, L=L, N=128, hi=400.0)
        for kind in KINDS:
            recs += round_robin_study(ch, 2, cons, GAP, kind, "extreme", seed=seed)
    gain = [r.gain_pct for r in recs]
    rho_rate = spearmanr(gain, [r.srop_bps for r in recs])[0]
    rho_len = spearmanr(gain, [r.length for r in recs])[0]
    ok = len(recs) == seeds * L * len(KINDS) and rho_rate < 0 and rho_len > 0
    record(8, ok, f"{len(recs)} records: Spearman(gain, SROP rate) {rho_rate:+.3f} (< 0), "
                  f"Spearman(gain, length) {rho_len:+.3f} (> 0)")
    assert ok


def test_criterion_09_heuristic_vs_alternating():
    diffs, meets, solves_h, solves_a = [], True, set(), []
    part = PriorityPartition((0, 1), 6, DESK_R_MIN)
    for seed in range(10):
        ch, cons = desk(seed=seed, L=6, N=128)
        for kind in KINDS:
            c = compare_solvers(ch, kind, cons, GAP, part)
            meets &= all(c.meets_r_min.values())
            diffs.append(c.prioritized_gain("heuristic") - c.prioritized_gain("alternating"))
            solves_h.add(c.wsr_solves["heuristic"])
            solves_a.append(c.wsr_solves["alternating"])
    mean_pp = 100 * abs(float(np.mean(diffs)))
    ok = meets and mean_pp <= 10 and solves_h == {1} and min(solves_a) >= 10
    record(9, ok, f"both meet r_min: {meets}; mean |heuristic - alternating| {mean_pp:.2f} pp "
                  f"(<= 10); solves heuristic {sorted(solves_h)}, alternating min "
                  f"{min(solves_a)} (>= 10)")
    assert ok


def test_criterion_10_determinism(tmp_path, capsys):
    scen = tmp_path / "desk.json"
    scen.write_text("""{
      "name": "det", "num_tones": 64, "line_lengths_m": {"count": 4, "min": 10, "max": 200},
      "prioritized": [0], "r_min_bps": 2e6, "group_size": 2,
      "ratios": [0, 0.25, 1, 4], "seed": 3, "realizations": 2
    }""")
    identical, total = 0, 0
    for command in ("srop", "minrate", "heuristic", "region", "roundrobin"):
        outs = []
        for k in range(2):
            out = tmp_path / f"{command}_{k}"
            assert cli.main([command, "--scenario", str(scen), "--out", str(out)]) == 0
            outs.append(out)
        for f in sorted(outs[0].glob("*.csv")):
            total += 1
            identical += f.read_bytes() == (outs[1] / f.name).read_bytes()
    capsys.readouterr()
    ok = total > 0 and identical == total
    record(10, ok, f"{identical}/{total} CSV files byte-identical across reruns")
    assert ok
