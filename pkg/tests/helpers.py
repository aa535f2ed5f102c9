"""Instance builders shared by the test modules."""

import numpy as np

from gfast_demand.channel import (BandPlan, BinderTopology, dbm_hz_to_watts, dbm_to_watts,
                                  generate_channel)
from gfast_demand.spectrum import PowerConstraints

GAP = 10 ** (9.75 / 10)
SYMBOL_RATE = 48e3
DESK_R_MIN = 250e6 * 128 / 4096     # 250 Mbit/s scaled to a 128-tone band


def lengths_for(seed, L, lo=10.0, hi=200.0):
    return tuple(np.random.default_rng([seed, 1]).uniform(lo, hi, L))


def desk(seed=0, L=6, N=128, fext=1e-8, lo=10.0, hi=200.0, p_sum_dbm=4.0, b_max=12):
    """Seeded binder with the default mask (-65 to -79 dBm/Hz) and budgets."""
    top = BinderTopology(lengths_for(seed, L, lo, hi), fext_coupling=fext, rng_seed=seed)
    band = BandPlan(N)
    ch = generate_channel(top, band)
    f = band.frequencies
    psd = -65.0 + (-79.0 + 65.0) * (f - band.f_start) / (band.f_stop - band.f_start)
    mask = np.repeat(dbm_hz_to_watts(psd, band.tone_spacing)[:, None], L, axis=1)
    cons = PowerConstraints(mask, np.full(L, float(dbm_to_watts(p_sum_dbm))), b_max)
    return ch, cons
