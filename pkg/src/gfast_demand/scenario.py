"""Scenario documents: JSON with the unit in every field name.

Powers are converted to watts here and nowhere else.  Example::

    {
      "name": "desk",
      "num_tones": 128,
      "f_start_hz": 2e6, "f_stop_hz": 212e6, "symbol_rate_hz": 48000,
      "line_lengths_m": {"count": 6, "min": 10, "max": 200},
      "fext_coupling": 1e-8,
      "noise_psd_dbm_hz": -140,
      "mask_dbm_hz": [[2e6, -65], [212e6, -79]],
      "p_sum_dbm": 4, "b_max_bits": 12, "snr_gap_db": 9.75,
      "kinds": ["ZF_LINEAR", "ZF_THP"],
      "prioritized": [0, 1], "r_min_bps": 7812500,
      "seed": 0, "realizations": 1
    }

``line_lengths_m`` is either an explicit list or a uniform range drawn
from the realization seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (ATTENUATION_DB, BandPlan, BinderTopology, ChannelTensor, dbm_hz_to_watts,
                      dbm_to_watts, generate_channel, load_channel)
from .demand import DemandSettings
from .precoding import PrecoderKind
from .region import DEFAULT_RATIOS
from .spectrum import PowerConstraints, SolverSettings

REGULATORY_CEILING_DBM_HZ = -65.0

_KNOWN = {
    "name", "num_tones", "f_start_hz", "f_stop_hz", "symbol_rate_hz", "line_lengths_m",
    "fext_coupling", "attenuation_db", "noise_psd_dbm_hz", "mask_dbm_hz",
    "mask_ceiling_dbm_hz", "p_sum_dbm", "b_max_bits", "snr_gap_db", "kinds", "prioritized",
    "r_min_bps", "group_size", "roundrobin_mode", "solver", "ratios", "seed", "realizations",
    "channel_file", "demand", "wsr",
}


class ScenarioError(ValueError):
    """Invalid scenario; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


@dataclass
class Scenario:
    name: str = "scenario"
    num_tones: int = 4096
    f_start_hz: float = 2e6
    f_stop_hz: float = 212e6
    symbol_rate_hz: float = 48e3
    line_lengths_m: object = field(default_factory=lambda: {"count": 30, "min": 10, "max": 400})
    fext_coupling: float = 1e-8
    attenuation_db: float = ATTENUATION_DB
    noise_psd_dbm_hz: float = -140.0
    mask_dbm_hz: list = field(default_factory=lambda: [[2e6, -65.0], [212e6, -79.0]])
    mask_ceiling_dbm_hz: float = REGULATORY_CEILING_DBM_HZ
    p_sum_dbm: float = 4.0
    b_max_bits: int = 12
    snr_gap_db: float = 9.75
    kinds: list = field(default_factory=lambda: ["ZF_LINEAR", "ZF_THP"])
    prioritized: list = field(default_factory=lambda: [0])
    r_min_bps: object = 0.0
    group_size: int = 1
    roundrobin_mode: str = "extreme"
    solver: str = "alternating"
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))
    seed: int = 0
    realizations: int = 1
    channel_file: str | None = None
    demand: dict = field(default_factory=dict)
    wsr: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False)
    raw: dict = field(default_factory=dict, repr=False)

    # derived -------------------------------------------------------------

    @property
    def num_lines(self) -> int:
        if isinstance(self.line_lengths_m, dict):
            return int(self.line_lengths_m["count"])
        return len(self.line_lengths_m)

    @property
    def band(self) -> BandPlan:
        return BandPlan(self.num_tones, self.f_start_hz, self.f_stop_hz, self.symbol_rate_hz)

    @property
    def gap(self) -> float:
        return 10.0 ** (self.snr_gap_db / 10.0)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.realizations)]

    @property
    def precoder_kinds(self) -> list[PrecoderKind]:
        return [PrecoderKind(k) for k in self.kinds]

    def r_min_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.r_min_bps, dtype=float), (self.num_lines,)).copy()

    def lengths(self, seed: int) -> np.ndarray:
        spec = self.line_lengths_m
        if isinstance(spec, dict):
            rng = np.random.default_rng([seed, 1])
            return rng.uniform(float(spec["min"]), float(spec["max"]), int(spec["count"]))
        return np.asarray(spec, dtype=float)

    def mask_psd(self) -> np.ndarray:
        """Mask PSD [dBm/Hz] per tone, linear in dB between breakpoints."""
        bp = np.asarray(self.mask_dbm_hz, dtype=float)
        return np.interp(self.band.frequencies, bp[:, 0], bp[:, 1])

    def constraints(self) -> PowerConstraints:
        band = self.band
        pm = dbm_hz_to_watts(self.mask_psd(), band.tone_spacing)
        L = self.num_lines
        return PowerConstraints(np.repeat(pm[:, None], L, axis=1),
                                np.full(L, float(dbm_to_watts(self.p_sum_dbm))),
                                int(self.b_max_bits))

    def channel(self, seed: int) -> ChannelTensor:
        if self.channel_file:
            path = Path(self.channel_file)
            if not path.is_absolute():
                path = self.base_dir / path
            ch = load_channel(path)
            if ch.num_tones != self.num_tones or ch.num_lines != self.num_lines:
                raise ScenarioError([("channel_file",
                                      f"dimensions {ch.num_tones}x{ch.num_lines} do not match "
                                      f"num_tones={self.num_tones}, lines={self.num_lines}")])
            ch.line_lengths = self.lengths(seed)
            return ch
        topo = BinderTopology(tuple(self.lengths(seed)), self.fext_coupling, rng_seed=seed)
        return generate_channel(topo, self.band, self.noise_psd_dbm_hz, self.attenuation_db)

    def demand_settings(self) -> DemandSettings:
        return DemandSettings(**self.demand)

    def wsr_settings(self) -> SolverSettings:
        return SolverSettings(**self.wsr)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _finite(errors, name, value, lo=None, strict=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        errors.append((name, f"must be a finite number, got {value!r}"))
        return False
    if lo is not None and (value <= lo if strict else value < lo):
        errors.append((name, f"must be {'>' if strict else '>='} {lo}, got {value!r}"))
        return False
    return True


def validate(sc: Scenario) -> tuple[list, list]:
    """Return ``(errors, warnings)`` as lists of ``(field, message)``."""
    errors, warnings = [], []
    unknown = sorted(set(sc.raw) - _KNOWN)
    for key in unknown:
        warnings.append((key, "unknown field ignored"))
    if not isinstance(sc.num_tones, int) or isinstance(sc.num_tones, bool) or sc.num_tones < 1:
        errors.append(("num_tones", f"must be a positive integer, got {sc.num_tones!r}"))
    ok_f = _finite(errors, "f_start_hz", sc.f_start_hz, 0, strict=True)
    ok_f &= _finite(errors, "f_stop_hz", sc.f_stop_hz, 0, strict=True)
    if ok_f and sc.f_stop_hz <= sc.f_start_hz:
        errors.append(("f_stop_hz", "must exceed f_start_hz"))
    _finite(errors, "symbol_rate_hz", sc.symbol_rate_hz, 0, strict=True)
    _finite(errors, "fext_coupling", sc.fext_coupling, 0)
    _finite(errors, "attenuation_db", sc.attenuation_db, 0)
    _finite(errors, "noise_psd_dbm_hz", sc.noise_psd_dbm_hz)
    _finite(errors, "p_sum_dbm", sc.p_sum_dbm)
    _finite(errors, "mask_ceiling_dbm_hz", sc.mask_ceiling_dbm_hz)
    if _finite(errors, "snr_gap_db", sc.snr_gap_db, 0):
        pass
    if (not isinstance(sc.b_max_bits, int) or isinstance(sc.b_max_bits, bool)
            or sc.b_max_bits < 1):
        errors.append(("b_max_bits", f"must be an integer >= 1, got {sc.b_max_bits!r}"))

    L = None
    spec = sc.line_lengths_m
    if isinstance(spec, dict):
        c, lo, hi = spec.get("count"), spec.get("min"), spec.get("max")
        if not isinstance(c, int) or c < 1:
            errors.append(("line_lengths_m.count", f"must be a positive integer, got {c!r}"))
        elif (_finite(errors, "line_lengths_m.min", lo, 0, strict=True)
              and _finite(errors, "line_lengths_m.max", hi, 0, strict=True)):
            if hi < lo:
                errors.append(("line_lengths_m.max", "must be >= min"))
            else:
                L = c
    elif isinstance(spec, list) and spec:
        if all(_finite(errors, f"line_lengths_m[{i}]", d, 0, strict=True)
               for i, d in enumerate(spec)):
            L = len(spec)
    else:
        errors.append(("line_lengths_m", "must be a non-empty list or {count, min, max}"))

    try:
        bp = np.asarray(sc.mask_dbm_hz, dtype=float)
        if bp.ndim != 2 or bp.shape[1] != 2 or bp.shape[0] < 1 or not np.all(np.isfinite(bp)):
            raise ValueError
        if np.any(np.diff(bp[:, 0]) <= 0):
            errors.append(("mask_dbm_hz", "breakpoint frequencies must increase"))
        elif np.any(bp[:, 1] > sc.mask_ceiling_dbm_hz):
            warnings.append(("mask_dbm_hz", f"PSD above the declared ceiling "
                                            f"{sc.mask_ceiling_dbm_hz} dBm/Hz"))
    except (ValueError, TypeError):
        errors.append(("mask_dbm_hz", "must be a list of [frequency_hz, psd_dbm_hz] pairs"))

    try:
        kinds = [PrecoderKind(k) for k in sc.kinds]
        if not kinds:
            errors.append(("kinds", "must name at least one precoder"))
    except ValueError:
        errors.append(("kinds", f"entries must be in {[k.value for k in PrecoderKind]}"))

    if L is not None:
        prio = sc.prioritized
        if (not isinstance(prio, list) or not all(isinstance(i, int) for i in prio)
                or len(set(prio)) != len(prio) or any(i < 0 or i >= L for i in prio)):
            errors.append(("prioritized", f"must be distinct line indices in [0, {L})"))
        try:
            r = np.broadcast_to(np.asarray(sc.r_min_bps, dtype=float), (L,))
            if np.any(~np.isfinite(r)) or np.any(r < 0):
                errors.append(("r_min_bps", "must be finite and >= 0"))
        except (ValueError, TypeError):
            errors.append(("r_min_bps", f"must be a number or a list of {L} numbers "
                                        "covering every line"))
        if not isinstance(sc.group_size, int) or not 1 <= sc.group_size <= L:
            errors.append(("group_size", f"must be an integer in [1, {L}]"))
    if sc.roundrobin_mode not in ("extreme", "min_rate"):
        errors.append(("roundrobin_mode", "must be 'extreme' or 'min_rate'"))
    if sc.solver not in ("alternating", "heuristic"):
        errors.append(("solver", "must be 'alternating' or 'heuristic'"))
    try:
        r = [float(x) for x in sc.ratios]
        if not r or r != sorted(r) or any(not math.isfinite(x) or x < 0 for x in r):
            raise ValueError
    except (ValueError, TypeError):
        errors.append(("ratios", "must be a sorted non-empty list of finite values >= 0"))
    if not isinstance(sc.seed, int) or sc.seed < 0:
        errors.append(("seed", "must be an integer >= 0"))
    if not isinstance(sc.realizations, int) or sc.realizations < 1:
        errors.append(("realizations", "must be an integer >= 1"))
    for name, cls in (("demand", DemandSettings), ("wsr", SolverSettings)):
        try:
            cls(**getattr(sc, name))
        except TypeError as exc:
            errors.append((name, str(exc)))
    if sc.channel_file:
        path = Path(sc.channel_file)
        if not path.is_absolute():
            path = sc.base_dir / path
        if not path.exists():
            errors.append(("channel_file", f"{path} does not exist"))
    return errors, warnings


def load_scenario(path, seed: int | None = None) -> Scenario:
    """Parse and validate a scenario file; raises :class:`ScenarioError`."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError([("scenario", f"{path} not found")]) from None
    except json.JSONDecodeError as exc:
        raise ScenarioError([("scenario", f"{path}: invalid JSON ({exc})")]) from None
    if not isinstance(raw, dict):
        raise ScenarioError([("scenario", "top level must be an object")])
    if seed is not None:
        raw = dict(raw, seed=int(seed))
    kwargs = {k: v for k, v in raw.items() if k in _KNOWN}
    sc = Scenario(**kwargs, base_dir=path.parent, raw=raw)
    errors, _ = validate(sc)
    if errors:
        raise ScenarioError(errors)
    return sc
