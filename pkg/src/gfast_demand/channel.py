"""Synthetic G.fast binder channels and the binary channel file format.

Channel file layout (all little-endian)::

    offset  size        field
    0       4           magic  b"GFCH"
    4       4   uint32  format version (1)
    8       4   uint32  N, number of tones
    12      4   uint32  L, number of lines
    16      8   float64 f_start [Hz]
    24      8   float64 f_stop  [Hz]
    32      N*L*L*16    complex128 H, tone-major, each L x L block row-major
                        (entry (l, j) couples transmitter j into receiver l)
    ...     N*L*8       float64 noise variance [W], tone-major

Tone n sits at the center frequency ``f_start + (n + 0.5) * df`` with
``df = (f_stop - f_start) / N``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GFCH"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")

# parametric cable model defaults
ATTENUATION_DB = 3.8  # dB per sqrt(MHz) per 100 m
PROPAGATION_SPEED = 2e8  # m/s
FEXT_REF_FREQ = 1e6  # Hz
FEXT_SIGMA_DB = 3.0


class ChannelFormatError(ValueError):
    """Malformed or inconsistent channel file."""


@dataclass(frozen=True)
class BinderTopology:
    line_lengths: tuple[float, ...]
    fext_coupling: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        lengths = tuple(float(d) for d in self.line_lengths)
        object.__setattr__(self, "line_lengths", lengths)
        if len(lengths) < 1:
            raise ValueError("topology needs at least one line")
        if not all(math.isfinite(d) and d > 0 for d in lengths):
            raise ValueError(f"line lengths must be finite and > 0, got {lengths}")
        if not (math.isfinite(self.fext_coupling) and self.fext_coupling >= 0):
            raise ValueError(f"fext_coupling must be finite and >= 0, got {self.fext_coupling}")

    @property
    def num_lines(self) -> int:
        return len(self.line_lengths)


@dataclass(frozen=True)
class BandPlan:
    num_tones: int = 4096
    f_start: float = 2e6
    f_stop: float = 212e6
    symbol_rate: float = 48e3

    def __post_init__(self):
        if int(self.num_tones) != self.num_tones or self.num_tones < 1:
            raise ValueError(f"num_tones must be a positive integer, got {self.num_tones}")
        for name in ("f_start", "f_stop", "symbol_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.f_stop > self.f_start > 0:
            raise ValueError(f"need f_stop > f_start > 0, got {self.f_start}, {self.f_stop}")
        if self.symbol_rate <= 0:
            raise ValueError("symbol_rate must be > 0")

    @property
    def tone_spacing(self) -> float:
        return (self.f_stop - self.f_start) / self.num_tones

    @property
    def frequencies(self) -> np.ndarray:
        return self.f_start + (np.arange(self.num_tones) + 0.5) * self.tone_spacing


@dataclass
class ChannelTensor:
    """Per-tone channel matrices and noise variances.

    ``H[n]`` is the L x L matrix of tone ``n``; row ``l`` is the channel seen
    by receiver ``l``.  ``noise_var[n, l]`` is in watts per tone.
    ``line_lengths`` is carried along when known (generated channels), it is
    not part of the file format.
    """

    H: np.ndarray
    noise_var: np.ndarray
    f_start: float
    f_stop: float
    line_lengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.complex128)
        self.noise_var = np.asarray(self.noise_var, dtype=np.float64)
        if self.H.ndim != 3 or self.H.shape[1] != self.H.shape[2]:
            raise ValueError(f"H must have shape (N, L, L), got {self.H.shape}")
        if self.noise_var.shape != self.H.shape[:2]:
            raise ValueError(
                f"noise_var shape {self.noise_var.shape} does not match H {self.H.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("H contains non-finite entries")
        if not np.all(self.noise_var > 0):
            raise ValueError("noise variances must be > 0")
        diag = np.abs(np.diagonal(self.H, axis1=1, axis2=2))
        if np.any(diag == 0):
            n, l = np.argwhere(diag == 0)[0]
            raise ValueError(f"zero direct gain at tone {n}, line {l}")
        if self.line_lengths is not None:
            self.line_lengths = np.asarray(self.line_lengths, dtype=float)

    @property
    def num_tones(self) -> int:
        return self.H.shape[0]

    @property
    def num_lines(self) -> int:
        return self.H.shape[1]

    @property
    def tone_spacing(self) -> float:
        return (self.f_stop - self.f_start) / self.num_tones

    @property
    def frequencies(self) -> np.ndarray:
        return self.f_start + (np.arange(self.num_tones) + 0.5) * self.tone_spacing

    def equals(self, other: "ChannelTensor") -> bool:
        return (self.H.shape == other.H.shape
                and np.array_equal(self.H, other.H)
                and np.array_equal(self.noise_var, other.noise_var)
                and self.f_start == other.f_start and self.f_stop == other.f_stop)


def dbm_hz_to_watts(psd_dbm_hz, bandwidth):
    """PSD in dBm/Hz integrated over ``bandwidth`` Hz, in watts."""
    return 10.0 ** ((np.asarray(psd_dbm_hz, dtype=float) - 30.0) / 10.0) * bandwidth


def dbm_to_watts(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def direct_gain(freqs, length, attenuation_db=ATTENUATION_DB):
    """Magnitude of the direct path, ``10^(-k1 sqrt(f/MHz) (d/100 m) / 20)``."""
    loss_db = attenuation_db * np.sqrt(np.asarray(freqs) / 1e6) * (length / 100.0)
    return 10.0 ** (-loss_db / 20.0)


def generate_channel(topology: BinderTopology, band: BandPlan, noise_psd_dbm_hz: float = -140.0,
                     attenuation_db: float = ATTENUATION_DB) -> ChannelTensor:
    """Generate a seeded binder channel.

    Direct paths follow a sqrt(f) cable loss with a propagation-delay phase.
    The FEXT power from line j into receiver l is
    ``K_fext (f/1 MHz)^2 min(d_l, d_j) |H_ll|^2 X_lj`` with a symmetric
    log-normal pair factor ``X_lj`` (3 dB spread) and a uniform pair phase.
    The result is a pure function of its arguments.
    """
    for name, val in (("noise_psd_dbm_hz", noise_psd_dbm_hz), ("attenuation_db", attenuation_db)):
        if not math.isfinite(val):
            raise ValueError(f"{name} must be finite, got {val}")
    L = topology.num_lines
    d = np.asarray(topology.line_lengths)
    f = band.frequencies
    rng = np.random.default_rng(topology.rng_seed)

    z = rng.standard_normal((L, L))
    z = np.triu(z, 1) + np.triu(z, 1).T
    pair_factor = 10.0 ** (FEXT_SIGMA_DB * z / 10.0)
    pair_phase = rng.uniform(0.0, 2 * np.pi, (L, L))

    mag = direct_gain(f[:, None], d[None, :], attenuation_db)          # (N, L)
    delay = np.exp(-2j * np.pi * f[:, None] * d[None, :] / PROPAGATION_SPEED)
    direct = mag * delay

    dmin = np.minimum(d[:, None], d[None, :])
    xt_ratio = np.sqrt(topology.fext_coupling * dmin * pair_factor)   # (L, L), per unit f/f0
    H = (direct[:, :, None] * (f[:, None, None] / FEXT_REF_FREQ)
         * xt_ratio[None] * np.exp(1j * pair_phase)[None])
    idx = np.arange(L)
    H[:, idx, idx] = direct

    sigma2 = float(dbm_hz_to_watts(noise_psd_dbm_hz, band.tone_spacing))
    noise = np.full((band.num_tones, L), sigma2)
    return ChannelTensor(H, noise, band.f_start, band.f_stop, line_lengths=d.copy())


def save_channel(tensor: ChannelTensor, path) -> None:
    N, L = tensor.num_tones, tensor.num_lines
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, N, L, tensor.f_start, tensor.f_stop))
        fh.write(np.ascontiguousarray(tensor.H, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(tensor.noise_var, dtype="<f8").tobytes())


def load_channel(path) -> ChannelTensor:
    """Read a channel file written by :func:`save_channel`.

    Raises :class:`ChannelFormatError` naming the first incomplete tone (or
    noise row) when the payload is truncated.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ChannelFormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, N, L, f_start, f_stop = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ChannelFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ChannelFormatError(f"{path}: unsupported format version {version}")
    if N < 1 or L < 1:
        raise ChannelFormatError(f"{path}: invalid dimensions N={N}, L={L}")

    block = L * L * 16
    h_bytes = N * block
    noise_bytes = N * L * 8
    body = len(data) - _HEADER.size
    if body < h_bytes:
        tone = body // block
        line = (body % block) // (L * 16)
        raise ChannelFormatError(
            f"{path}: truncated channel data, tone {tone} incomplete (row {line}); "
            f"expected {N} tones")
    if body < h_bytes + noise_bytes:
        tone = (body - h_bytes) // (L * 8)
        raise ChannelFormatError(f"{path}: truncated noise table, tone {tone} missing")
    if body > h_bytes + noise_bytes:
        raise ChannelFormatError(
            f"{path}: {body - h_bytes - noise_bytes} trailing bytes; dimension mismatch "
            f"for N={N}, L={L}")

    off = _HEADER.size
    H = np.frombuffer(data, dtype="<c16", count=N * L * L, offset=off).reshape(N, L, L)
    noise = np.frombuffer(data, dtype="<f8", count=N * L, offset=off + h_bytes).reshape(N, L)
    try:
        return ChannelTensor(H.astype(np.complex128), noise.astype(np.float64), f_start, f_stop)
    except ValueError as exc:
        raise ChannelFormatError(f"{path}: {exc}") from exc
