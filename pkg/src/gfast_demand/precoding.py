"""Zero-forcing and ZF-THP precoder structures, per-tone rates, bit caps.

Conventions
-----------
Users and lines share indices ``0..L-1``.  A precoder structure stores, per
tone, unit-norm columns ``t_l`` (column ``l`` serves user ``l``; zero if the
user is inactive on that tone).  With user powers ``p`` the transmit matrix
is ``T = columns @ diag(sqrt(p))``.

For ZF-THP with encoding order ``k_1..k_m`` (restricted to the active users
of a tone) the effective channel ``H_active T`` is upper triangular in that
order: ``h_{k_i}^H t_{k_j} = 0`` for ``j < i``.  Interference from users
encoded after ``k_i`` is removed by the feedback filter, so every active
user sees an interference-free channel with gain ``g_eff``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .channel import ChannelTensor

RANK_TOL = 1e-12


class PrecoderKind(str, enum.Enum):
    ZF_LINEAR = "ZF_LINEAR"
    ZF_THP = "ZF_THP"


@dataclass
class PrecoderStructure:
    """Structural part of the per-tone precoders.

    Attributes
    ----------
    kind : PrecoderKind
    order : ndarray, shape (L,)
        Encoding order over all lines (only meaningful for ZF_THP).
    active : ndarray of bool, shape (N, L)
        Users served on each tone.  Users of unusable tones are inactive.
    columns : ndarray of complex, shape (N, L, L)
        Unit-norm precoder columns, ``columns[n, :, l]`` serves user ``l``.
    gain : ndarray, shape (N, L)
        Effective direct gain per unit power, ``|h_l^H t_l|^2``.
    power_map : ndarray, shape (N, L, L)
        ``power_map[n, j, l]``: power on line ``j`` per unit power of user ``l``.
    equalizer : ndarray of complex, shape (N, L)
        Scalar receive equalizers for unit user power, ``1 / (h_l^H t_l)``.
    feedback : ndarray of complex, shape (N, L, L) or None
        THP feedback filter in user indices (``F[n, a, b]`` is the weight of
        user ``b``'s symbol subtracted for user ``a``); None for linear ZF.
    usable : ndarray of bool, shape (N,)
        False where the active channel submatrix was rank deficient.
    """

    kind: PrecoderKind
    order: np.ndarray
    active: np.ndarray
    columns: np.ndarray
    gain: np.ndarray
    power_map: np.ndarray
    equalizer: np.ndarray
    feedback: np.ndarray | None
    usable: np.ndarray

    @property
    def num_tones(self) -> int:
        return self.gain.shape[0]

    @property
    def num_lines(self) -> int:
        return self.gain.shape[1]

    def line_powers(self, p: np.ndarray) -> np.ndarray:
        """Per-tone per-line transmit power ``(N, L)`` for user powers ``p``."""
        return np.einsum("njl,nl->nj", self.power_map, p)


def make_order(lengths, prioritized=None) -> np.ndarray:
    """Encoding order: prioritized users first, shortest lines last in each group.

    Ties in length are broken by ascending line index.

    >>> make_order([100, 50, 200]).tolist()
    [2, 0, 1]
    >>> make_order([100, 50, 200], prioritized=[1]).tolist()
    [1, 2, 0]
    """
    lengths = np.asarray(lengths, dtype=float)
    L = lengths.size
    if prioritized is None:
        group = np.zeros(L, dtype=int)
    else:
        group = np.ones(L, dtype=int)
        group[list(prioritized)] = 0
    # lexsort: last key is primary
    return np.lexsort((np.arange(L), -lengths, group))


def rate(gain, p, gap, noise_var):
    """Bits per tone ``log2(1 + g p / (gap sigma^2))``."""
    return np.log2(1.0 + np.asarray(gain) * np.asarray(p) / (gap * np.asarray(noise_var)))


def bitcap_to_power_cap(gain, gap, noise_var, b_max):
    """User power at which :func:`rate` reaches exactly ``b_max`` bits.

    Entries with zero gain are unusable and get a cap of 0.
    """
    gain = np.asarray(gain, dtype=float)
    num = gap * np.asarray(noise_var, dtype=float) * (2.0 ** b_max - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cap = np.where(gain > 0, num / np.where(gain > 0, gain, 1.0), 0.0)
    return cap[()] if cap.ndim == 0 else cap


def _empty_structure(kind, N, L, order):
    return PrecoderStructure(
        kind=kind,
        order=np.asarray(order),
        active=np.zeros((N, L), dtype=bool),
        columns=np.zeros((N, L, L), dtype=complex),
        gain=np.zeros((N, L)),
        power_map=np.zeros((N, L, L)),
        equalizer=np.zeros((N, L), dtype=complex),
        feedback=np.zeros((N, L, L), dtype=complex) if kind == PrecoderKind.ZF_THP else None,
        usable=np.ones(N, dtype=bool),
    )


def _full_row_rank(A: np.ndarray) -> bool:
    # rank-revealing pivoted QR of A^H
    R = scipy.linalg.qr(A.conj().T, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    return d.size == A.shape[0] and d.min() > RANK_TOL * max(np.linalg.norm(A, 2), 1e-300)


def _group_tones(active: np.ndarray):
    """Yield (mask, tone_indices) for each distinct non-empty active pattern."""
    patterns, inverse = np.unique(active, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    for i, pat in enumerate(patterns):
        if pat.any():
            yield pat, np.flatnonzero(inverse == i)


def build_zf(tensor: ChannelTensor, active: np.ndarray) -> PrecoderStructure:
    """Linear ZF: unit-norm columns of the pseudo-inverse of the active rows.

    Parameters
    ----------
    tensor : ChannelTensor
    active : ndarray of bool, shape (N, L)
        Complement of the disabled set.

    Returns
    -------
    PrecoderStructure
        Tones whose active submatrix is rank deficient are flagged unusable
        and carry no active users.
    """
    N, L = tensor.num_tones, tensor.num_lines
    st = _empty_structure(PrecoderKind.ZF_LINEAR, N, L, np.arange(L))
    active = np.asarray(active, dtype=bool)
    for pat, tones in _group_tones(active):
        idx = np.flatnonzero(pat)
        A = tensor.H[tones][:, idx, :]                      # (t, m, L)
        Q, R = np.linalg.qr(np.conj(np.swapaxes(A, 1, 2)))  # A^H = Q R
        diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
        scale = np.linalg.norm(A, axis=(1, 2))
        ok = diag.min(axis=1) > 1e-8 * scale
        for k in np.flatnonzero(~ok):
            ok[k] = _full_row_rank(A[k])
        if not ok.all():
            st.usable[tones[~ok]] = False
        tones, A, Q, R = tones[ok], A[ok], Q[ok], R[ok]
        if tones.size == 0:
            continue
        # pinv(A) = Q R^{-H}
        X = np.linalg.solve(R, np.conj(np.swapaxes(Q, 1, 2)))  # R^{-1} Q^H
        P = np.conj(np.swapaxes(X, 1, 2))                       # (t, L, m)
        norms = np.linalg.norm(P, axis=1)                       # (t, m)
        cols = P / norms[:, None, :]
        ix = np.ix_(tones, np.arange(L), idx)
        st.columns[ix] = cols
        st.power_map[ix] = np.abs(cols) ** 2
        st.gain[np.ix_(tones, idx)] = 1.0 / norms ** 2
        st.equalizer[np.ix_(tones, idx)] = norms  # h^H t = 1/||p|| for A P = I
        st.active[np.ix_(tones, idx)] = True
    return st


def build_zf_thp(tensor: ChannelTensor, active: np.ndarray, order) -> PrecoderStructure:
    """ZF-THP structure from a triangular factorization of the ordered channel.

    The active rows, taken in encoding order, are factored as ``A = U Q^H``
    with ``U`` upper triangular and ``Q`` having orthonormal columns.  The
    precoder columns are the columns of ``Q``; user ``k_i`` gets
    ``g_eff = |U_ii|^2`` and the feedback filter is ``diag(U)^{-1} U - I``.
    """
    N, L = tensor.num_tones, tensor.num_lines
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(L)):
        raise ValueError(f"order {order.tolist()} is not a permutation of {L} lines")
    st = _empty_structure(PrecoderKind.ZF_THP, N, L, order)
    active = np.asarray(active, dtype=bool)
    for pat, tones in _group_tones(active):
        ordered = order[pat[order]]
        m = ordered.size
        A = tensor.H[tones][:, ordered, :]                  # rows in encoding order
        # reversed rows: A_r^H = Q R  =>  A_r = R^H Q^H, lower triangular
        Ar = A[:, ::-1, :]
        Q, R = np.linalg.qr(np.conj(np.swapaxes(Ar, 1, 2)))
        diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
        scale = np.linalg.norm(A, axis=(1, 2))
        ok = diag.min(axis=1) > 1e-8 * scale
        for k in np.flatnonzero(~ok):
            ok[k] = _full_row_rank(A[k])
        if not ok.all():
            st.usable[tones[~ok]] = False
        tones, A, Q = tones[ok], A[ok], Q[ok]
        if tones.size == 0:
            continue
        T = Q[:, :, ::-1]                                   # column i serves ordered[i]
        U = A @ T                                           # upper triangular
        u_diag = np.diagonal(U, axis1=1, axis2=2)
        B = U / u_diag[:, :, None]
        F = np.triu(B, 1)
        ix = np.ix_(tones, np.arange(L), ordered)
        st.columns[ix] = T
        st.power_map[ix] = np.abs(T) ** 2
        st.gain[np.ix_(tones, ordered)] = np.abs(u_diag) ** 2
        st.equalizer[np.ix_(tones, ordered)] = 1.0 / u_diag
        st.feedback[np.ix_(tones, ordered, ordered)] = F
        st.active[np.ix_(tones, ordered)] = True
    return st


def build_structure(tensor: ChannelTensor, kind, active, order=None) -> PrecoderStructure:
    kind = PrecoderKind(kind)
    if kind == PrecoderKind.ZF_LINEAR:
        st = build_zf(tensor, active)
        if order is not None:
            st.order = np.asarray(order)
        return st
    if order is None:
        order = np.arange(tensor.num_lines)
    return build_zf_thp(tensor, active, order)


def explicit_precoders(structure: PrecoderStructure, p: np.ndarray) -> np.ndarray:
    """Transmit matrices ``T^(n) = columns^(n) diag(sqrt(p^(n)))``."""
    return structure.columns * np.sqrt(np.maximum(p, 0.0))[:, None, :]


def interference_residuals(tensor: ChannelTensor, structure: PrecoderStructure) -> np.ndarray:
    """Normalized cross terms ``|h_l^H t_j| / (||h_l|| ||t_j||)``, shape (N, L, L).

    Only pairs that the structure must null are filled; the rest are zero:
    all active ``l != j`` for linear ZF, and for ZF-THP the pairs where ``j``
    precedes ``l`` in the encoding order.
    """
    N, L = structure.num_tones, structure.num_lines
    G = tensor.H @ structure.columns
    hn = np.linalg.norm(tensor.H, axis=2)
    tn = np.linalg.norm(structure.columns, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        res = np.abs(G) / (hn[:, :, None] * tn[:, None, :])
    res = np.nan_to_num(res)
    act = structure.active
    mask = act[:, :, None] & act[:, None, :]
    if structure.kind == PrecoderKind.ZF_LINEAR:
        mask &= ~np.eye(L, dtype=bool)[None]
    else:
        pos = np.empty(L, dtype=int)
        pos[structure.order] = np.arange(L)
        mask &= (pos[None, :] < pos[:, None])[None]
    return np.where(mask, res, 0.0)
