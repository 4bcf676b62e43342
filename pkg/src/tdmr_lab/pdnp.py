"""Pattern-dependent noise prediction (1D and two-track) for the baseline detectors.

Bit patterns are packed oldest-first with the oldest bit most significant and
bit value 1 meaning +1.  Two-track columns pack as ``b0 + 2 * b1``.

1D model, causal form: ``z_k = y_{k-d}`` with ``d = len(mask) // 2`` sees
``sum_m c_m u_{k-m}`` (``c`` is the reversed mask) plus noise
``n_k = sum_i a_i(p_k) n_{k-i} + sigma(p_k) w_k`` where ``p_k`` covers
``u_{k-M} .. u_{k+delta}``.

Two-track model: ``n_k = y_k - s(A_k)`` with ``A_k`` covering columns
``k-J .. k+I`` of both tracks, and
``n_k = P0 n_k + sum_{i>=1} P_i n_{k-i} + Lam w_k`` with ``P0`` strictly lower
triangular (track 1 may use track 0's same-index noise) and ``Lam`` diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equalize import H1D
from .trellis import _finish, window_bits

LOG2PI = np.log(2 * np.pi)


def gaussian_metric(residual, sigma) -> np.ndarray:
    """``-0.5 log(2 pi sigma^2) - r^2 / (2 sigma^2)``."""
    r = np.asarray(residual, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    return -0.5 * (LOG2PI + 2 * np.log(s)) - r * r / (2 * s * s)


def _pack(bits01: np.ndarray, base: int = 2) -> np.ndarray:
    """Pack digits along the last axis, first digit most significant."""
    out = np.zeros(bits01.shape[:-1], dtype=np.int64)
    for i in range(bits01.shape[-1]):
        out = out * base + bits01[..., i]
    return out


# ---------------------------------------------------------------------------
# 1D


@dataclass(frozen=True)
class Pdnp1dModel:
    L: int
    M: int
    delta: int
    I: int
    mask: np.ndarray          # centred PR mask of length I + 1
    coeffs: np.ndarray        # (patterns, L)
    sigma: np.ndarray         # (patterns,)
    counts: np.ndarray        # (patterns,) training occurrences

    def __post_init__(self):
        if len(self.mask) != self.I + 1:
            raise ValueError("mask length must be I + 1")
        if self.coeffs.shape != (self.patterns, self.L) or self.sigma.shape != (self.patterns,):
            raise ValueError("coefficient tables do not match the pattern count")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive for every pattern")

    @property
    def patterns(self) -> int:
        return 2 ** (self.delta + self.M + 1)

    @property
    def memory(self) -> int:
        return max(self.I + self.L, self.M) + self.delta

    @property
    def states(self) -> int:
        return 2 ** self.memory

    @property
    def causal(self) -> np.ndarray:
        return np.asarray(self.mask, dtype=np.float64)[::-1]

    @property
    def lag(self) -> int:
        return len(self.mask) // 2


def _pdnp1d_samples(y: np.ndarray, bits: np.ndarray, L, M, delta, I, mask):
    """Noise samples, their AR history and pattern index for every usable k."""
    c = np.asarray(mask, dtype=np.float64)[::-1]
    d = len(mask) // 2
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(bits, dtype=np.float64)
    N = len(u)
    # z_k = y_{k-d}; n_k = z_k - sum_m c_m u_{k-m} for k in [I, N-1] (and k-d < N)
    ks = np.arange(I, N)
    z = y[ks - d]
    n = z - sum(c[m] * u[ks - m] for m in range(I + 1))
    noise = np.full(N, np.nan)
    noise[ks] = n
    lo = max(I + L, M)
    kk = np.arange(lo, N - delta)
    hist = np.stack([noise[kk - i] for i in range(1, L + 1)], axis=1) if L else np.zeros((len(kk), 0))
    b01 = (u > 0).astype(np.int64)
    pat = _pack(np.stack([b01[kk + o] for o in range(-M, delta + 1)], axis=1))
    return noise[kk], hist, pat


def _ar_fit(target, hist):
    if hist.shape[1] == 0:
        return np.zeros(0), float(np.sqrt(np.mean(target**2)))
    a, *_ = np.linalg.lstsq(hist, target, rcond=None)
    r = target - hist @ a
    return a, float(np.sqrt(np.mean(r**2)))


def train_pdnp1d(equalized, bits, L: int = 4, M: int = 6, delta: int = 1, I: int = 2,
                 mask=H1D) -> Pdnp1dModel:
    """Per-pattern least-squares AR fit of the noise left after the PR mask.

    ``equalized``/``bits`` may be single rows or ``(rows, N)`` arrays; each row is
    an independent sequence.  Patterns seen fewer than ``L + 5`` times use the
    pattern-independent fit.
    """
    ys = np.atleast_2d(equalized)
    us = np.atleast_2d(bits)
    parts = [_pdnp1d_samples(y, u, L, M, delta, I, mask) for y, u in zip(ys, us)]
    n = np.concatenate([p[0] for p in parts])
    hist = np.concatenate([p[1] for p in parts])
    pat = np.concatenate([p[2] for p in parts])
    P = 2 ** (delta + M + 1)
    a_all, s_all = _ar_fit(n, hist)
    coeffs = np.tile(a_all, (P, 1))
    sigma = np.full(P, s_all)
    counts = np.bincount(pat, minlength=P)
    order = np.argsort(pat, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    for p in range(P):
        if counts[p] < L + 5:
            continue
        sel = order[starts[p]:starts[p + 1]]
        coeffs[p], sigma[p] = _ar_fit(n[sel], hist[sel])
    sigma = np.maximum(sigma, 1e-9)
    return Pdnp1dModel(L, M, delta, I, np.asarray(mask, dtype=np.float64), coeffs, sigma, counts)


def pdnp1d_residuals(model: Pdnp1dModel, equalized, bits) -> np.ndarray:
    """Prediction errors of ``model`` on known data (used for prediction-gain checks)."""
    out = []
    for y, u in zip(np.atleast_2d(equalized), np.atleast_2d(bits)):
        n, hist, pat = _pdnp1d_samples(y, u, model.L, model.M, model.delta, model.I, model.mask)
        out.append(n - np.sum(hist * model.coeffs[pat], axis=1))
    return np.concatenate(out)


def pdnp_branch_metric(model, history, candidate, observation) -> float:
    """Log metric of one trellis branch.

    1D: ``history`` holds the ``memory`` previous bits (oldest first), ``candidate``
    the new bit, and ``observation`` the samples ``z_k, z_{k-1}, .., z_{k-L}`` with
    ``k`` the decision index ``delta`` stages back.
    Two-track: ``history`` is ``(2, memory)``, ``candidate`` ``(2,)``, and
    ``observation`` is ``(Np + 1, 2)`` holding ``y_k, .., y_{k-Np}``.
    """
    if isinstance(model, Pdnp1dModel):
        w = np.append(np.asarray(history, dtype=np.float64), candidate)
        S = model.memory
        c = model.causal
        z = np.asarray(observation, dtype=np.float64)
        n = np.array([z[i] - sum(c[m] * w[S - model.delta - i - m] for m in range(model.I + 1))
                      for i in range(model.L + 1)])
        pbits = (w[S - model.delta - model.M:] > 0).astype(np.int64)
        p = int(_pack(pbits))
        e = n[0] - model.coeffs[p] @ n[1:]
        return float(gaussian_metric(e, model.sigma[p]))
    w = np.concatenate([np.asarray(history, dtype=np.float64),
                        np.asarray(candidate, dtype=np.float64)[:, None]], axis=1)
    S = model.memory
    y = np.asarray(observation, dtype=np.float64)
    cols = _columns(w)
    span = model.I + model.J + 1
    ns = []
    for i in range(model.Np + 1):
        hi = S - i
        pat = int(_pack(cols[hi - span + 1:hi + 1], 4))
        ns.append(y[i] - model.targets[pat])
    p = int(_pack(cols[S - span + 1:], 4))
    e = ns[0] - model.P[p, 0] @ ns[0] - sum(model.P[p, i] @ ns[i] for i in range(1, model.Np + 1))
    return float(np.sum(gaussian_metric(e, model.lam[p])))


def bcjr_pdnp1d(y: np.ndarray, model: Pdnp1dModel, apriori: np.ndarray | None = None,
                pre: np.ndarray | None = None, post: np.ndarray | None = None,
                extrinsic: bool = False) -> np.ndarray:
    """BCJR with the 1D-PDNP branch metric.

    ``y`` is the centred-target equalizer output for bits ``0 .. N-1``.  ``pre``
    gives the ``memory`` bits before the block and ``post`` the ``lag + delta``
    bits after it (+/-1 known, 0 unknown).  Noise before the first observation is
    taken as zero.
    """
    y = np.asarray(y, dtype=np.float64)
    N = len(y)
    S, d, dl, L = model.memory, model.lag, model.delta, model.L
    c = model.causal
    K = N + d + dl
    wb = 2 * window_bits(2, S) - 1                    # (W, S+1), position S is u_j
    W = wb.shape[0]
    T = np.stack([sum(c[m] * wb[:, S - dl - i - m] for m in range(model.I + 1))
                  for i in range(L + 1)], axis=1)     # (W, L+1)
    pat = _pack((wb[:, S - dl - model.M:] > 0).astype(np.int64))
    a = model.coeffs[pat]                             # (W, L)
    sig = model.sigma[pat]
    # z_k = y_{k-d} observed for k in [d, N-1+d]; stage j decides u_j and sees z_{j-delta}
    zfull = np.full(K + L + 1, np.nan)                # index k + L
    zfull[d + L:N + d + L] = y
    gamma = np.zeros((K, W))
    for lo in range(0, K, 2048):
        js = np.arange(lo, min(K, lo + 2048))
        k = js - dl
        idx = k[:, None] - np.arange(L + 1)[None, :] + L
        zm = np.where(idx >= 0, zfull[np.clip(idx, 0, None)], np.nan)
        n = zm[:, None, :] - T[None]
        n = np.where(np.isnan(n), 0.0, n)
        e = n[..., 0] - np.sum(a[None] * n[..., 1:], axis=2)
        g = gaussian_metric(e, sig[None])
        gamma[js] = np.where(np.isnan(zm[:, :1]), 0.0, g)
    pre_b = None if pre is None else np.asarray(pre).reshape(1, S)
    post_b = None if post is None else np.asarray(post).reshape(1, d + dl)
    return _finish(gamma, 2, S, apriori, N, pre_b, post_b, extrinsic)[0]


# ---------------------------------------------------------------------------
# Two-track


@dataclass(frozen=True)
class Pdnp2dModel:
    Np: int
    I: int
    J: int
    Nc: int
    targets: np.ndarray   # (patterns, 2) estimated s(A)
    P: np.ndarray         # (patterns, Np + 1, 2, 2); P[:, 0] strictly lower triangular
    lam: np.ndarray       # (patterns, 2) diagonal of Lambda
    counts: np.ndarray

    def __post_init__(self):
        n = self.patterns
        if self.targets.shape != (n, 2) or self.P.shape != (n, self.Np + 1, 2, 2) \
                or self.lam.shape != (n, 2):
            raise ValueError("model tables do not match the pattern count")
        if np.any(self.lam <= 0):
            raise ValueError("Lambda diagonal must be positive")
        if np.any(self.P[:, 0][:, [0, 0, 1], [0, 1, 1]] != 0):
            raise ValueError("P0 must be strictly lower triangular")

    @property
    def patterns(self) -> int:
        return 4 ** (self.I + self.J + 1)

    @property
    def memory(self) -> int:
        return self.Np + self.I + self.J

    @property
    def states(self) -> int:
        return 4 ** self.memory


def _columns(bits: np.ndarray) -> np.ndarray:
    b = (np.asarray(bits) > 0).astype(np.int64)
    return b[0] + 2 * b[1]


def _ldl2(cov: np.ndarray):
    """``cov = Lo diag(D) Lo^T`` with unit lower-triangular ``Lo`` (2x2)."""
    d0 = max(cov[0, 0], 1e-18)
    l10 = cov[1, 0] / d0
    d1 = max(cov[1, 1] - l10 * l10 * d0, 1e-18)
    return np.array([[1.0, 0.0], [l10, 1.0]]), np.array([d0, d1])


def _vector_fit(target, hist, Np):
    """Least squares ``n_k ~ sum B_i n_{k-i}``; returns ``P`` (Np+1, 2, 2) and ``lam``."""
    if Np:
        B, *_ = np.linalg.lstsq(hist, target, rcond=None)    # (2Np, 2)
        r = target - hist @ B
    else:
        B = np.zeros((0, 2))
        r = target
    Lo, D = _ldl2(r.T @ r / len(r))
    Li = np.linalg.inv(Lo)
    P = np.zeros((Np + 1, 2, 2))
    P[0] = np.eye(2) - Li
    P[0][0, 1] = P[0][0, 0] = P[0][1, 1] = 0.0
    for i in range(1, Np + 1):
        P[i] = Li @ B[2 * (i - 1):2 * i].T
    return P, np.sqrt(D)


def _pdnp2d_patterns(cols: np.ndarray, I: int, J: int) -> np.ndarray:
    """Pattern index of ``A_k`` for ``k`` in ``[J, N - I)``."""
    N = len(cols)
    ks = np.arange(J, N - I)
    return _pack(np.stack([cols[ks + o] for o in range(-J, I + 1)], axis=1), 4)


def train_pdnp2d(equalized, bits, Np: int = 1, I: int = 1, J: int = 1, Nc: int = 11,
                 blocks=None) -> Pdnp2dModel:
    """Pattern targets by averaging, then per-pattern vector AR fits.

    ``equalized`` and ``bits`` are ``(2, N)`` or lists of such blocks.
    ``Nc`` records the equalizer length the data went through.
    """
    if isinstance(equalized, np.ndarray) and equalized.ndim == 2:
        equalized, bits = [equalized], [bits]
    P_n = 4 ** (I + J + 1)
    sums = np.zeros((P_n, 2))
    counts = np.zeros(P_n, dtype=np.int64)
    centre_sum = np.zeros((4, 2))
    centre_cnt = np.zeros(4)
    per_block = []
    for y, u in zip(equalized, bits):
        y = np.asarray(y, dtype=np.float64)
        cols = _columns(u)
        pat = _pdnp2d_patterns(cols, I, J)
        yk = y[:, J:y.shape[1] - I].T
        np.add.at(sums, pat, yk)
        counts += np.bincount(pat, minlength=P_n)
        np.add.at(centre_sum, cols[J:len(cols) - I], yk)
        centre_cnt += np.bincount(cols[J:len(cols) - I], minlength=4)
        per_block.append((yk, pat))
    centre_of = (np.arange(P_n) // 4 ** I) % 4
    fallback = centre_sum[centre_of] / np.maximum(centre_cnt[centre_of], 1)[:, None]
    targets = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], fallback)

    tgt, hst, pats = [], [], []
    for yk, pat in per_block:
        n = yk - targets[pat]
        rows = np.arange(Np, len(n))
        tgt.append(n[rows])
        hst.append(np.hstack([n[rows - i] for i in range(1, Np + 1)]) if Np
                   else np.zeros((len(rows), 0)))
        pats.append(pat[rows])
    n, hist, pat = np.concatenate(tgt), np.concatenate(hst), np.concatenate(pats)
    P_all, lam_all = _vector_fit(n, hist, Np)
    P = np.tile(P_all, (P_n, 1, 1, 1))
    lam = np.tile(lam_all, (P_n, 1))
    cnt = np.bincount(pat, minlength=P_n)
    order = np.argsort(pat, kind="stable")
    starts = np.concatenate([[0], np.cumsum(cnt)])
    for p in range(P_n):
        if cnt[p] < 2 * Np + 5:
            continue
        sel = order[starts[p]:starts[p + 1]]
        P[p], lam[p] = _vector_fit(n[sel], hist[sel], Np)
    lam = np.maximum(lam, 1e-9)
    return Pdnp2dModel(Np, I, J, Nc, targets, P, lam, counts)


def bcjr_pdnp2d(y: np.ndarray, model: Pdnp2dModel, apriori: np.ndarray | None = None,
                pre: np.ndarray | None = None, post: np.ndarray | None = None,
                extrinsic: bool = False) -> np.ndarray:
    """Joint two-track BCJR with the vector PDNP metric.

    ``pre`` is ``(2, memory)`` for the columns before the block and ``post``
    ``(2, I)`` for the columns after it (+/-1 known, 0 unknown).
    """
    y = np.asarray(y, dtype=np.float64)
    N = y.shape[1]
    S, I, Np = model.memory, model.I, model.Np
    span = model.I + model.J + 1
    K = N + I
    Q = 4
    wc = window_bits(Q, S)                           # (W, S+1) column symbols
    W = wc.shape[0]
    pats = np.stack([_pack(wc[:, S - i - span + 1:S - i + 1], 4) for i in range(Np + 1)], axis=1)
    tg = model.targets[pats]                         # (W, Np+1, 2)
    p0 = pats[:, 0]
    A = model.P[p0]                                  # (W, Np+1, 2, 2)
    lam = model.lam[p0]                              # (W, 2)
    yfull = np.full((K + Np, 2), np.nan)             # index k + Np
    yfull[Np:N + Np] = y.T
    gamma = np.zeros((K, W))
    for lo in range(0, K, 1024):
        js = np.arange(lo, min(K, lo + 1024))
        k = js - I
        e = None
        for i in range(Np + 1):
            idx = k - i + Np
            yi = np.where((idx >= 0)[:, None], yfull[np.clip(idx, 0, None)], np.nan)
            n = yi[:, None, :] - tg[None, :, i, :]
            n = np.where(np.isnan(n), 0.0, n)
            if i == 0:
                e = n - np.einsum("wab,kwb->kwa", A[:, 0], n)
            else:
                e = e - np.einsum("wab,kwb->kwa", A[:, i], n)
        g = np.sum(gaussian_metric(e, lam[None]), axis=2)
        obs = (k >= 0) & (k < N)
        gamma[js] = np.where(obs[:, None], g, 0.0)
    return _finish(gamma, Q, S, apriori, N, pre, post, extrinsic)
