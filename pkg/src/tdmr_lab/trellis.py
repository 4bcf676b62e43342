"""Soft-in/soft-out BCJR detection on PR-mask ISI/ITI trellises.

All detectors here run on one generic *window trellis*.  A symbol ``x_j`` in
``[0, Q)`` packs the bits of the jointly detected tracks, with bit ``t`` at
``(x >> t) & 1`` (1 means +1).  The state before stage ``j`` is the previous
``S`` symbols.  A branch is then the window ``(x_{j-S}, ..., x_j)`` with index
``w = sum_i x_{j-S+i} * Q**(S-i)``, so the oldest symbol is most significant.
Branch metrics are natural-log likelihoods, and a-priori terms are added to them.

LLR convention: ``log P(bit=+1) / P(bit=-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equalize import TargetMask

LLR_INF = 1e3


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def window_bits(Q: int, S: int) -> np.ndarray:
    """Symbols of every window, oldest first: ``(Q**(S+1), S+1)``."""
    w = np.arange(Q ** (S + 1))
    return np.stack([(w // Q ** (S - i)) % Q for i in range(S + 1)], axis=1)


def symbol_bits(Q: int) -> np.ndarray:
    """``(Q, tracks)`` table of +/-1 bit values per symbol."""
    T = int(round(np.log2(Q)))
    x = np.arange(Q)
    return np.stack([2 * ((x >> t) & 1) - 1 for t in range(T)], axis=1)


def log_prior(llr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(log P(+1), log P(-1))`` from LLRs; infinite LLRs give exact 0/-inf."""
    llr = np.asarray(llr, dtype=np.float64)
    return -np.logaddexp(0.0, -llr), -np.logaddexp(0.0, llr)


def symbol_log_prior(llrs: np.ndarray) -> np.ndarray:
    """Per-stage symbol log priors ``(K, Q)`` from per-track LLRs ``(tracks, K)``."""
    llrs = np.atleast_2d(llrs)
    T, K = llrs.shape
    lp, lm = log_prior(llrs)
    out = np.zeros((K, 2 ** T))
    sb = symbol_bits(2 ** T)
    for t in range(T):
        out += np.where(sb[:, t][None, :] > 0, lp[t][:, None], lm[t][:, None])
    return out


def state_log_prior(pre: np.ndarray | None, Q: int, S: int) -> np.ndarray | None:
    """State prior from per-symbol priors ``(S, Q)`` of the ``S`` pre-block symbols."""
    if pre is None:
        return None
    wb = window_bits(Q, S - 1)
    out = np.zeros(Q ** S)
    for i in range(S):
        out += pre[i][wb[:, i]]
    return out


@dataclass
class BcjrResult:
    app: np.ndarray          # (K, Q) symbol log posteriors, normalised per stage
    alpha: np.ndarray        # (K+1, Q**S) normalised forward log metrics
    beta: np.ndarray         # (K+1, Q**S) normalised backward log metrics


def bcjr_windows(gamma: np.ndarray, Q: int, S: int, init: np.ndarray | None = None,
                 final: np.ndarray | None = None) -> BcjrResult:
    """Forward-backward over a window trellis.

    ``gamma`` is ``(K, Q**(S+1))``.  ``init`` and ``final`` are log weights on the
    start and end states (uniform when ``None``).
    """
    K = gamma.shape[0]
    if gamma.shape[1] != Q ** (S + 1):
        raise ValueError(f"gamma has {gamma.shape[1]} windows, trellis needs {Q ** (S + 1)}")
    if np.any(np.isnan(gamma)) or np.any(gamma == np.inf):
        raise ValueError("non-finite branch metrics")
    if S == 0:
        app = gamma - _lse(gamma, 1)[:, None]
        z = np.zeros((K + 1, 1))
        return BcjrResult(app, z, z)
    ns = Q ** S
    alpha = np.empty((K + 1, ns))
    beta = np.empty((K + 1, ns))
    a = np.zeros(ns) if init is None else np.asarray(init, dtype=np.float64)
    alpha[0] = a - _lse(a, 0)
    for k in range(K):
        prev = np.repeat(alpha[k].reshape(Q, ns // Q), Q, axis=1)
        a = _lse(prev + gamma[k].reshape(Q, ns), 0)
        alpha[k + 1] = a - _lse(a, 0)
    b = np.zeros(ns) if final is None else np.asarray(final, dtype=np.float64)
    beta[K] = b - _lse(b, 0)
    for k in range(K - 1, -1, -1):
        nxt = np.tile(beta[k + 1].reshape(ns // Q, Q), (Q, 1))
        b = _lse(gamma[k].reshape(ns, Q) + nxt, 1)
        beta[k] = b - _lse(b, 0)
    app = _lse(alpha[:-1, :, None] + gamma.reshape(K, ns, Q)
               + np.tile(beta[1:].reshape(K, ns // Q, Q), (1, Q, 1)), 1)
    app = app - _lse(app, 1)[:, None]
    return BcjrResult(app, alpha, beta)


def bit_llrs(app: np.ndarray) -> np.ndarray:
    """Per-track LLRs ``(tracks, K)`` from symbol log posteriors ``(K, Q)``."""
    Q = app.shape[1]
    sb = symbol_bits(Q)
    out = []
    for t in range(sb.shape[1]):
        out.append(_lse(app[:, sb[:, t] > 0], 1) - _lse(app[:, sb[:, t] < 0], 1))
    return np.clip(np.stack(out), -LLR_INF, LLR_INF)


def _known_symbol_prior(bits: np.ndarray | None, Q: int, count: int) -> np.ndarray:
    """Symbol priors ``(count, Q)`` for known (+/-1) or unknown (0) bits ``(tracks, count)``."""
    if bits is None:
        return np.zeros((count, Q))
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    llr = np.where(bits > 0, np.inf, np.where(bits < 0, -np.inf, 0.0))
    return symbol_log_prior(llr)


# ---------------------------------------------------------------------------
# PR-mask trellises


@dataclass(frozen=True)
class TrellisSpec:
    """PR-mask trellis: ``tracks`` rows detected jointly, memory 2 symbols."""

    mask: TargetMask
    tracks: int

    def __post_init__(self):
        if self.mask.kind == "PR1D" and self.tracks != 1:
            raise ValueError("a 1D mask drives a single-track trellis")
        if self.mask.kind == "PR2D" and self.tracks != 3:
            raise ValueError("the 3x3 mask drives the three-track trellis")
        if self.mask.kind == "FR":
            raise ValueError("FR targets have no trellis")

    @property
    def alphabet(self) -> int:
        return 2 ** self.tracks

    @property
    def memory(self) -> int:
        return 2

    @property
    def states(self) -> int:
        return self.alphabet ** self.memory

    @property
    def branches_per_state(self) -> int:
        return self.alphabet


def _finish(gamma, Q, S, apriori, N, pre, post, extrinsic):
    if apriori is not None:
        gamma[:N] += symbol_log_prior(apriori)[:, _window_newest(Q, S)]
    post_prior = _known_symbol_prior(post, Q, gamma.shape[0] - N)
    gamma[N:] += post_prior[:, _window_newest(Q, S)]
    init = state_log_prior(_known_symbol_prior(pre, Q, S), Q, S) if pre is not None else None
    res = bcjr_windows(gamma, Q, S, init)
    llr = bit_llrs(res.app[:N])
    if extrinsic and apriori is not None:
        llr = llr - np.clip(np.atleast_2d(apriori), -LLR_INF, LLR_INF)
    return llr


def _window_newest(Q, S):
    return np.arange(Q ** (S + 1)) % Q


def bcjr_pr1d(y: np.ndarray, mask: np.ndarray, sigma: float, apriori: np.ndarray | None = None,
              pre: np.ndarray | None = None, post: np.ndarray | None = None,
              extrinsic: bool = False) -> np.ndarray:
    """BCJR for ``y[k] = m0 u[k-1] + m1 u[k] + m2 u[k+1] + AWGN(sigma)``.

    ``pre`` holds the two bits before the block, ``post`` the bit after it
    (+/-1 known, 0 unknown, ``None`` all unknown).  Returns LLRs ``(N,)``.
    """
    y = np.asarray(y, dtype=np.float64)
    N = len(y)
    Q, S = 2, 2
    wb = 2 * window_bits(Q, S) - 1
    mu = wb @ np.asarray(mask, dtype=np.float64)
    gamma = np.zeros((N + 1, Q ** (S + 1)))
    gamma[1:] = -((y[:, None] - mu[None, :]) ** 2) / (2 * sigma**2)
    pre = None if pre is None else np.asarray(pre).reshape(1, 2)
    post = None if post is None else np.asarray(post).reshape(1, 1)
    return _finish(gamma, Q, S, apriori, N, pre, post, extrinsic)[0]


def bcjr_pr2d(z: np.ndarray, mask: np.ndarray, sigma, top: np.ndarray, bottom: np.ndarray,
              apriori: np.ndarray | None = None, pre: np.ndarray | None = None,
              post: np.ndarray | None = None, extrinsic: bool = False) -> np.ndarray:
    """Joint three-track BCJR with the 3x3 mask and pinned boundary rows.

    ``z`` is ``(3, N)``.  ``top``/``bottom`` are the boundary-row bits for columns
    ``-1 .. N`` (length ``N + 2``).  ``pre`` is ``(3, 2)`` for columns -2, -1 and
    ``post`` is ``(3, 1)`` for column N.  Returns LLRs ``(3, N)``.
    """
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    N = z.shape[1]
    Q, S = 8, 2
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    top = np.asarray(top, dtype=np.float64)
    bottom = np.asarray(bottom, dtype=np.float64)
    if top.shape != (N + 2,) or bottom.shape != (N + 2,):
        raise ValueError("boundary rows must cover columns -1 .. N")
    wb = window_bits(Q, S)                           # (W, 3) symbols for cols j-2, j-1, j
    sb = symbol_bits(Q)                              # (Q, 3) rows
    bits = sb[wb]                                    # (W, 3 cols, 3 rows)
    # inner contribution: rows t-1..t+1 restricted to reader rows
    mu = np.zeros((Q ** (S + 1), 3))
    for t in range(3):
        for r in range(3):
            row = t + r - 1
            if 0 <= row < 3:
                mu[:, t] += bits[:, :, row] @ mask[r]
    # boundary contribution for the observation at column k = j - 1 uses columns k-1..k+1,
    # i.e. boundary indices k .. k+2 in the (-1 .. N) array.
    bnd = np.zeros((N, 3))
    for c in range(3):
        bnd[:, 0] += mask[0, c] * top[c:c + N]
        bnd[:, 2] += mask[2, c] * bottom[c:c + N]
    gamma = np.zeros((N + 1, Q ** (S + 1)))
    diff = z.T[:, None, :] - mu[None, :, :] - bnd[:, None, :]
    gamma[1:] = -np.sum(diff**2 / (2 * sigma**2), axis=2)
    return _finish(gamma, Q, S, apriori, N, pre, post, extrinsic)


def bcjr_detect(spec: TrellisSpec, equalized: np.ndarray, a_priori: np.ndarray | None,
                noise_model, **boundary) -> np.ndarray:
    """Dispatch on the trellis and noise model.

    ``noise_model`` is a Gaussian sigma (scalar or per track) for PR trellises, or
    a :class:`~tdmr_lab.pdnp.Pdnp1dModel` / :class:`~tdmr_lab.pdnp.Pdnp2dModel`.
    """
    from .pdnp import Pdnp1dModel, Pdnp2dModel, bcjr_pdnp1d, bcjr_pdnp2d

    if isinstance(noise_model, Pdnp1dModel):
        return bcjr_pdnp1d(np.ravel(equalized), noise_model, a_priori, **boundary)
    if isinstance(noise_model, Pdnp2dModel):
        return bcjr_pdnp2d(equalized, noise_model, a_priori, **boundary)
    if spec.tracks == 1:
        return bcjr_pr1d(np.ravel(equalized), spec.mask.taps, float(np.ravel(noise_model)[0]),
                         a_priori, **boundary)
    return bcjr_pr2d(equalized, spec.mask.taps, noise_model, apriori=a_priori, **boundary)
