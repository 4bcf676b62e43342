"""Lloyd-Max scalar quantizers for read values and the fixed 41-bin LAI grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHA_BINS = 41
ALPHA_CENTRE = 20
ALPHA_STEP = 0.1
# Bin b is centred on -2 + 0.1 b.
ALPHA_GRID = -2.0 + ALPHA_STEP * np.arange(ALPHA_BINS)


@dataclass(frozen=True)
class QuantizerSpec:
    bin_boundaries: np.ndarray
    reproduction_levels: np.ndarray
    mse_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        b, lv = self.bin_boundaries, self.reproduction_levels
        if len(lv) != len(b) + 1:
            raise ValueError("need exactly one more level than boundaries")
        if np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        if len(b) and (np.any(lv[:-1] >= b) or np.any(lv[1:] <= b)):
            raise ValueError("each level must lie strictly between its boundaries")

    @property
    def bins(self) -> int:
        return len(self.reproduction_levels)


class DegenerateSamples(ValueError):
    pass


def _bin_stats(sorted_x: np.ndarray, csum: np.ndarray, csq: np.ndarray, b: np.ndarray):
    # Half-open (b[i-1], b[i]] intervals: a boundary value belongs to the lower bin.
    edges = np.concatenate([[0], np.searchsorted(sorted_x, b, side="right"), [len(sorted_x)]])
    n = np.diff(edges)
    s = csum[edges[1:]] - csum[edges[:-1]]
    q = csq[edges[1:]] - csq[edges[:-1]]
    return n, s, q


def train_lloyd_max(samples, bins: int, tol: float = 1e-9, max_iter: int = 200) -> QuantizerSpec:
    """Alternate centroid and midpoint updates until the relative MSE gain drops below ``tol``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(np.unique(x)) < bins:
        raise DegenerateSamples(f"need at least {bins} distinct samples")
    if bins == 1:
        return QuantizerSpec(np.empty(0), np.array([x.mean()]), (float(x.var()),))

    csum = np.concatenate([[0.0], np.cumsum(x)])
    csq = np.concatenate([[0.0], np.cumsum(x * x)])
    # Quantile initialisation, nudged apart where the data has ties.
    levels = np.quantile(x, (np.arange(bins) + 0.5) / bins)
    levels = np.maximum.accumulate(levels + 1e-12 * np.arange(bins))
    b = 0.5 * (levels[1:] + levels[:-1])

    def mse(b, levels):
        n, s, q = _bin_stats(x, csum, csq, b)
        return float(np.sum(q - 2 * levels * s + n * levels**2) / len(x))

    history = [mse(b, levels)]
    for _ in range(max_iter):
        n, s, _ = _bin_stats(x, csum, csq, b)
        levels = np.where(n > 0, s / np.maximum(n, 1), levels)
        b = 0.5 * (levels[1:] + levels[:-1])
        history.append(mse(b, levels))
        prev = history[-2]
        if prev - history[-1] <= tol * max(prev, 1e-300):
            break
    return QuantizerSpec(b, levels, tuple(history))


def symmetric_lloyd_max(samples, bins: int, **kwargs) -> QuantizerSpec:
    """Lloyd-Max on the sign-symmetrised samples, with boundaries made exactly odd.

    Negating a value then maps bin ``v`` to ``bins - 1 - v`` (off boundaries).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    q = train_lloyd_max(np.concatenate([x, -x]), bins, **kwargs)
    b = 0.5 * (q.bin_boundaries - q.bin_boundaries[::-1])
    lv = 0.5 * (q.reproduction_levels - q.reproduction_levels[::-1])
    return QuantizerSpec(b, lv, q.mse_history)


def quantize(spec: QuantizerSpec, value):
    """Bin index; values on a boundary go to the lower bin, out-of-range values clamp."""
    return np.searchsorted(spec.bin_boundaries, value, side="left")


def alpha_bin(value):
    """Index on the 41-point grid -2, -1.9, ..., 2; out-of-range values clamp."""
    idx = np.floor(np.asarray(value, dtype=np.float64) * 10.0 + 20.5)
    out = np.clip(idx, 0, ALPHA_BINS - 1).astype(np.int64)
    return out if out.ndim else int(out)
