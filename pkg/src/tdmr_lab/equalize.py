"""MMSE linear equalizers shaping read-back toward FR or PR targets.

Conventions (shared by design, application and the trellis detectors):

* Downtrack filtering is a convolution centred on the middle tap:
  ``out[k] = sum_j h[j] * x[k - j + c]`` with ``c = ntaps // 2`` and zero padding.
* A 3-row filter applies row ``r`` to the input track ``t + r - 1``.
* Targets are correlations centred on the middle tap:
  ``d_t[k] = sum_{r,j} g[r, j] * u_{t+r-1}[k + j - 1]``; bits beyond the block are 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

H1D = np.array([0.2223, 1.0, 0.2224])
H2D = np.array([[0.0028, 0.1623, 0.1417],
                [0.2795, 1.0000, 0.2903],
                [0.2347, 0.2684, 0.0780]])

COND_LIMIT = 1e12


@dataclass(frozen=True)
class TargetMask:
    taps: np.ndarray
    kind: str  # "FR", "PR1D" or "PR2D"

    def __post_init__(self):
        if self.kind == "FR":
            if not np.array_equal(np.asarray(self.taps), [1.0]):
                raise ValueError("the FR target is the scalar 1")
        elif self.kind == "PR1D":
            if np.shape(self.taps) != (3,) or self.taps[1] != 1.0:
                raise ValueError("PR1D mask must be 3 taps with a unit centre")
        elif self.kind == "PR2D":
            if np.shape(self.taps) != (3, 3) or self.taps[1, 1] != 1.0:
                raise ValueError("PR2D mask must be 3x3 with a unit centre")
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def fr(cls):
        return cls(np.array([1.0]), "FR")

    @classmethod
    def pr1d(cls, taps=H1D):
        return cls(np.asarray(taps, dtype=float), "PR1D")

    @classmethod
    def pr2d(cls, taps=H2D):
        return cls(np.asarray(taps, dtype=float), "PR2D")


@dataclass(frozen=True)
class EqualizerSpec:
    """Filter taps plus the target they shape toward.

    ``io_shape`` is ``"per-track"`` (one 1-row filter applied to every track),
    ``"3to1"`` (3 rows in, the centre track out) or ``"3to3"`` (3 rows in, each
    track out, with boundary bits standing in for the missing outer rows).
    ``mse`` is the per-sample residual power on the design data.
    """

    taps: np.ndarray
    target: TargetMask
    io_shape: str
    mse: float = float("nan")
    condition: float = float("nan")

    def __post_init__(self):
        rows = {"per-track": 1, "3to1": 3, "3to3": 3}.get(self.io_shape)
        if rows is None:
            raise ValueError(f"unknown io_shape {self.io_shape!r}")
        if self.taps.ndim != 2 or self.taps.shape[0] != rows:
            raise ValueError(f"{self.io_shape} needs a {rows}-row tap array, got {self.taps.shape}")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("non-finite taps")

    @property
    def ntaps(self) -> int:
        return self.taps.shape[1]


class IllConditioned(np.linalg.LinAlgError):
    pass


def lagged(x: np.ndarray, ntaps: int) -> np.ndarray:
    """Regression matrix ``X[k, j] = x[k - j + c]`` (zero outside the block)."""
    n = len(x)
    c = ntaps // 2
    pad = np.concatenate([np.zeros(ntaps), x, np.zeros(ntaps)])
    idx = np.arange(n)[:, None] - np.arange(ntaps)[None, :] + c + ntaps
    return pad[idx]


def pr_target(bits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Noiseless PR output for every row of ``bits`` that has both neighbours.

    ``bits`` is ``(rows, N)``; a 1D mask is applied along each row and returns
    ``(rows, N)``; a 3x3 mask returns ``(rows - 2, N)`` for the inner rows.
    """
    bits = np.asarray(bits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    padded = np.pad(bits, ((0, 0), (1, 1)))
    n = bits.shape[1]
    if mask.ndim == 1:
        return sum(mask[j] * padded[:, j:j + n] for j in range(3))
    out = np.zeros((bits.shape[0] - 2, n))
    for r in range(3):
        for j in range(3):
            out += mask[r, j] * padded[r:r + out.shape[0], j:j + n]
    return out


def solve_normal_equations(X: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, float]:
    """Wiener taps from ``R h = p`` with empirical correlations."""
    if X.shape[0] < 10 * X.shape[1]:
        raise ValueError(f"need >= 10x more samples than taps ({X.shape[0]} < {10 * X.shape[1]})")
    R = X.T @ X / X.shape[0]
    p = X.T @ d / X.shape[0]
    cond = float(np.linalg.cond(R))
    if not np.isfinite(cond):
        raise IllConditioned(f"singular correlation matrix (condition number {cond})")
    if cond > COND_LIMIT:
        log.warning("correlation matrix condition number %.3g; regularising", cond)
        R = R + 1e-10 * np.trace(R) / len(R) * np.eye(len(R))
    return np.linalg.solve(R, p), cond


def _rows_for_output(readings: np.ndarray, top: np.ndarray | None, bottom: np.ndarray | None,
                     t: int) -> list[np.ndarray]:
    rows = []
    for nb in (t - 1, t, t + 1):
        if nb < 0:
            rows.append(np.zeros(readings.shape[1]) if top is None else np.asarray(top, float))
        elif nb >= readings.shape[0]:
            rows.append(np.zeros(readings.shape[1]) if bottom is None else np.asarray(bottom, float))
        else:
            rows.append(readings[nb])
    return rows


def _design_rows(readings, bits, target: TargetMask, io_shape: str, ntaps: int):
    """Regression rows and desired outputs for one training block.

    ``bits`` carries the written rows: the reader rows plus one boundary row above
    and below (``readings.shape[0] + 2`` rows).
    """
    readings = np.asarray(readings, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    R = readings.shape[0]
    if bits.shape != (R + 2, readings.shape[1]):
        raise ValueError(f"bits must carry one boundary row each side: {bits.shape}")
    if io_shape == "per-track":
        X = np.vstack([lagged(readings[t], ntaps) for t in range(R)])
        if target.kind == "FR":
            d = bits[1:-1].ravel()
        else:
            d = pr_target(bits[1:-1], target.taps).ravel()
        return X, d
    if R != 3:
        raise ValueError(f"{io_shape} equalization needs 3 reader tracks")
    if io_shape == "3to1":
        X = np.hstack([lagged(readings[r], ntaps) for r in range(3)])
        if target.kind != "PR1D":
            raise ValueError("3to1 shapes toward a 1D PR mask")
        return X, pr_target(bits[2:3], target.taps)[0]
    Xs = []
    for t in range(3):
        rows = _rows_for_output(readings, bits[0], bits[-1], t)
        Xs.append(np.hstack([lagged(r, ntaps) for r in rows]))
    if target.kind != "PR2D":
        raise ValueError("3to3 shapes toward a 2D PR mask")
    d = pr_target(bits, target.taps)
    return np.vstack(Xs), d.ravel()


def design_mmse(training: Iterable[tuple[np.ndarray, np.ndarray]], target: TargetMask,
                io_shape: str, ntaps: int = 15) -> EqualizerSpec:
    """Least-MSE taps so that the filtered readings approach ``target * bits``.

    ``training`` yields ``(readings, bits)`` pairs; ``bits`` has the reader rows
    plus one boundary row on each side.
    """
    Xs, ds = [], []
    for readings, bits in training:
        X, d = _design_rows(readings, bits, target, io_shape, ntaps)
        Xs.append(X)
        ds.append(d)
    X, d = np.vstack(Xs), np.concatenate(ds)
    h, cond = solve_normal_equations(X, d)
    mse = float(np.mean((X @ h - d) ** 2))
    rows = 1 if io_shape == "per-track" else 3
    return EqualizerSpec(h.reshape(rows, ntaps), target, io_shape, mse, cond)


def apply_equalizer(spec: EqualizerSpec, readings: np.ndarray,
                    top: np.ndarray | None = None, bottom: np.ndarray | None = None) -> np.ndarray:
    """Filter reader tracks.  ``top``/``bottom`` are boundary-row bit estimates (3to3 only)."""
    readings = np.atleast_2d(np.asarray(readings, dtype=np.float64))
    if spec.io_shape == "per-track":
        return _filter_rows(spec.taps[0], readings)
    if readings.shape[0] != 3:
        raise ValueError(f"{spec.io_shape} equalizer needs 3 input tracks, got {readings.shape[0]}")
    if spec.io_shape == "3to1":
        return sum(_filter_rows(spec.taps[r], readings[r:r + 1]) for r in range(3))
    out = []
    for t in range(3):
        rows = _rows_for_output(readings, top, bottom, t)
        out.append(sum(_filter_rows(spec.taps[r], rows[r][None]) for r in range(3))[0])
    return np.vstack(out)


def _filter_rows(h: np.ndarray, rows: np.ndarray) -> np.ndarray:
    ntaps = len(h)
    return np.vstack([lagged(r, ntaps) @ h for r in rows])


def orthogonality(X: np.ndarray, d: np.ndarray, h: np.ndarray) -> float:
    """Largest normalised correlation between the residual and each regressor."""
    e = X @ h - d
    power = np.mean(X * X, axis=0).max()
    return float(np.max(np.abs(X.T @ e / len(e))) / power)


def design_two_track(training: Iterable[tuple[np.ndarray, np.ndarray]], ntaps: int,
                     mask: np.ndarray = H1D) -> np.ndarray:
    """2-in/2-out equalizer for the two-track PDNP baseline.

    Each output track is shaped toward ``mask`` on its own bits from both input
    tracks.  Returns taps ``(2 outputs, 2 inputs, ntaps)``.
    """
    Xs = [[], []]
    ds = [[], []]
    for readings, bits in training:
        X = np.hstack([lagged(readings[r], ntaps) for r in range(2)])
        d = pr_target(bits, mask)
        for t in range(2):
            Xs[t].append(X)
            ds[t].append(d[t])
    taps = np.zeros((2, 2, ntaps))
    for t in range(2):
        h, _ = solve_normal_equations(np.vstack(Xs[t]), np.concatenate(ds[t]))
        taps[t] = h.reshape(2, ntaps)
    return taps


def apply_two_track(taps: np.ndarray, readings: np.ndarray) -> np.ndarray:
    out = np.zeros_like(readings, dtype=np.float64)
    for t in range(2):
        for r in range(2):
            out[t] += _filter_rows(taps[t, r], readings[r:r + 1])[0]
    return out
