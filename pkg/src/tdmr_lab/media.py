"""Granular recording medium: tessellation, probabilistic write, read-back.

The medium is a surrogate for a grain-flipping-probability (GFP) model.  Grains
are Voronoi cells of jittered lattice seeds, rasterized on a sub-cell pixel grid.
Each grain is owned by the bit cell that contains its centroid.  A write gives
every grain the polarity of its owning bit and then flips it with a probability
that decays with the downtrack distance to the nearest write transition.

The read-back value of bit cell U sums, over the grains owned by the 3x3 cells
around U, the grain magnetization times the reader response integrated over the
grain's pixels.  The response is a 2D Gaussian truncated to the 3x3 window and
scaled so a uniformly magnetized window reads ``read_gain``.  Since the reading
decomposes grain by grain over the nine owning bits, it is exactly the sum of the
nine per-bit local area influences.

Training files written by :func:`emit_training_files` use a little-endian binary
layout::

    magic  b"TDMR"
    u16    version (1)
    u16    pattern index
    u16    read index
    u32    written tracks, u32 reader tracks, u32 length
    f64    samples   (reader tracks x length, row major)
    i8     bits      (written tracks x length, row major)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .seeding import stage_rng

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

# (track offset, downtrack offset) for the nine cells around an owner cell,
# row-major over the 3x3 window.
OFFSETS = [(dt, dk) for dt in (-1, 0, 1) for dk in (-1, 0, 1)]


@dataclass(frozen=True)
class MediaGeometry:
    """Cell geometry, grain density and reader response.

    Lengths are in nm.  Reader widths are full widths at half amplitude given
    as fractions of the track pitch (cross-track) and bit length (downtrack).
    ``raster`` is the number of pixels per bit cell (cross-track, downtrack).
    """

    track_pitch: float = 18.0
    bit_length: float = 11.0
    grains_per_bit: float = 3.491
    reader_width_cross: float = 0.7
    reader_width_down: float = 1.5
    read_gain: float = 2.0
    raster: tuple[int, int] = (9, 6)
    jitter: float = 0.6

    def __post_init__(self):
        for name in ("track_pitch", "bit_length", "grains_per_bit", "reader_width_cross",
                     "reader_width_down", "read_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.raster) < 1:
            raise ValueError("raster must have at least one pixel per cell")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")

    @property
    def pixel_size(self) -> tuple[float, float]:
        return self.track_pitch / self.raster[0], self.bit_length / self.raster[1]

    def reader_response(self) -> np.ndarray:
        """Reader weights at pixel centres of the 3x3-cell window.

        Shape ``(3 * raster[0], 3 * raster[1])``; the sum equals ``read_gain``.
        """
        pc, pd = self.raster
        dy, dx = self.pixel_size
        ys = (np.arange(3 * pc) + 0.5) * dy - 1.5 * self.track_pitch
        xs = (np.arange(3 * pd) + 0.5) * dx - 1.5 * self.bit_length
        sy = self.reader_width_cross * self.track_pitch * FWHM_TO_SIGMA
        sx = self.reader_width_down * self.bit_length * FWHM_TO_SIGMA
        k = np.exp(-0.5 * (ys[:, None] / sy) ** 2) * np.exp(-0.5 * (xs[None, :] / sx) ** 2)
        return k * (self.read_gain / k.sum())


@dataclass(frozen=True)
class FlipModel:
    """Grain flip probability ``p0 * exp(-d / decay)``.

    ``d`` is the downtrack distance (nm) from the grain centroid to the nearest
    write transition on the grain's track.  ``decay=inf`` gives a constant ``p0``.
    """

    # Calibrated with calibrate_flip_model() on the default geometry:
    # thresholded raw BER 0.186 on 3 x 41207 reader samples.
    p0: float = 0.5
    decay: float = 7.41

    def __post_init__(self):
        if not 0 <= self.p0 <= 1:
            raise ValueError("p0 must be a probability")
        if not self.decay > 0:
            raise ValueError("decay must be positive")

    def probability(self, distance: np.ndarray) -> np.ndarray:
        if math.isinf(self.decay):
            return np.full(distance.shape, self.p0)
        with np.errstate(over="ignore"):
            return self.p0 * np.exp(-distance / self.decay)


NOISELESS = FlipModel(p0=0.0, decay=1.0)


@dataclass(frozen=True)
class GrainMedium:
    """A tessellated write region of ``tracks x length`` bit cells.

    Per-grain arrays are indexed by grain id.  ``weights[g, o]`` is the reader
    response integrated over grain ``g`` for the cell at ``OFFSETS[o]`` from the
    grain's owner cell, restricted to that cell's 3x3 window.
    """

    geometry: MediaGeometry
    tracks: int
    length: int
    seed: int
    labels: np.ndarray = field(repr=False)
    centroid: np.ndarray = field(repr=False)
    area: np.ndarray = field(repr=False)
    owner: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    magnetization: np.ndarray = field(repr=False)

    @property
    def n_grains(self) -> int:
        return len(self.area)

    @property
    def grains_per_bit(self) -> float:
        return self.n_grains / (self.tracks * self.length)

    def with_magnetization(self, m: np.ndarray) -> "GrainMedium":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (self.n_grains,):
            raise ValueError("magnetization must have one entry per grain")
        return replace(self, magnetization=m)


def _lattice_seeds(geometry: MediaGeometry, tracks: int, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    height = tracks * geometry.track_pitch
    width = length * geometry.bit_length
    n_target = geometry.grains_per_bit * tracks * length
    grain_area = geometry.track_pitch * geometry.bit_length / geometry.grains_per_bit
    rows = max(1, round(height / math.sqrt(grain_area)))
    cols = max(1, round(n_target / rows))
    dy, dx = height / rows, width / cols
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = (c + 0.5 + 0.5 * (r % 2)) * dx
    y = (r + 0.5) * dy
    x = x + geometry.jitter * dx * rng.uniform(-0.5, 0.5, x.shape)
    y = y + geometry.jitter * dy * rng.uniform(-0.5, 0.5, y.shape)
    x = np.mod(x, width)
    return np.column_stack([y.ravel(), x.ravel()])


def generate_medium(geometry: MediaGeometry, tracks: int, length: int, seed: int,
                    tessellation: str = "voronoi") -> GrainMedium:
    """Tessellate a fresh ``tracks x length`` region.

    ``tessellation="grid"`` places one grain exactly on each bit cell and needs
    ``grains_per_bit == 1``.
    """
    if tracks < 1 or length < 1:
        raise ValueError("tracks and length must be >= 1")
    pc, pd = geometry.raster
    py, px = geometry.pixel_size
    if tessellation == "grid":
        if geometry.grains_per_bit != 1:
            raise ValueError("grid tessellation requires grains_per_bit == 1")
        t, k = np.meshgrid(np.arange(tracks), np.arange(length), indexing="ij")
        seeds = np.column_stack([((t + 0.5) * geometry.track_pitch).ravel(),
                                 ((k + 0.5) * geometry.bit_length).ravel()])
    elif tessellation == "voronoi":
        seeds = _lattice_seeds(geometry, tracks, length, stage_rng(seed, "media.seeds"))
    else:
        raise ValueError(f"unknown tessellation {tessellation!r}")

    n_rows, n_cols = tracks * pc, length * pd
    yy = (np.arange(n_rows) + 0.5) * py
    xx = (np.arange(n_cols) + 0.5) * px
    tree = cKDTree(seeds)
    labels = np.empty((n_rows, n_cols), dtype=np.int32)
    for r0 in range(0, n_rows, 64):
        rows = yy[r0:r0 + 64]
        pts = np.column_stack([np.repeat(rows, n_cols), np.tile(xx, len(rows))])
        labels[r0:r0 + len(rows)] = tree.query(pts)[1].reshape(len(rows), n_cols)

    n = len(seeds)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    ry, rx = np.divmod(np.arange(flat.size), n_cols)
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = np.bincount(flat, weights=(ry + 0.5) * py, minlength=n) / counts
        cx = np.bincount(flat, weights=(rx + 0.5) * px, minlength=n) / counts
    empty = counts == 0
    cy[empty], cx[empty] = seeds[empty, 0], seeds[empty, 1]
    centroid = np.column_stack([cy, cx])
    ot = np.clip((cy // geometry.track_pitch).astype(np.int64), 0, tracks - 1)
    ok = np.clip((cx // geometry.bit_length).astype(np.int64), 0, length - 1)
    owner = ot * length + ok

    # Integrated reader response per grain for each of the nine cells around its owner.
    kernel = geometry.reader_response()
    pt, si = np.divmod(ry, pc)
    pk, sj = np.divmod(rx, pd)
    g_t, g_k = ot[flat], ok[flat]
    weights = np.zeros((n, 9))
    for o, (dt, dk) in enumerate(OFFSETS):
        rel_t = pt - (g_t + dt)
        rel_k = pk - (g_k + dk)
        inside = (np.abs(rel_t) <= 1) & (np.abs(rel_k) <= 1)
        kv = kernel[(rel_t[inside] + 1) * pc + si[inside], (rel_k[inside] + 1) * pd + sj[inside]]
        weights[:, o] = np.bincount(flat[inside], weights=kv, minlength=n)

    return GrainMedium(geometry=geometry, tracks=tracks, length=length, seed=seed,
                       labels=labels, centroid=centroid, area=counts * py * px,
                       owner=owner, weights=weights, magnetization=np.zeros(n))


def _transition_distance(medium: GrainMedium, bits: np.ndarray) -> np.ndarray:
    """Downtrack distance from each grain centroid to the nearest transition on its track."""
    bl = medium.geometry.bit_length
    t, k = np.nonzero(bits[:, :-1] != bits[:, 1:])
    span = (medium.length + 4) * bl
    trans = np.sort(t * span + (k + 1) * bl)
    gt = medium.owner // medium.length
    q = gt * span + medium.centroid[:, 1]
    if trans.size == 0:
        return np.full(medium.n_grains, np.inf)
    idx = np.searchsorted(trans, q)
    best = np.full(medium.n_grains, np.inf)
    for cand in (idx - 1, idx):
        valid = (cand >= 0) & (cand < trans.size)
        c = np.clip(cand, 0, trans.size - 1)
        same = valid & ((trans[c] // span).astype(np.int64) == gt)
        d = np.abs(trans[c] - q)
        best = np.where(same & (d < best), d, best)
    return best


def write_block(medium: GrainMedium, bits: np.ndarray, flip_model: FlipModel = FlipModel(),
                seed: int = 0) -> GrainMedium:
    """Write a ``tracks x length`` block of +/-1 bits; returns the written medium."""
    bits = np.asarray(bits)
    if bits.shape != (medium.tracks, medium.length):
        raise ValueError(f"bits shape {bits.shape} does not match medium "
                         f"({medium.tracks}, {medium.length})")
    if not np.all(np.abs(bits) == 1):
        raise ValueError("bits must be +/-1")
    m = bits.ravel()[medium.owner].astype(np.float64)
    if flip_model.p0 > 0:
        p = flip_model.probability(_transition_distance(medium, bits))
        flips = stage_rng(seed, "media.flip").random(medium.n_grains) < p
        m[flips] = -m[flips]
    return medium.with_magnetization(m)


def read_block(medium: GrainMedium, reader_tracks: Sequence[int] | None = None) -> np.ndarray:
    """Read-back samples ``(len(reader_tracks), length)`` centred on each bit cell."""
    if reader_tracks is None:
        reader_tracks = range(medium.tracks)
    reader_tracks = list(reader_tracks)
    for t in reader_tracks:
        if not 0 <= t < medium.tracks:
            raise ValueError(f"reader track {t} outside medium with {medium.tracks} tracks")
    T, N = medium.tracks, medium.length
    ot, ok = np.divmod(medium.owner, N)
    y = np.zeros(T * N)
    for o, (dt, dk) in enumerate(OFFSETS):
        ut, uk = ot + dt, ok + dk
        ok_ = (ut >= 0) & (ut < T) & (uk >= 0) & (uk < N)
        y += np.bincount(ut[ok_] * N + uk[ok_],
                         weights=medium.magnetization[ok_] * medium.weights[ok_, o],
                         minlength=T * N)
    return y.reshape(T, N)[reader_tracks]


def local_area_influence(medium: GrainMedium, bits: np.ndarray) -> np.ndarray:
    """Noiseless per-neighbour influences ``(tracks, length, 9)`` by direct grain sums.

    Entry ``[t, k, o]`` is the contribution to ``y[t, k]`` of the grains owned by
    the cell at ``OFFSETS[o]`` from ``(t, k)``, with magnetization equal to the
    owning bit.
    """
    T, N = medium.tracks, medium.length
    ot, ok = np.divmod(medium.owner, N)
    m = np.asarray(bits).ravel()[medium.owner]
    out = np.zeros((T * N, 9))
    for o, (dt, dk) in enumerate(OFFSETS):
        # grains owned by (t+dt', k+dk') contribute to U=(t,k) with dt' = -dt
        ut, uk = ot + dt, ok + dk
        ok_ = (ut >= 0) & (ut < T) & (uk >= 0) & (uk < N)
        src = OFFSETS.index((-dt, -dk))
        out[:, src] += np.bincount(ut[ok_] * N + uk[ok_], weights=m[ok_] * medium.weights[ok_, o],
                                   minlength=T * N)
    return out.reshape(T, N, 9)


def random_bits(rng: np.random.Generator, shape) -> np.ndarray:
    return (2 * rng.integers(0, 2, size=shape) - 1).astype(np.int8)


# ---------------------------------------------------------------------------
# Designed training patterns


@dataclass(frozen=True)
class TrainingLayout:
    repeats: int
    guard: int = 1

    @property
    def lead(self) -> int:
        return 2 * self.guard

    @property
    def period(self) -> int:
        return 3 + self.guard

    @property
    def length(self) -> int:
        return self.lead + self.repeats * self.period + self.guard

    def centre_columns(self) -> np.ndarray:
        """Downtrack index of the pattern centre in each repetition."""
        return self.lead + self.period * np.arange(self.repeats) + 1


def pattern_bits(pattern: int) -> np.ndarray:
    """3x3 +/-1 block for a pattern index; bit ``3*r + c`` of the index is cell (r, c)."""
    if not 0 <= pattern < 512:
        raise ValueError("pattern index must be in [0, 512)")
    b = (pattern >> np.arange(9)) & 1
    return (2 * b - 1).reshape(3, 3).astype(np.int8)


@dataclass
class TrainingFile:
    pattern: int
    read: int
    bits: np.ndarray      # written tracks x length
    samples: np.ndarray   # reader tracks x length


def training_block(layout: TrainingLayout, pattern: int, guard_bits: np.ndarray) -> np.ndarray:
    """Written bits for one pattern: random outer tracks and guards, pattern on tracks 1-3."""
    bits = guard_bits.copy()
    p = pattern_bits(pattern)
    for c in layout.centre_columns():
        bits[1:4, c - 1:c + 2] = p
    return bits


def emit_training_files(geometry: MediaGeometry, repeats: int, guard: int = 1,
                        reads_per_file: int = 10, seed: int = 0,
                        flip_model: FlipModel = FlipModel(),
                        patterns: Sequence[int] | None = None) -> Iterator[TrainingFile]:
    """Yield one :class:`TrainingFile` per (pattern, read).

    All files are written on one tessellation at the same location.  The outer
    written tracks 0 and 4 and the guard columns hold random bits that are shared
    by every pattern, so a pattern and its flipped twin differ only in the flipped
    cells.  Each read redraws the grain flips.
    """
    if repeats < 1 or guard < 1 or reads_per_file < 1:
        raise ValueError("repeats, guard and reads_per_file must be >= 1")
    layout = TrainingLayout(repeats, guard)
    medium = generate_medium(geometry, 5, layout.length, seed)
    guard_bits = random_bits(stage_rng(seed, "training.guard"), (5, layout.length))
    for p in (range(512) if patterns is None else patterns):
        bits = training_block(layout, p, guard_bits)
        for r in range(reads_per_file):
            written = write_block(medium, bits, flip_model, seed=_file_seed(seed, p, r))
            yield TrainingFile(p, r, bits, read_block(written, [1, 2, 3]))


def _file_seed(seed: int, pattern: int, read: int) -> int:
    return int(stage_rng(seed, "training.read", pattern, read).integers(2**31))


_HEADER = struct.Struct("<4sHHHIII")


def training_filename(pattern: int, read: int) -> str:
    return f"pat{pattern:03d}_read{read}.tdmr"


def save_training_file(path: str | Path, tf: TrainingFile) -> None:
    samples = np.ascontiguousarray(tf.samples, dtype="<f8")
    bits = np.ascontiguousarray(tf.bits, dtype="i1")
    if samples.shape[1] != bits.shape[1]:
        raise ValueError("samples and bits must share the downtrack length")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"TDMR", 1, tf.pattern, tf.read, bits.shape[0],
                             samples.shape[0], samples.shape[1]))
        f.write(samples.tobytes())
        f.write(bits.tobytes())


def load_training_file(path: str | Path) -> TrainingFile:
    raw = Path(path).read_bytes()
    magic, version, pattern, read, wt, rt, n = _HEADER.unpack_from(raw)
    if magic != b"TDMR" or version != 1:
        raise ValueError(f"{path}: not a version-1 TDMR training file")
    off = _HEADER.size
    samples = np.frombuffer(raw, "<f8", rt * n, off).reshape(rt, n).astype(np.float64)
    off += 8 * rt * n
    bits = np.frombuffer(raw, "i1", wt * n, off).reshape(wt, n).copy()
    return TrainingFile(pattern, read, bits, samples)


def write_training_set(directory: str | Path, files: Iterator[TrainingFile]) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = 0
    for tf in files:
        save_training_file(directory / training_filename(tf.pattern, tf.read), tf)
        count += 1
    return count


def load_training_set(directory: str | Path) -> Iterator[TrainingFile]:
    for path in sorted(Path(directory).glob("pat*_read*.tdmr")):
        yield load_training_file(path)


def raw_ber(medium: GrainMedium, bits: np.ndarray, reader_tracks: Sequence[int],
            flip_model: FlipModel, seed: int) -> float:
    y = read_block(write_block(medium, bits, flip_model, seed), reader_tracks)
    return float(np.mean(np.where(y >= 0, 1, -1) != bits[list(reader_tracks)]))


def calibrate_flip_model(geometry: MediaGeometry, target_ber: float = 0.185, p0: float = 0.5,
                         length: int = 41207, seed: int = 0, iters: int = 30) -> FlipModel:
    """Bisect the decay length so thresholded raw BER on the middle three of five
    written tracks matches ``target_ber``.  Uses common random numbers throughout."""
    medium = generate_medium(geometry, 5, length, seed)
    bits = random_bits(stage_rng(seed, "calibrate.bits"), (5, length))
    lo, hi = 0.05 * geometry.bit_length, 10 * geometry.bit_length
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if raw_ber(medium, bits, [1, 2, 3], FlipModel(p0, mid), seed) < target_ber:
            lo = mid
        else:
            hi = mid
    return FlipModel(p0, math.sqrt(lo * hi))


def save_medium(path: str | Path, medium: GrainMedium) -> None:
    np.savez_compressed(path, geometry=json.dumps(asdict(medium.geometry)),
                        dims=np.array([medium.tracks, medium.length, medium.seed]),
                        labels=medium.labels, centroid=medium.centroid, area=medium.area,
                        owner=medium.owner, weights=medium.weights, magnetization=medium.magnetization)


def load_medium(path: str | Path) -> GrainMedium:
    with np.load(path) as z:
        g = json.loads(str(z["geometry"]))
        geometry = MediaGeometry(**{**g, "raster": tuple(g["raster"])})
        tracks, length, seed = (int(v) for v in z["dims"])
        return GrainMedium(geometry, tracks, length, seed, z["labels"], z["centroid"], z["area"],
                           z["owner"], z["weights"], z["magnetization"])
