"""Single-file archive for everything trained offline.

Layout (little-endian)::

    b"LAIP"  u16 version  u32 header-length  header JSON (geometry echo, counts)
    then one record per item:
    tag[4]  u32 meta-length  meta JSON  u16 n-arrays  arrays...
    array:  u8 dtype-length  dtype str  u8 ndim  u64 shape[ndim]  raw bytes

Record tags: ``QUNT`` quantizer, ``LTAB`` LAIP table, ``EQLZ`` equalizer,
``EQ2T`` two-track taps, ``SIGM`` noise level, ``PD1D`` / ``PD2D`` PDNP models.
Arrays are stored with their exact dtype and bytes, so a load/save cycle
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .equalize import EqualizerSpec, TargetMask
from .laip import PmfTable
from .media import MediaGeometry
from .pdnp import Pdnp1dModel, Pdnp2dModel
from .quantize import QuantizerSpec

MAGIC = b"LAIP"
VERSION = 1
EQUALIZERS = ("eq_fr", "eq_pr2d", "eq_pr1d", "eq_track")


@dataclass
class Archive:
    """Trained artefacts; every part is optional so stages can fill it in turn."""

    geometry: MediaGeometry | None = None
    quantizers: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)        # (group, variant) -> PmfTable
    equalizers: dict = field(default_factory=dict)    # name -> EqualizerSpec
    eq_two_track: np.ndarray | None = None
    sigmas: dict = field(default_factory=dict)        # name -> array
    pdnp1d: Pdnp1dModel | None = None
    pdnp2d: Pdnp2dModel | None = None

    def to_detectors(self):
        from .pipeline import Detectors
        missing = [n for n in ("eq_fr", "eq_pr2d", "eq_pr1d") if n not in self.equalizers]
        if missing or not self.quantizers or not self.tables or not {"pr2d", "pr1d"} <= set(self.sigmas):
            raise ValueError(f"archive is incomplete for a pipeline run (missing {missing or 'tables/sigmas'})")
        e = self.equalizers
        return Detectors(e["eq_fr"], e["eq_pr2d"], e["eq_pr1d"], list(self.quantizers), dict(self.tables),
                         np.asarray(self.sigmas["pr2d"]), float(np.ravel(self.sigmas["pr1d"])[0]),
                         e.get("eq_track"), self.pdnp1d, self.eq_two_track, self.pdnp2d)

    @classmethod
    def from_detectors(cls, det, geometry: MediaGeometry | None = None) -> "Archive":
        eqs = {n: getattr(det, n) for n in EQUALIZERS if getattr(det, n) is not None}
        return cls(geometry, list(det.quantizers), dict(det.tables), eqs, det.eq_two_track,
                   {"pr2d": np.asarray(det.sigma_pr2d, dtype=np.float64),
                    "pr1d": np.asarray(det.sigma_pr1d, dtype=np.float64)},
                   det.pdnp1d, det.pdnp2d)


# ---------------------------------------------------------------------------
# Low-level records


def _write_array(f: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    a = np.ascontiguousarray(a, dtype=dt)
    name = a.dtype.str.encode()
    f.write(struct.pack("<B", len(name)) + name)
    f.write(struct.pack("<B", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes())


def _read_array(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<B", buf, off)
    off += 1
    dt = np.dtype(bytes(buf[off:off + n]).decode())
    off += n
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dt, count, off).reshape(shape).copy()
    return a, off + count * dt.itemsize


def _write_record(f: BinaryIO, tag: bytes, meta: dict, arrays: list) -> None:
    m = json.dumps(meta, sort_keys=True).encode()
    f.write(tag + struct.pack("<I", len(m)) + m + struct.pack("<H", len(arrays)))
    for a in arrays:
        _write_array(f, a)


def _read_record(buf: memoryview, off: int):
    tag = bytes(buf[off:off + 4])
    (n,) = struct.unpack_from("<I", buf, off + 4)
    off += 8
    meta = json.loads(bytes(buf[off:off + n]))
    off += n
    (na,) = struct.unpack_from("<H", buf, off)
    off += 2
    arrays = []
    for _ in range(na):
        a, off = _read_array(buf, off)
        arrays.append(a)
    return tag, meta, arrays, off


# ---------------------------------------------------------------------------
# Save / load


def save_archive(path: str | Path, arc: Archive) -> None:
    header = {
        "geometry": None if arc.geometry is None else asdict(arc.geometry),
        "quantizers": len(arc.quantizers),
        "tables": len(arc.tables),
        "equalizers": sorted(arc.equalizers),
        "pdnp": [n for n in ("pdnp1d", "pdnp2d") if getattr(arc, n) is not None],
    }
    h = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(h)) + h)
        for t, q in enumerate(arc.quantizers):
            _write_record(f, b"QUNT", {"track": t, "bins": q.bins},
                          [q.bin_boundaries, q.reproduction_levels, np.asarray(q.mse_history, dtype=np.float64)])
        for (g, v), tab in sorted(arc.tables.items()):
            meta = {"group": g, "variant": v, "axes": tab.y_labels, "bits": tab.bit_labels,
                    "rows": len(tab.keys), "entries": int(len(tab.prob))}
            _write_record(f, b"LTAB", meta, [tab.keys, tab.indptr, tab.alpha, tab.prob])
        for name, eq in sorted(arc.equalizers.items()):
            meta = {"name": name, "kind": eq.target.kind, "io_shape": eq.io_shape,
                    "mse": eq.mse, "condition": eq.condition}
            _write_record(f, b"EQLZ", meta, [eq.taps, np.asarray(eq.target.taps)])
        if arc.eq_two_track is not None:
            _write_record(f, b"EQ2T", {}, [arc.eq_two_track])
        for name, s in sorted(arc.sigmas.items()):
            _write_record(f, b"SIGM", {"name": name}, [np.asarray(s)])
        if arc.pdnp1d is not None:
            m = arc.pdnp1d
            _write_record(f, b"PD1D", {"L": m.L, "M": m.M, "delta": m.delta, "I": m.I, "patterns": m.patterns},
                          [m.mask, m.coeffs, m.sigma, m.counts])
        if arc.pdnp2d is not None:
            m = arc.pdnp2d
            _write_record(f, b"PD2D", {"Np": m.Np, "I": m.I, "J": m.J, "Nc": m.Nc, "patterns": m.patterns},
                          [m.targets, m.P, m.lam, m.counts])


def load_archive(path: str | Path) -> Archive:
    raw = Path(path).read_bytes()
    buf = memoryview(raw)
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a LAIP archive")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    off = 10
    header = json.loads(bytes(buf[off:off + hlen]))
    off += hlen
    g = header["geometry"]
    arc = Archive(None if g is None else MediaGeometry(**{**g, "raster": tuple(g["raster"])}))
    quant = {}
    while off < len(raw):
        tag, meta, a, off = _read_record(buf, off)
        if tag == b"QUNT":
            quant[meta["track"]] = QuantizerSpec(a[0], a[1], tuple(a[2].tolist()))
        elif tag == b"LTAB":
            arc.tables[(meta["group"], meta["variant"])] = PmfTable(meta["group"], meta["variant"], *a)
        elif tag == b"EQLZ":
            arc.equalizers[meta["name"]] = EqualizerSpec(a[0], TargetMask(a[1], meta["kind"]), meta["io_shape"],
                                                         meta["mse"], meta["condition"])
        elif tag == b"EQ2T":
            arc.eq_two_track = a[0]
        elif tag == b"SIGM":
            arc.sigmas[meta["name"]] = a[0]
        elif tag == b"PD1D":
            arc.pdnp1d = Pdnp1dModel(meta["L"], meta["M"], meta["delta"], meta["I"], *a)
        elif tag == b"PD2D":
            arc.pdnp2d = Pdnp2dModel(meta["Np"], meta["I"], meta["J"], meta["Nc"], *a)
        else:
            raise ValueError(f"{path}: unknown record {tag!r}")
    arc.quantizers = [quant[t] for t in sorted(quant)]
    return arc


def describe(arc: Archive) -> str:
    """Human-readable summary used by ``inspect-lut``."""
    lines = []
    if arc.geometry is not None:
        lines.append(f"geometry: {asdict(arc.geometry)}")
    for t, q in enumerate(arc.quantizers):
        lines.append(f"quantizer t{t}: {q.bins} bins, levels [{q.reproduction_levels[0]:.4f} .. "
                     f"{q.reproduction_levels[-1]:.4f}]")
    for (g, v), tab in sorted(arc.tables.items()):
        sums = np.add.reduceat(tab.prob, tab.indptr[:-1]) if len(tab.keys) else np.zeros(0)
        err = float(np.max(np.abs(sums - 1))) if len(sums) else 0.0
        lines.append(f"table {g:3s} {v:6s} axes={tab.y_labels:4s} bits={tab.bit_labels or '-':4s} "
                     f"rows={len(tab.keys):7d} entries={len(tab.prob):8d} max|sum-1|={err:.1e}")
    for name, eq in sorted(arc.equalizers.items()):
        lines.append(f"equalizer {name}: {eq.target.kind} {eq.io_shape} taps {eq.taps.shape} mse={eq.mse:.4g}")
    if arc.eq_two_track is not None:
        lines.append(f"two-track equalizer taps {arc.eq_two_track.shape}")
    for name, s in sorted(arc.sigmas.items()):
        lines.append(f"sigma {name}: {np.round(np.atleast_1d(s), 4).tolist()}")
    if arc.pdnp1d is not None:
        m = arc.pdnp1d
        lines.append(f"1D-PDNP L={m.L} M={m.M} delta={m.delta} I={m.I}: {m.patterns} patterns, {m.states} states")
    if arc.pdnp2d is not None:
        m = arc.pdnp2d
        lines.append(f"2D-PDNP Np={m.Np} I={m.I} J={m.J}: {m.patterns} patterns, {m.states} states")
    return "\n".join(lines)
