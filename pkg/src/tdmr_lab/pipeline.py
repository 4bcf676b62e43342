"""End-to-end detection flow on one written strip.

Path 1: per-track FR equalizer -> LAIP (self-loops) -> clip, weight ->
deinterleave -> IRA decoder 1.  Its coded-bit LLRs are re-interleaved and become
the a-priori input of path 2: 2D (three-track) or 1D (centre-track) PR
equalizer -> BCJR -> weight -> deinterleave -> IRA decoder 2.

Strip layout: five written tracks.  Tracks 1-3 carry coded data and are read;
tracks 0 and 4 are the boundary rows.  ``pad`` known columns sit on each side
of the ``N`` data columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import codec, laip
from .codec import CodeSpec, CosetSpec
from .equalize import H1D, H2D, EqualizerSpec, apply_equalizer, apply_two_track
from .media import FlipModel, GrainMedium, random_bits, read_block, write_block
from .pdnp import Pdnp1dModel, Pdnp2dModel, bcjr_pdnp1d, bcjr_pdnp2d
from .seeding import stage_int, stage_rng
from .trellis import bcjr_pr1d, bcjr_pr2d

log = logging.getLogger(__name__)

BOUNDARY_MODES = ("known", "threshold", "feedback-top")
MODES = ("three-track", "center-track")
BASELINES = ("no-apriori", "pdnp2d", "pdnp1d")


@dataclass
class PipelineConfig:
    mode: str = "three-track"
    w1: tuple = (0.5, 0.75, 0.5)
    w2: tuple = (0.7, 0.7, 0.7)
    clip: float = 10.0
    self_loops: int = 5
    boundary_mode: str = "known"
    rate: float = 0.34         # desk operating point of the surrogate medium
    k: int = 2785              # one codeword of 8192 bits per track
    codewords: int = 1
    code_seed: int = 0
    grouping: int = 2          # mother rate 1/3
    max_iters: int = 50
    pad: int = 2
    pdnp1d_iterations: int = 2

    def __post_init__(self):
        self.w1 = _weights(self.w1)
        self.w2 = _weights(self.w2)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}")
        if self.clip <= 0 or self.self_loops < 1 or self.pad < 2:
            raise ValueError("clip > 0, self_loops >= 1 and pad >= 2 required")

    @classmethod
    def center_track(cls, **kw):
        kw.setdefault("w1", (0.75, 0.75, 0.75))
        kw.setdefault("w2", (0.7, 0.7, 0.7))
        return cls(mode="center-track", **kw)

    def code(self) -> CodeSpec:
        return _code(self.k, self.rate, self.code_seed, self.grouping)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _weights(w) -> tuple:
    w = tuple(float(x) for x in np.broadcast_to(np.asarray(w, dtype=float), (3,)))
    if any(not 0 < x <= 1 for x in w):
        raise ValueError("weights must lie in (0, 1]")
    return w


_CODES: dict = {}


def _code(k, rate, seed, grouping) -> CodeSpec:
    key = (k, rate, seed, grouping)
    if key not in _CODES:
        _CODES[key] = CodeSpec(k, rate, seed, grouping=grouping)
    return _CODES[key]


@dataclass
class Detectors:
    """Everything trained offline that a run needs."""

    eq_fr: EqualizerSpec
    eq_pr2d: EqualizerSpec
    eq_pr1d: EqualizerSpec
    quantizers: list
    tables: dict
    sigma_pr2d: np.ndarray
    sigma_pr1d: float
    eq_track: EqualizerSpec | None = None       # 1D-PDNP front end (single reader)
    pdnp1d: Pdnp1dModel | None = None
    eq_two_track: np.ndarray | None = None      # (2, 2, Nc) taps for the 2D-PDNP
    pdnp2d: Pdnp2dModel | None = None


@dataclass
class StageRecord:
    ber: dict = field(default_factory=dict)         # stage -> BER
    errors: dict = field(default_factory=dict)      # stage -> (errors, total)
    fer: dict = field(default_factory=dict)         # stage -> (frame errors, frames)
    llrs: dict = field(default_factory=dict)        # stage -> array
    decoder_calls: dict = field(default_factory=dict)
    decoder1_input_max: float = 0.0
    converged: dict = field(default_factory=dict)

    def score(self, name, decided, truth):
        e = int(np.count_nonzero(np.asarray(decided) != np.asarray(truth)))
        n = int(np.size(truth))
        self.errors[name] = (e, n)
        self.ber[name] = e / n


@dataclass
class Strip:
    """Written bits and everything needed to score a run."""

    written: np.ndarray       # (5, N + 2 pad) +/-1
    info: np.ndarray          # (3, codewords, k) 0/1
    coset: CosetSpec
    code: CodeSpec
    pad: int

    @property
    def N(self) -> int:
        return self.written.shape[1] - 2 * self.pad

    @property
    def interior(self) -> slice:
        return slice(self.pad, self.pad + self.N)


def make_strip(config: PipelineConfig, seed: int) -> Strip:
    """Encode random information on three tracks and lay out the strip."""
    spec = config.code()
    N = config.codewords * spec.n_tx
    rng = stage_rng(seed, "pipeline.info")
    info = rng.integers(0, 2, (3, config.codewords, spec.k))
    coded = codec.puncture(spec, codec.encode(spec, info)).reshape(3, N)
    coset = CosetSpec(stage_int(seed, "pipeline.coset"), 3, N)
    cos_bits = np.stack([coset.coset(t) for t in range(3)])
    rows = codec.interleave(coset, coded ^ cos_bits)
    written = random_bits(stage_rng(seed, "pipeline.frame"), (5, N + 2 * config.pad))
    written[1:4, config.pad:config.pad + N] = 2 * rows - 1
    return Strip(written, info, coset, spec, config.pad)


def apply_boundary_mode(mode: str, boundary_reads: np.ndarray | None, known: np.ndarray | None,
                        previous_top: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Top and bottom boundary-row bit estimates.

    ``boundary_reads`` are raw readings over written tracks 0 and 4; ``known``
    the true rows ``(2, W)``.  ``feedback-top`` takes the previous strip's
    decided row for the top (the known row when there is none) and thresholds
    the bottom.
    """
    if mode == "known":
        if known is None:
            raise ValueError("known boundary mode needs the true rows")
        return np.asarray(known[0], float), np.asarray(known[1], float)
    if boundary_reads is None:
        raise ValueError(f"{mode} boundary mode needs boundary readings")
    thr = np.where(np.asarray(boundary_reads) >= 0, 1.0, -1.0)
    if mode == "threshold":
        return thr[0], thr[1]
    if mode == "feedback-top":
        if previous_top is None:
            if known is None:
                raise ValueError("first strip in feedback mode needs the known top row")
            previous_top = known[0]
        return np.asarray(previous_top, float), thr[1]
    raise ValueError(f"unknown boundary mode {mode!r}")


def _to_codewords(strip: Strip, llrs: np.ndarray, tracks) -> np.ndarray:
    d = codec.deinterleave(strip.coset, llrs)
    return d[list(tracks)].reshape(len(tracks) * (strip.N // strip.code.n_tx), strip.code.n_tx)


def _cosets(strip: Strip, tracks) -> np.ndarray:
    return np.concatenate([strip.coset.coset(t).reshape(-1, strip.code.n_tx) for t in tracks])


def _decode(strip: Strip, llrs: np.ndarray, tracks, w: np.ndarray, clip, config, record: StageRecord,
            name: str):
    """One batched decoder invocation over every codeword of the given tracks."""
    x = _to_codewords(strip, llrs, tracks)
    if clip is not None:
        x = np.clip(x, -clip, clip)
    cw = strip.N // strip.code.n_tx
    wrow = np.repeat(np.asarray(w)[list(tracks)], cw)[:, None]
    x = wrow * x
    if name == "decoder1":
        record.decoder1_input_max = float(np.max(np.abs(x) / wrow))
    res = codec.decode(strip.code, _cosets(strip, tracks), x, w=1.0, clip=None,
                       max_iters=config.max_iters)
    record.decoder_calls[name] = record.decoder_calls.get(name, 0) + 1
    info = strip.info[list(tracks)].reshape(-1, strip.code.k)
    hard = (res.info_llrs > 0).astype(np.int64)
    record.score(name, hard, info)
    record.fer[name] = (int(np.any(hard != info, axis=1).sum()), hard.shape[0])
    record.converged[name] = float(np.mean(res.converged))
    # coded LLRs back in written (interleaved) order
    coded = np.zeros((3, strip.N))
    coded[list(tracks)] = res.coded_llrs.reshape(len(tracks), strip.N)
    return codec.interleave(strip.coset, coded), res


def run(config: PipelineConfig, det: Detectors, medium: GrainMedium, strip: Strip,
        flip_model: FlipModel = FlipModel(), seed: int = 0, previous_top=None,
        baselines=(), keep_llrs: bool = False) -> StageRecord:
    """Write ``strip`` on ``medium``, read it back and run every stage."""
    if medium.tracks != 5 or medium.length != strip.written.shape[1]:
        raise ValueError("medium does not match the strip layout")
    rec = StageRecord()
    P, N, inner = strip.pad, strip.N, strip.interior
    written = write_block(medium, strip.written, flip_model, seed=stage_int(seed, "pipeline.write"))
    raw = read_block(written, [1, 2, 3])
    bnd_reads = read_block(written, [0, 4])
    top, bottom = apply_boundary_mode(config.boundary_mode, bnd_reads, strip.written[[0, 4]],
                                      previous_top)
    truth = strip.written[1:4, inner]
    tracks = (0, 1, 2) if config.mode == "three-track" else (1,)
    centre = config.mode == "center-track"
    rec.score("raw", np.where(raw[:, inner] >= 0, 1, -1)[list(tracks)], truth[list(tracks)])
    rec.score("boundary", np.stack([top, bottom]), strip.written[[0, 4]])

    # path 1
    y1 = apply_equalizer(det.eq_fr, raw)[:, inner]
    frame = strip.written[:, P - 1:P + N + 1].astype(np.float64).copy()
    frame[0], frame[4] = top[P - 1:P + N + 1], bottom[P - 1:P + N + 1]
    l_laip = laip.detect(y1, det.tables, det.quantizers, frame, self_loops=config.self_loops)
    rec.score("laip", np.where(l_laip >= 0, 1, -1)[list(tracks)], truth[list(tracks)])
    apriori, _ = _decode(strip, l_laip, tracks, config.w1, config.clip, config, rec, "decoder1")

    # path 2
    if centre:
        z = apply_equalizer(det.eq_pr1d, raw)[0, inner]
        l_bcjr = np.zeros((3, N))
        l_bcjr[1] = bcjr_pr1d(z, H1D, det.sigma_pr1d, apriori[1], pre=strip.written[2, P - 2:P],
                              post=strip.written[2, P + N:P + N + 1])
    else:
        z = apply_equalizer(det.eq_pr2d, raw, top, bottom)[:, inner]
        l_bcjr = bcjr_pr2d(z, H2D, det.sigma_pr2d, top[P - 1:P + N + 1], bottom[P - 1:P + N + 1],
                           apriori, pre=strip.written[1:4, P - 2:P],
                           post=strip.written[1:4, P + N:P + N + 1])
    rec.score("bcjr", np.where(l_bcjr >= 0, 1, -1)[list(tracks)], truth[list(tracks)])
    _decode(strip, l_bcjr, tracks, config.w2, None, config, rec, "decoder2")
    rec.ber["final"] = rec.ber["decoder2"]
    rec.errors["final"] = rec.errors["decoder2"]
    rec.fer["final"] = rec.fer["decoder2"]
    if keep_llrs:
        rec.llrs.update(laip=l_laip, apriori=apriori, bcjr=l_bcjr)
    # per-track detector BERs for reporting
    for name, l in (("laip", l_laip), ("bcjr", l_bcjr)):
        for t in tracks:
            rec.score(f"{name}_t{t}", np.where(l[t] >= 0, 1, -1), truth[t])

    # paired baselines on the same readback
    if "no-apriori" in baselines:
        if centre:
            lb = bcjr_pr1d(z, H1D, det.sigma_pr1d, None, pre=strip.written[2, P - 2:P],
                           post=strip.written[2, P + N:P + N + 1])
            rec.score("bcjr_noapriori", np.where(lb >= 0, 1, -1), truth[1])
        else:
            lb = bcjr_pr2d(z, H2D, det.sigma_pr2d, top[P - 1:P + N + 1], bottom[P - 1:P + N + 1],
                           None, pre=strip.written[1:4, P - 2:P],
                           post=strip.written[1:4, P + N:P + N + 1])
            rec.score("bcjr_noapriori", np.where(lb >= 0, 1, -1), truth)
            for t in tracks:
                rec.score(f"bcjr_noapriori_t{t}", np.where(lb[t] >= 0, 1, -1), truth[t])
    if "pdnp2d" in baselines:
        if det.pdnp2d is None:
            raise ValueError("2D-PDNP baseline requested but no model trained")
        y2 = apply_two_track(det.eq_two_track, raw[:2])[:, inner]
        post = strip.written[1:3, P + N:P + N + det.pdnp2d.I]
        l2 = bcjr_pdnp2d(y2, det.pdnp2d, None, pre=_pre(strip.written[1:3], P, det.pdnp2d.memory),
                         post=post)
        for t in range(2):
            rec.score(f"pdnp2d_t{t}", np.where(l2[t] >= 0, 1, -1), truth[t])
    if "pdnp1d" in baselines:
        if det.pdnp1d is None:
            raise ValueError("1D-PDNP baseline requested but no model trained")
        m = det.pdnp1d
        y = apply_equalizer(det.eq_track, raw[1:2])[0, inner]
        pre = _pre(strip.written[2:3], P, m.memory)[0]
        post = np.zeros(m.lag + m.delta)
        post[:min(P, len(post))] = strip.written[2, P + N:P + N + min(P, len(post))]
        ap = None
        sub = StageRecord()
        for it in range(config.pdnp1d_iterations):
            lp = bcjr_pdnp1d(y, m, None if ap is None else ap[1], pre=pre, post=post)
            if it == 0:
                rec.score("pdnp1d_detector", np.where(lp >= 0, 1, -1), truth[1])
            full = np.zeros((3, N))
            full[1] = lp
            ap, _ = _decode(strip, full, (1,), (1.0, config.w2[1], 1.0), None, config, sub, "decoder")
        rec.ber["pdnp1d_final"] = sub.ber["decoder"]
        rec.errors["pdnp1d_final"] = sub.errors["decoder"]
        rec.fer["pdnp1d_final"] = sub.fer["decoder"]
    return rec


def _pre(rows: np.ndarray, pad: int, S: int) -> np.ndarray:
    """Known pad columns before the block, right-aligned in an ``S``-column prior (0 = unknown)."""
    out = np.zeros((rows.shape[0], S))
    n = min(S, pad)
    out[:, S - n:] = rows[:, pad - n:pad]
    return out


def search_weights(evaluate, w1_grid, w2_grid) -> tuple[tuple, tuple, float]:
    """Coarse grid search: ``evaluate(w1, w2)`` returns a final BER to minimise."""
    best = (None, None, np.inf)
    for w1 in w1_grid:
        for w2 in w2_grid:
            ber = evaluate(w1, w2)
            if ber < best[2]:
                best = (w1, w2, ber)
    return best
