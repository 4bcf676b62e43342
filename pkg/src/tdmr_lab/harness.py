"""Offline training, Monte-Carlo experiments, metrics and result files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import binomtest

from . import laip
from .equalize import (H1D, TargetMask, apply_equalizer, apply_two_track, design_mmse,
                       design_two_track, pr_target)
from .media import (FlipModel, MediaGeometry, TrainingLayout, emit_training_files,
                    generate_medium, random_bits, read_block, write_block)
from .pdnp import train_pdnp1d, train_pdnp2d
from .pipeline import Detectors, PipelineConfig, make_strip, run
from .quantize import symmetric_lloyd_max
from .seeding import stage_int, stage_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics


def ber_estimate(errors: int, total: int) -> float:
    """``errors / total``, or the 95% upper bound ``3 / total`` when no errors were seen."""
    if total <= 0:
        raise ValueError("total must be positive")
    if errors < 0 or errors > total:
        raise ValueError("error count out of range")
    return 3.0 / total if errors == 0 else errors / total


def user_bits_per_grain(rate: float, grains_per_bit: float) -> float:
    return rate / grains_per_bit


def report_value(x: float, places: int = 4) -> str:
    """Table display: round half-up to ``places + 1`` decimals, then to ``places``."""
    d = Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places - 1), ROUND_HALF_UP)
    return str(d.quantize(Decimal(1).scaleb(-places), ROUND_HALF_UP))


def sign_test(better: Sequence[float], worse: Sequence[float]) -> tuple[int, int, float]:
    """One-sided paired sign test that ``better`` is smaller; ties are dropped.

    Returns (wins, untied pairs, p-value).
    """
    a = np.asarray(better, dtype=np.float64)
    b = np.asarray(worse, dtype=np.float64)
    wins = int(np.sum(a < b))
    n = int(np.sum(a != b))
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingProfile:
    """How much data the offline stages see."""

    repeats: int = 500
    reads_per_file: int = 3
    design_length: int = 20000
    design_reads: int = 4
    ntaps: int = 15
    nc: int = 11
    pdnp1d: tuple = (4, 6, 1, 2)      # L, M, delta, I
    pdnp2d: tuple = (1, 1, 1)         # Np, I, J
    train_pdnp: bool = True

    @classmethod
    def full(cls):
        return cls(repeats=10301, reads_per_file=10, design_length=41207, design_reads=40)

    @classmethod
    def tiny(cls):
        return cls(repeats=40, reads_per_file=1, design_length=4000, design_reads=2)


def design_blocks(geometry: MediaGeometry, flip: FlipModel, profile: TrainingProfile, seed: int):
    """Random-data training blocks ``(readings (3, L), written bits (5, L))``."""
    medium = generate_medium(geometry, 5, profile.design_length, stage_int(seed, "design.medium"))
    bits = random_bits(stage_rng(seed, "design.bits"), (5, profile.design_length))
    out = []
    for r in range(profile.design_reads):
        w = write_block(medium, bits, flip, seed=stage_int(seed, "design.write", r))
        out.append((read_block(w, [1, 2, 3]), bits))
    return out


def design_equalizers(blocks, ntaps: int = 15) -> tuple[dict, dict]:
    """FR, 2D-PR and 1D-PR equalizers plus the PR noise levels on design blocks."""
    eqs = {"eq_fr": design_mmse(blocks, TargetMask.fr(), "per-track", ntaps),
           "eq_pr2d": design_mmse(blocks, TargetMask.pr2d(), "3to3", ntaps),
           "eq_pr1d": design_mmse(blocks, TargetMask.pr1d(), "3to1", ntaps)}
    e2, e1 = eqs["eq_pr2d"], eqs["eq_pr1d"]
    z2 = [apply_equalizer(e2, r, b[0], b[4]) - pr_target(b, e2.target.taps) for r, b in blocks]
    z1 = [apply_equalizer(e1, r)[0] - pr_target(b[2:3], H1D)[0] for r, b in blocks]
    sigmas = {"pr2d": np.sqrt(np.mean(np.concatenate([z**2 for z in z2], axis=1), axis=1)),
              "pr1d": np.asarray(np.sqrt(np.mean(np.concatenate(z1) ** 2)))}
    return eqs, sigmas


def equalized_files(files, eq_fr):
    """Replace training-file readings by their FR-equalized samples."""
    for tf in files:
        tf.samples = apply_equalizer(eq_fr, tf.samples)
        yield tf


def train_quantizers(files, bins: int = laip.Y_BINS, max_files: int = 256) -> list:
    """Per-track symmetric Lloyd-Max quantizers on (a stride subset of) equalized files."""
    files = list(files)
    stride = max(1, len(files) // max_files)
    return [symmetric_lloyd_max(np.concatenate([f.samples[t] for f in files[::stride]]), bins)
            for t in range(3)]


def train_laip(files, quantizers, layout: TrainingLayout, **kw) -> dict:
    stats = laip.collect_training(files, quantizers, None, layout.centre_columns())
    return laip.train_tables(stats, **kw)


def train_pdnp(blocks, profile: TrainingProfile):
    """Front ends and models for the 1D-PDNP (reader 1) and 2D-PDNP (readers 0, 1) baselines."""
    single = [(r[1:2], b[1:4]) for r, b in blocks]
    eq_track = design_mmse(single, TargetMask.pr1d(), "per-track", profile.ntaps)
    L, M, delta, I = profile.pdnp1d
    m1 = train_pdnp1d(np.stack([apply_equalizer(eq_track, r[1:2])[0] for r, _ in blocks]),
                      np.stack([b[2] for _, b in blocks]), L, M, delta, I)
    eq2 = design_two_track([(r[:2], b[1:3]) for r, b in blocks], profile.nc)
    Np, I2, J = profile.pdnp2d
    m2 = train_pdnp2d([apply_two_track(eq2, r[:2]) for r, _ in blocks],
                      [b[1:3] for _, b in blocks], Np, I2, J, profile.nc)
    return eq_track, m1, eq2, m2


def train_detectors(geometry: MediaGeometry = MediaGeometry(), flip: FlipModel = FlipModel(),
                    profile: TrainingProfile = TrainingProfile(), seed: int = 0,
                    training_files=None) -> Detectors:
    """Equalizers, quantizers, LAIP tables, noise levels and PDNP models."""
    t0 = time.time()
    blocks = design_blocks(geometry, flip, profile, seed)
    eqs, sigmas = design_equalizers(blocks, profile.ntaps)
    log.info("equalizers designed (%.1fs)", time.time() - t0)

    layout = TrainingLayout(profile.repeats)
    if training_files is None:
        training_files = emit_training_files(geometry, profile.repeats,
                                             reads_per_file=profile.reads_per_file,
                                             seed=stage_int(seed, "training.files"), flip_model=flip)
    files = list(equalized_files(training_files, eqs["eq_fr"]))
    quantizers = train_quantizers(files)
    tables = train_laip(files, quantizers, layout)
    del files
    log.info("LAIP tables trained (%.1fs)", time.time() - t0)

    det = Detectors(eqs["eq_fr"], eqs["eq_pr2d"], eqs["eq_pr1d"], quantizers, tables,
                    sigmas["pr2d"], float(sigmas["pr1d"]))
    if profile.train_pdnp:
        det.eq_track, det.pdnp1d, det.eq_two_track, det.pdnp2d = train_pdnp(blocks, profile)
        log.info("PDNP models trained (%.1fs)", time.time() - t0)
    return det


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class ExperimentResult:
    errors: dict                  # stage -> [errors, total]
    frames: dict                  # stage -> [frame errors, frames]
    achieved_rate: float
    grains_per_bit: float
    trials: int
    wall_clock: float = field(default=0.0, compare=False)
    config_hash: str = ""
    per_trial: list = field(default_factory=list)   # stage -> BER per trial

    @property
    def user_bits_per_grain(self) -> float:
        return user_bits_per_grain(self.achieved_rate, self.grains_per_bit)

    def ber(self, stage: str) -> float:
        e, n = self.errors[stage]
        return ber_estimate(e, n)

    def fer(self, stage: str) -> float:
        e, n = self.frames[stage]
        return ber_estimate(e, n)

    def stage_series(self, stage: str) -> np.ndarray:
        return np.array([t[stage] for t in self.per_trial])


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha1(json.dumps(config.as_dict(), sort_keys=True, default=str).encode()).hexdigest()[:12]


_WORKER: dict = {}


def _trial(args):
    config, trial, root, geometry, flip, baselines = args
    det = _WORKER["det"]
    strip = make_strip(config, stage_int(root, "trial.strip", trial))
    medium = generate_medium(geometry, 5, strip.written.shape[1], stage_int(root, "trial.medium", trial))
    rec = run(config, det, medium, strip, flip, seed=stage_int(root, "trial.write", trial),
              baselines=baselines)
    return rec


def _init_worker(det):
    _WORKER["det"] = det


def threads() -> int:
    return max(1, int(os.environ.get("TDMR_LAB_THREADS", "1")))


def run_experiment(config: PipelineConfig, det: Detectors, trials: int, root_seed: int = 0,
                   geometry: MediaGeometry = MediaGeometry(), flip: FlipModel = FlipModel(),
                   baselines: Sequence[str] = (), workers: int | None = None) -> ExperimentResult:
    """Run ``trials`` independent strips (fresh medium, data and flips per trial)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    t0 = time.time()
    workers = threads() if workers is None else workers
    args = [(config, i, root_seed, geometry, flip, tuple(baselines)) for i in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(det,)) as ex:
            records = list(ex.map(_trial, args))
    else:
        _init_worker(det)
        records = []
        for a in args:
            try:
                records.append(_trial(a))
            except Exception as exc:
                raise RuntimeError(f"trial {a[1]} failed: {exc}") from exc
    errors: dict = {}
    frames: dict = {}
    for rec in records:
        for k, (e, n) in rec.errors.items():
            acc = errors.setdefault(k, [0, 0])
            acc[0] += e
            acc[1] += n
        for k, (e, n) in rec.fer.items():
            acc = frames.setdefault(k, [0, 0])
            acc[0] += e
            acc[1] += n
    return ExperimentResult(errors, frames, config.code().achieved_rate,
                            geometry.grains_per_bit, trials, time.time() - t0, config_hash(config),
                            [dict(r.ber) for r in records])


def rate_search(config: PipelineConfig, det: Detectors, rates: Sequence[float], trials: int,
                target_ber: float = 1e-5, root_seed: int = 0, **kw) -> tuple[float | None, list]:
    """Largest grid rate whose final BER bound is at most ``target_ber``.

    The bound is ``3/N`` at zero errors, so the grid rate must see enough bits to
    certify the target.  Returns ``(rate or None, [(rate, BER), ...])``.
    """
    rates = list(rates)
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError("rate grid must be increasing")
    curve = []
    best = None
    for r in rates:
        cfg = PipelineConfig(**{**config.as_dict(), "rate": r})
        res = run_experiment(cfg, det, trials, root_seed, **kw)
        ber = res.ber("final")
        curve.append((cfg.code().achieved_rate, ber))
        if ber <= target_ber:
            best = cfg.code().achieved_rate
    if best is None:
        log.warning("no grid rate reached BER %.1e; best %.3e", target_ber, min(b for _, b in curve))
    return best, curve


def compare_detectors(config: PipelineConfig, det: Detectors, trials: int, root_seed: int = 0,
                      **kw) -> dict:
    """Paired detector-only BERs per track for LAIP/BCJR and the PDNP baselines."""
    res = run_experiment(config, det, trials, root_seed, baselines=("no-apriori", "pdnp2d", "pdnp1d"), **kw)
    table = {}
    for name in ("bcjr_t0", "bcjr_t1", "pdnp2d_t0", "pdnp2d_t1", "bcjr_noapriori_t0",
                 "bcjr_noapriori_t1", "laip_t0", "laip_t1", "pdnp1d_detector"):
        if name in res.errors:
            table[name] = res.ber(name)
    for t in (0, 1):
        if f"bcjr_t{t}" in table and f"pdnp2d_t{t}" in table:
            table[f"ratio_t{t}"] = table[f"bcjr_t{t}"] / table[f"pdnp2d_t{t}"]
    return {"table": table, "result": res}


# ---------------------------------------------------------------------------
# Configuration


def parse_value(name: str, text: str):
    """Convert a config value to the type of the matching PipelineConfig field."""
    default = getattr(PipelineConfig(), name, None)
    if default is None and name not in CONFIG_KEYS:
        raise KeyError(f"unknown config key {name!r}; known keys: {', '.join(CONFIG_KEYS)}")
    text = text.strip()
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


CONFIG_KEYS = tuple(PipelineConfig().as_dict())


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; tuples are comma separated."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = parse_value(k.replace("-", "_"), v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    kw = parse_config(Path(path).read_text()) if path else {}
    kw.update(overrides or {})
    return PipelineConfig(**kw)


def format_config(config: PipelineConfig) -> str:
    lines = []
    for k, v in config.as_dict().items():
        lines.append(f"{k} = {','.join(repr(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Persistence


def write_results(directory: str | Path, result: ExperimentResult, config: PipelineConfig,
                  curve: Iterable[tuple[float, float]] | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "stage", "ber"])
        for i, t in enumerate(result.per_trial):
            for stage, ber in sorted(t.items()):
                w.writerow([i, stage, f"{ber:.6e}"])
    summary = {
        "config": config.as_dict(),
        "config_hash": result.config_hash,
        "trials": result.trials,
        "achieved_rate": result.achieved_rate,
        "grains_per_bit": result.grains_per_bit,
        "user_bits_per_grain": result.user_bits_per_grain,
        "wall_clock_s": result.wall_clock,
        "ber": {k: result.ber(k) for k in result.errors},
        "errors": result.errors,
        "fer": {k: result.fer(k) for k in result.frames},
    }
    (d / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    if curve is not None:
        with open(d / "ber_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rate", "ber"])
            for r, b in curve:
                w.writerow([f"{r:.6f}", f"{b:.6e}"])


def write_curve(directory: str | Path, curve, best: float | None, grains_per_bit: float,
                config: PipelineConfig) -> None:
    """Rate-search output: ``ber_curve.csv`` and a ``summary.json`` with the chosen rate."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "ber_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate", "ber"])
        for r, b in curve:
            w.writerow([f"{r:.6f}", f"{b:.6e}"])
    summary = {"config": config.as_dict(), "config_hash": config_hash(config), "rate": best,
               "user_bits_per_grain": None if best is None else user_bits_per_grain(best, grains_per_bit)}
    (d / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
