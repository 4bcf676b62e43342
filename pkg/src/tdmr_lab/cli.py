"""Command-line entry point: ``tdmr-lab <subcommand> ...``.

Each offline stage reads and extends one LUT archive, so stages can be rerun
independently.  Pipeline settings come from a flat ``key = value`` file and
``--key value`` flags, flags winning.  ``TDMR_LAB_THREADS`` caps the worker pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .archive import Archive, describe, load_archive, save_archive
from .media import (FlipModel, MediaGeometry, TrainingLayout, emit_training_files, generate_medium,
                    load_training_set, save_medium, write_training_set)

log = logging.getLogger("tdmr_lab")


def _profile(args) -> harness.TrainingProfile:
    p = {"desk": harness.TrainingProfile, "full": harness.TrainingProfile.full,
         "tiny": harness.TrainingProfile.tiny}[args.profile]()
    for name in ("repeats", "reads_per_file", "design_length", "design_reads", "ntaps", "nc"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(p, name, v)
    return p


def _flip(args) -> FlipModel:
    return FlipModel(args.p0, args.decay)


def _open(path) -> Archive:
    return load_archive(path) if Path(path).exists() else Archive(MediaGeometry())


def _geometry(arc: Archive) -> MediaGeometry:
    return arc.geometry or MediaGeometry()


def _config(args):
    overrides = {}
    for key in harness.CONFIG_KEYS:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            overrides[key] = harness.parse_value(key, v)
    return harness.load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_media(args):
    m = generate_medium(MediaGeometry(), args.tracks, args.length, args.seed)
    save_medium(args.out, m)
    print(f"{args.out}: {m.n_grains} grains, {m.grains_per_bit:.3f} grains/bit")


def cmd_emit_training(args):
    files = emit_training_files(MediaGeometry(), args.repeats, reads_per_file=args.reads_per_file,
                                seed=args.seed, flip_model=_flip(args))
    n = write_training_set(args.out, files)
    print(f"wrote {n} training files to {args.out}")


def cmd_design_eq(args):
    arc = _open(args.archive)
    blocks = harness.design_blocks(_geometry(arc), _flip(args), _profile(args), args.seed)
    eqs, sigmas = harness.design_equalizers(blocks, _profile(args).ntaps)
    arc.equalizers.update(eqs)
    arc.sigmas.update(sigmas)
    save_archive(args.archive, arc)
    for name, eq in eqs.items():
        print(f"{name}: mse {eq.mse:.4f} condition {eq.condition:.3g}")


def _training(args, arc):
    if "eq_fr" not in arc.equalizers:
        raise SystemExit("run design-eq first: the FR equalizer is needed")
    return harness.equalized_files(load_training_set(args.training), arc.equalizers["eq_fr"])


def cmd_train_quantizers(args):
    arc = _open(args.archive)
    arc.quantizers = harness.train_quantizers(_training(args, arc))
    save_archive(args.archive, arc)
    for t, q in enumerate(arc.quantizers):
        print(f"track {t}: {q.bins} bins, final mse {q.mse_history[-1] if q.mse_history else float('nan'):.5f}")


def cmd_train_laip(args):
    arc = _open(args.archive)
    if not arc.quantizers:
        raise SystemExit("run train-quantizers first")
    arc.tables = harness.train_laip(_training(args, arc), arc.quantizers, TrainingLayout(args.repeats),
                                    smooth=not args.no_smooth)
    save_archive(args.archive, arc)
    print(f"{len(arc.tables)} tables, {sum(len(t.prob) for t in arc.tables.values())} entries")


def cmd_train_pdnp(args):
    arc = _open(args.archive)
    prof = _profile(args)
    blocks = harness.design_blocks(_geometry(arc), _flip(args), prof, args.seed)
    eq_track, arc.pdnp1d, arc.eq_two_track, arc.pdnp2d = harness.train_pdnp(blocks, prof)
    arc.equalizers["eq_track"] = eq_track
    save_archive(args.archive, arc)
    print(f"1D-PDNP {arc.pdnp1d.states} states, 2D-PDNP {arc.pdnp2d.states} states")


def cmd_train(args):
    det = harness.train_detectors(MediaGeometry(), _flip(args), _profile(args), args.seed)
    save_archive(args.archive, Archive.from_detectors(det, MediaGeometry()))
    print(f"wrote {args.archive}")


def cmd_run(args):
    arc = load_archive(args.archive)
    cfg = _config(args)
    res = harness.run_experiment(cfg, arc.to_detectors(), args.trials, args.seed, _geometry(arc), _flip(args),
                                 baselines=args.baselines)
    harness.write_results(args.out, res, cfg)
    print(json.dumps({k: res.ber(k) for k in sorted(res.errors)}, indent=1))


def cmd_rate_search(args):
    arc = load_archive(args.archive)
    cfg = _config(args)
    rates = [float(r) for r in args.rates.split(",")]
    best, curve = harness.rate_search(cfg, arc.to_detectors(), rates, args.trials, args.target_ber, args.seed,
                                      geometry=_geometry(arc), flip=_flip(args))
    geo = _geometry(arc)
    for r, b in curve:
        print(f"rate {r:.4f}  final BER {b:.3e}")
    if best is None:
        print("no grid rate met the target")
    else:
        print(f"rate {best:.4f}  U/G {harness.report_value(harness.user_bits_per_grain(best, geo.grains_per_bit))}")
    if args.out:
        harness.write_curve(args.out, curve, best, geo.grains_per_bit, cfg)


def cmd_compare(args):
    arc = load_archive(args.archive)
    cfg = _config(args)
    out = harness.compare_detectors(cfg, arc.to_detectors(), args.trials, args.seed,
                                    geometry=_geometry(arc), flip=_flip(args))
    for k, v in out["table"].items():
        print(f"{k:22s} {v:.4%}" if not k.startswith("ratio") else f"{k:22s} {v:.3f}")
    if args.out:
        harness.write_results(args.out, out["result"], cfg)


def cmd_inspect_lut(args):
    print(describe(load_archive(args.archive)))


# ---------------------------------------------------------------------------
# Parser


def _add_common(p, training=False, profile=False):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p0", type=float, default=FlipModel.p0, help="grain flip probability at a transition")
    p.add_argument("--decay", type=float, default=FlipModel.decay, help="flip decay length (nm)")
    if profile:
        p.add_argument("--profile", choices=("desk", "full", "tiny"), default="desk")
        for name in ("repeats", "reads-per-file", "design-length", "design-reads", "ntaps", "nc"):
            p.add_argument(f"--{name}", type=int)
    if training:
        p.add_argument("--training", required=True, help="directory of training files")


def _add_config(p):
    p.add_argument("--config", help="flat key = value file")
    for key in harness.CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")
    p.add_argument("--trials", type=int, default=30)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tdmr-lab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-media", help="tessellate a medium and save it")
    _add_common(p)
    p.add_argument("--tracks", type=int, default=5)
    p.add_argument("--length", type=int, default=8196)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_media)

    p = sub.add_parser("emit-training", help="write the 512-pattern training files")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=500)
    p.add_argument("--reads-per-file", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_emit_training)

    for name, fn, kw, help_ in (
            ("design-eq", cmd_design_eq, dict(profile=True), "design the MMSE equalizers"),
            ("train-quantizers", cmd_train_quantizers, dict(training=True), "train per-track quantizers"),
            ("train-laip", cmd_train_laip, dict(training=True), "train the LAIP tables"),
            ("train-pdnp", cmd_train_pdnp, dict(profile=True), "train the PDNP baselines"),
            ("train", cmd_train, dict(profile=True), "every offline stage in one go")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("archive")
        _add_common(p, **kw)
        if name == "train-laip":
            p.add_argument("--repeats", type=int, default=500, help="repeats used when emitting the files")
            p.add_argument("--no-smooth", action="store_true")
        p.set_defaults(fn=fn)

    p = sub.add_parser("run", help="Monte-Carlo run of the detection pipeline")
    p.add_argument("archive")
    _add_common(p)
    _add_config(p)
    p.add_argument("--baselines", nargs="*", default=[], choices=("no-apriori", "pdnp2d", "pdnp1d"))
    p.add_argument("--out", default="results")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("rate-search", help="largest code rate meeting a BER target")
    p.add_argument("archive")
    _add_common(p)
    _add_config(p)
    p.add_argument("--rates", required=True, help="comma-separated increasing rates")
    p.add_argument("--target-ber", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_rate_search)

    p = sub.add_parser("compare", help="detector-only BERs against the PDNP baselines")
    p.add_argument("archive")
    _add_common(p)
    _add_config(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("inspect-lut", help="summarise a LUT archive")
    p.add_argument("archive")
    p.set_defaults(fn=cmd_inspect_lut)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
