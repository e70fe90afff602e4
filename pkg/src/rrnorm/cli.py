"""Command line: normalize, metrics, changedet, synth."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import changedet, em, metrics, synth
from .mappers import apply_mapping
from .noise_model import MixtureCollapseError
from .raster import (
    RasterFormatError,
    RasterPair,
    atomic_write_bytes,
    cast_like,
    dequantize,
    mask_to_raster,
    quantize_pair,
    raster_to_mask,
    read_raster,
    write_raster,
)

log = logging.getLogger("rrnorm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, kind, message, code=EXIT_USAGE):
        super().__init__(message)
        self.kind, self.code = kind, code


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _read(path, role):
    if not Path(path).is_file():
        raise CliError("InputNotFound", f"{role} file not found: {path}")
    try:
        return read_raster(path)
    except RasterFormatError as exc:
        raise CliError(type(exc).__name__, f"{role}: {exc}") from None


def _threads(n):
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def _suffixed(path, tag, multi):
    if path is None or not multi:
        return path
    p = Path(path)
    return str(p.with_name(f"{p.stem}.{tag}{p.suffix}"))


# ---------------- normalize ----------------

def cmd_normalize(args) -> int:
    src = _read(args.source, "source")
    tgt = _read(args.target, "target")
    if src.shape != tgt.shape:
        raise CliError("ShapeMismatch", f"source {src.shape} and target {tgt.shape} differ")
    pair = RasterPair.from_rasters(src, tgt)
    codes, qs, qt = quantize_pair(pair, args.T)
    methods = list(em.METHODS) if args.method == "all" else [em.canonical_method(args.method)]
    multi = len(methods) > 1
    reports = []
    for method in methods:
        cfg = em.EmConfig(method=method, delta=args.delta, max_iters=args.max_iters,
                          subsample_size=args.subsample_size, seed=args.seed,
                          gamma_threshold=args.gamma_threshold, T=args.T,
                          threads=_threads(args.threads))
        try:
            res = em.run(codes, cfg)
        except (FloatingPointError, MixtureCollapseError, np.linalg.LinAlgError) as exc:
            raise CliError("NumericalFailure", f"{method}: {exc}", EXIT_NUMERIC) from None
        mapped = apply_mapping(res.mapping, codes.source, args.T)
        native = dequantize(mapped, qt)
        out_raster = cast_like(native, tgt.dtype, nodata=tgt.nodata, mask=pair.valid_mask)
        report = res.report()
        report["quantization"] = {"source": qs.to_json(), "target": qt.to_json()}
        outputs = {
            "out": _suffixed(args.out, method, multi),
            "report": _suffixed(args.report, method, multi),
            "mask_out": _suffixed(args.mask_out, method, multi),
            "mapping_out": _suffixed(args.mapping_out, method, multi),
        }
        if outputs["out"]:
            write_raster(out_raster, outputs["out"])
        if outputs["mask_out"]:
            write_raster(mask_to_raster(res.nc_mask.mask), outputs["mask_out"])
        if outputs["mapping_out"]:
            _write_json(outputs["mapping_out"], {**res.mapping.to_json(), "T": args.T,
                                                 "quantization": report["quantization"]})
        if outputs["report"]:
            _write_json(outputs["report"], report)
            manifest = {"command": "normalize", "inputs": {"source": args.source, "target": args.target},
                        "method": method, "config": _config_dict(cfg), "outputs": outputs}
            _write_json(Path(outputs["report"]).with_suffix(".manifest.json"), manifest)
        log.info("%s: mll=%.4f ncr=%.4f iters=%d", method, res.mll, res.nc_mask.ncr, res.iterations)
        reports.append(report)
    if args.csv:
        rows = [metrics.EvalReport(method=r["method"], mll=r["mll"], ncr=r["ncr"]) for r in reports]
        atomic_write_bytes(args.csv, metrics.to_csv(rows).encode())
    _emit(reports if multi else reports[0])
    return EXIT_OK


def _config_dict(cfg):
    return {k: getattr(cfg, k) for k in ("method", "delta", "max_iters", "subsample_size",
                                         "seed", "gamma_threshold", "T", "threads")}


# ---------------- metrics ----------------

def cmd_metrics(args) -> int:
    src = _read(args.source, "source")
    tgt = _read(args.target, "target")
    nrm = _read(args.normalized, "normalized")
    mask = raster_to_mask(_read(args.mask, "mask"))
    if not (src.shape == tgt.shape == nrm.shape) or mask.shape != src.shape[1:]:
        raise CliError("ShapeMismatch", "source, target, normalized and mask must align")
    try:
        roles = metrics.parse_roles(args.roles, src.bands)
    except ValueError as exc:
        raise CliError("InvalidRoles", str(exc)) from None
    valid = RasterPair.from_rasters(src, tgt).valid_mask
    mll = ncr = None
    if args.run_report:
        with open(args.run_report) as fh:
            rr = json.load(fh)
        mll, ncr = rr.get("mll"), rr.get("ncr")
    rep = metrics.evaluate_pair(src, tgt, nrm, mask & valid, roles, method=args.method, mll=mll, ncr=ncr)
    if args.report:
        _write_json(args.report, rep.to_json())
    if args.csv:
        atomic_write_bytes(args.csv, metrics.to_csv([rep]).encode())
    _emit(rep.to_json())
    return EXIT_OK


# ---------------- changedet ----------------

def cmd_changedet(args) -> int:
    s = raster_to_mask(_read(args.source_pred, "source-pred"))
    t = raster_to_mask(_read(args.target_pred, "target-pred"))
    nc = raster_to_mask(_read(args.nc_mask, "nc-mask")) if args.nc_mask else None
    truth = raster_to_mask(_read(args.truth, "truth")) if args.truth else None
    shapes = {m.shape for m in (s, t, nc, truth) if m is not None}
    if len(shapes) != 1:
        raise CliError("ShapeMismatch", f"mask dimensions differ: {sorted(shapes)}")
    modes = list(changedet.MODES) if args.mode == "all" else [args.mode]
    rows = []
    for mode in modes:
        try:
            res = changedet.run_strategy(
                mode, s, t, nc, truth, ratio_threshold=args.ratio, window=(args.window, args.window),
                vote_threshold=args.vote, connectivity=args.connectivity)
        except ValueError as exc:
            raise CliError("InvalidArgument", str(exc)) from None
        out = _suffixed(args.out, mode, len(modes) > 1)
        if out:
            write_raster(mask_to_raster(res.change_mask), out)
        row = {"mode": mode, "changed_pixels": int(res.change_mask.sum())}
        if res.scores:
            row.update(res.scores)
        rows.append(row)
    if args.report:
        _write_json(args.report, rows)
    _emit(rows if len(rows) > 1 else rows[0])
    return EXIT_OK


# ---------------- synth ----------------

def cmd_synth(args) -> int:
    try:
        spec = synth.SceneSpec(
            size=args.size, bands=args.bands, mapping=args.mapping,
            gammas=tuple(args.gammas), change_fraction=args.change_fraction,
            change_kind=args.change_kind, noise_sigma_nc=args.noise_nc,
            noise_sigma_change=args.noise_change, seed=args.seed, T=args.T)
    except ValueError as exc:
        raise CliError("InvalidSpec", str(exc)) from None
    pair, truth = synth.generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(pair.source, out / "source.rrnr")
    write_raster(pair.target, out / "target.rrnr")
    write_raster(mask_to_raster(truth.nc_mask), out / "truth_nc.rrnr")
    _write_json(out / "truth_mapping.json", {**truth.mapping.to_json(), "T": spec.T})
    manifest = {"command": "synth", "spec": spec.to_json(),
                "files": ["source.rrnr", "target.rrnr", "truth_nc.rrnr", "truth_mapping.json"],
                "truth_nc_fraction": float(truth.nc_mask.mean())}
    _write_json(out / "manifest.json", manifest)
    _emit(manifest)
    return EXIT_OK


# ---------------- parser ----------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrnorm", description=__doc__)
    p.add_argument("--config", help="JSON file supplying default values for any flag")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command")

    n = sub.add_parser("normalize", help="fit and apply a normalization mapping")
    n.add_argument("--source")
    n.add_argument("--target")
    n.add_argument("--out")
    n.add_argument("--report")
    n.add_argument("--mask-out")
    n.add_argument("--mapping-out")
    n.add_argument("--csv")
    n.add_argument("--method", default="hm-mog",
                   help="l, hm, l-mog, hm-mol, hm-mog (or full names), or 'all'")
    n.add_argument("--delta", type=float, default=1e-4)
    n.add_argument("--max-iters", type=int, default=10)
    n.add_argument("--subsample-size", type=_subsample, default=100_000)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--gamma-threshold", type=float, default=0.5)
    n.add_argument("--T", type=int, default=255)
    n.add_argument("--threads", type=int, default=1)
    n.set_defaults(func=cmd_normalize)

    m = sub.add_parser("metrics", help="no-change-set RMSE before and after normalization")
    m.add_argument("--source")
    m.add_argument("--target")
    m.add_argument("--normalized")
    m.add_argument("--mask")
    m.add_argument("--roles", help="band roles, e.g. B=0,G=1,R=2,N=3")
    m.add_argument("--method", default="")
    m.add_argument("--run-report", help="normalize report to copy mll/ncr from")
    m.add_argument("--report")
    m.add_argument("--csv")
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("changedet", help="fuse class masks with a no-change mask")
    c.add_argument("--source-pred")
    c.add_argument("--target-pred")
    c.add_argument("--nc-mask")
    c.add_argument("--truth")
    c.add_argument("--mode", default="window-vote", choices=list(changedet.MODES) + ["all"])
    c.add_argument("--window", type=int, default=31)
    c.add_argument("--vote", type=float, default=0.7)
    c.add_argument("--ratio", type=float, default=0.8)
    c.add_argument("--connectivity", type=int, default=4, choices=[4, 8])
    c.add_argument("--out")
    c.add_argument("--report")
    c.add_argument("--threads", type=int, default=1)
    c.set_defaults(func=cmd_changedet)

    s = sub.add_parser("synth", help="write a synthetic bitemporal scene")
    s.add_argument("--out-dir")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--bands", type=int, default=3)
    s.add_argument("--mapping", default="gamma", choices=["gamma", "affine"])
    s.add_argument("--gammas", type=float, nargs="+", default=[0.7, 0.85, 1.3])
    s.add_argument("--change-fraction", type=float, default=0.25)
    s.add_argument("--change-kind", default="cloud_blobs", choices=list(synth.CHANGE_KINDS))
    s.add_argument("--noise-nc", type=float, default=2.0)
    s.add_argument("--noise-change", type=float, default=20.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--T", type=int, default=255)
    s.set_defaults(func=cmd_synth)
    return p


def _subsample(text):
    return "full" if text == "full" else int(text)


def _apply_config(parser, argv):
    """Config-file values become parser defaults, so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        if not Path(known.config).is_file():
            raise CliError("InputNotFound", f"config file not found: {known.config}")
        with open(known.config) as fh:
            conf = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        for sp in subs.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in conf.items() if k in dests})
    return parser.parse_args(argv)


REQUIRED = {
    "normalize": ("source", "target"),
    "metrics": ("source", "target", "normalized", "mask"),
    "changedet": ("source_pred", "target_pred"),
    "synth": ("out_dir",),
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command]
                   if getattr(args, k, None) in (None, "")]
        if missing:
            raise CliError("UsageError", f"missing required options: {', '.join(missing)}")
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc)}) + "\n")
        return exc.code
    except ValueError as exc:
        sys.stderr.write(json.dumps({"error": "InvalidInput", "message": str(exc)}) + "\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IOError", "message": str(exc)}) + "\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
