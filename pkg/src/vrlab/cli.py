"""``vrlab`` command line: training, RD sweeps, offset oracle, file codec.

Exit status: 0 success, 1 usage, 2 runtime failure, 3 training divergence.
Commands that write output record a JSON manifest before doing any work.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import re
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import harness as H
from . import models as M
from .data import read_patches, write_patches
from .entropy import BACKEND, CoderError, StreamError
from .quant import write_oracle_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("vrlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments; route it to our usage code instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# manifests ---------------------------------------------------------------------

@dataclass
class RunManifest:
    command: list[str]
    config: str | None
    seed: int | None
    output: str
    build: str
    started: str

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


def build_id() -> str:
    ident = f"vrlab {__version__} ({BACKEND} coder)"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return ident
    return f"{ident} git {rev.stdout.strip()}" if rev.returncode == 0 and rev.stdout.strip() else ident


def _manifest(argv, config, seed, output: Path, path: Path) -> None:
    RunManifest(list(argv), str(config) if config else None, seed, str(output), build_id(),
                time.strftime("%Y-%m-%dT%H:%M:%S%z")).write(path)


def _fresh_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {path} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> H.TrainConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    try:
        return H.TrainConfig.load(args.config, overrides)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc


# --deltas parsing --------------------------------------------------------------

_RANGE = re.compile(r"^([^:]+):([^:]+):(lin|log)(\d+)$")


def parse_deltas(spec: str) -> list[float]:
    """``a:b:logN`` / ``a:b:linN`` ranges, or a comma list of values."""
    m = _RANGE.match(spec.strip())
    try:
        if m:
            lo, hi, kind, n = float(m[1]), float(m[2]), m[3], int(m[4])
            if n < 1 or (n == 1 and lo != hi):
                raise ValueError("a range needs at least two points")
            values = np.geomspace(lo, hi, n) if kind == "log" else np.linspace(lo, hi, n)
        else:
            values = np.array([float(v) for v in spec.split(",")])
    except ValueError as exc:
        raise UsageError(f"malformed --deltas {spec!r}: {exc}") from exc
    if values.size == 0 or not np.all(np.isfinite(values)) or not np.all(values > 0):
        raise UsageError(f"malformed --deltas {spec!r}: step sizes must be positive")
    return [float(v) for v in values]


# commands ----------------------------------------------------------------------

def _progress(stage, step, losses):
    log.info("%s step %d: %s", stage, step, np.array2string(losses, precision=4))


def cmd_train(args, argv) -> int:
    cfg = _load_config(args)
    if args.stage != "dedicated" and not args.init:
        raise UsageError(f"--stage {args.stage} needs --init <checkpoint>")
    if args.stage == "dedicated" and args.init:
        raise UsageError("--stage dedicated trains from scratch; drop --init")
    k = cfg.n_rates if args.lambda_index is None else args.lambda_index
    if not 1 <= k <= cfg.n_rates:
        raise UsageError(f"--lambda-index must lie in 1..{cfg.n_rates}")
    out = _fresh_dir(Path(args.out), args.overwrite)
    _manifest(argv, args.config, cfg.seed, out, out / "manifest.json")
    cfg.save(out / "config.yaml")
    diag = out / "diagnostics.csv"
    if args.stage == "dedicated":
        res = H.train_dedicated(cfg, cfg.lambdas[k - 1], diag, _progress)
    else:
        init = H.load_model(args.init)
        fn = {"moo": H.stage1_moo, "qr": H.stage2_qr, "vrhp": H.stage3_vrhp}.get(args.stage)
        res = fn(cfg, init, diag, _progress) if fn else H.single_stage(cfg, init, M.Flags(True, True), diag,
                                                                          _progress)
    flags = H.STAGE_FLAGS[args.stage]
    H.save_model(res.model, out / "model.vrp", flags)
    _write_history(out / "history.csv", res.history)
    xe = H.eval_set(cfg)
    lambdas = [rp.lam for rp in res.model.rates]
    H.write_rd_csv(out / "rd.csv", H.rd_sweep(res.model, xe, [rp.delta for rp in res.model.rates], flags, lambdas))
    print(json.dumps({"stage": args.stage, "checkpoint": str(out / "model.vrp"),
                      "losses": [float(v) for v in res.eval_losses]}))
    return EXIT_OK


def _write_history(path: Path, history) -> None:
    n = len(history[0][2])
    with open(path, "w") as fh:
        fh.write(",".join(["step", "lr"] + [f"loss_{i + 1}" for i in range(n)]) + "\n")
        for step, lr, losses in history:
            fh.write(",".join([str(step), repr(float(lr))] + [repr(float(v)) for v in losses]) + "\n")


def cmd_pipeline(args, argv) -> int:
    cfg = _load_config(args)
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    out = _fresh_dir(Path(args.out), args.overwrite)
    _manifest(argv, args.config, cfg.seed, out, out / "manifest.json")
    cfg.save(out / "config.yaml")
    res = H.run_pipeline(cfg, out, workers=args.workers, single=not args.no_single, progress=_progress)
    for key in res.losses:
        if key != "dedicated":
            print(f"{key:>8} gap vs dedicated: {np.array2string(res.gap(key), precision=4)}")
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    deltas = parse_deltas(args.deltas)
    cfg = _load_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _manifest(argv, args.config, cfg.seed, out, out.with_name(out.name + ".manifest.json"))
    model = H.load_model(args.model)
    flags = M.Flags() if args.naive else H.load_flags(args.model)
    lambdas = [rp.lam for rp in model.rates]
    pts = H.rd_sweep(model, H.eval_set(cfg), deltas, flags, lambdas, coded=not args.estimated)
    H.write_rd_csv(out, pts)
    print(f"wrote {len(pts)} points to {out}")
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    if args.grid:
        if args.points < 2:
            raise UsageError("--points must be at least 2")
        ratios = np.geomspace(0.25, 4.0, args.points)
        deltas = parse_deltas(args.deltas) if args.deltas else [1.0, 2.0, 5.0, 10.0]
        qs = [args.q] if args.q is not None else [1, 2]
        if 0 in qs:
            raise UsageError("offset is undefined for the zero bin (q=0)")
        rows = [(r * d, d) for d in deltas for r in ratios]
        return _oracle_table(args, argv, rows, qs)
    if args.sigma is None or args.delta is None or args.q is None:
        raise UsageError("give --sigma, --delta and --q, or --grid")
    if args.q == 0:
        raise UsageError("offset is undefined for the zero bin (q=0)")
    if not (args.sigma > 0 and args.delta > 0):
        raise UsageError("--sigma and --delta must be positive")
    return _oracle_table(args, argv, [(args.sigma, args.delta)], [args.q])


def _oracle_table(args, argv, cells, qs) -> int:
    if not args.out:
        write_oracle_csv(sys.stdout, cells, qs)
        return EXIT_OK
    out = Path(args.out)
    _manifest(argv, None, None, out, out.with_name(out.name + ".manifest.json"))
    with open(out, "w", newline="") as fh:
        write_oracle_csv(fh, cells, qs)
    return EXIT_OK


def cmd_codec(args, argv) -> int:
    src, dst = Path(args.input), Path(args.out)
    dst.parent.mkdir(parents=True, exist_ok=True)
    _manifest(argv, None, None, dst, dst.with_name(dst.name + ".manifest.json"))
    model = H.load_model(args.model)
    flags = H.load_flags(args.model)
    if args.action == "encode":
        if args.delta is None or not args.delta > 0:
            raise UsageError("encode needs a positive --delta")
        x = read_patches(src)
        dims = x.shape[1:]
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != model.config.dim:
            raise UsageError(f"{src}: samples have {flat.shape[1]} values, model expects {model.config.dim}")
        c = M.compress(model, flat, args.delta, flags)
        dst.write_bytes(M.pack_coded(c, dims))
        m = c.metrics
        print(json.dumps({"samples": int(x.shape[0]), "bits_latent": m["bits_latent"], "bits_hyper": m["bits_hyper"],
                          "bits_total": m["bits_total"], "bits_per_value": m["bits_total"] / m["dims"],
                          "file_bytes": dst.stat().st_size, "mse": m["mse"],
                          "psnr": m["psnr"] if math.isfinite(m["psnr"]) else None}))
    else:
        delta, dims, hyper, latent = M.unpack_coded(src.read_bytes())
        if args.delta is not None and args.delta != delta:
            raise UsageError(f"--delta {args.delta} does not match the coded step {delta}")
        x_hat = M.decompress(model, hyper, latent, delta, flags)
        write_patches(dst, x_hat.reshape((x_hat.shape[0],) + dims))
        print(json.dumps({"samples": int(x_hat.shape[0]), "delta": delta, "output": str(dst)}))
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vrlab", description="Variable-rate toy compression experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="YAML training config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (dotted keys, YAML values); repeatable")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="run one training stage")
    with_config(t)
    t.add_argument("--stage", required=True, choices=H.STAGES)
    t.add_argument("--init", help="checkpoint to start from (all stages but dedicated)")
    t.add_argument("--lambda-index", type=int, help="1-based rate point for --stage dedicated (default: last)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("pipeline", help="dedicated baselines, naive sweep, three-stage and single-stage models")
    with_config(r)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=1, help="processes for the dedicated baselines")
    r.add_argument("--no-single", action="store_true", help="skip the single-stage model")
    r.add_argument("--overwrite", action="store_true")
    r.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("sweep", help="RD sweep of a checkpoint over step sizes")
    with_config(s)
    s.add_argument("--model", required=True)
    s.add_argument("--deltas", required=True, help="'1:10:log16', '1:4:lin4' or '1,2,5'")
    s.add_argument("--out", required=True)
    s.add_argument("--naive", action="store_true", help="disable offsets and the variable hyper step")
    s.add_argument("--estimated", action="store_true", help="report model-estimated bits, skip the coder")
    s.set_defaults(fn=cmd_sweep)

    o = sub.add_parser("oracle", help="MSE-optimal reconstruction offsets for a Gaussian source")
    o.add_argument("--sigma", type=float)
    o.add_argument("--delta", type=float)
    o.add_argument("--q", type=int)
    o.add_argument("--grid", action="store_true", help="table over sigma/delta in [0.25, 4]")
    o.add_argument("--points", type=int, default=9, help="grid points per step size")
    o.add_argument("--deltas", help="grid step sizes, comma separated (default 1,2,5,10)")
    o.add_argument("--out", help="CSV file (default: stdout)")
    o.set_defaults(fn=cmd_oracle)

    c = sub.add_parser("codec", help="encode or decode a raw-patch file")
    c.add_argument("action", choices=("encode", "decode"))
    c.add_argument("--model", required=True)
    c.add_argument("--delta", type=float)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_codec)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args, ["vrlab"] + argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except H.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, StreamError, CoderError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
