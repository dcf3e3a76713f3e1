"""Command line: ``hgmmreg {sweep,sequence,invariants,register}``."""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .gmmtree import ModelConfig
from .io import FORMATS, SyntheticTransformSpec, read_cloud
from .register import RegistrationConfig, Variant, register


def _variant(text: str, args) -> Variant:
    t = text.strip().lower()
    if t in ("adaptive", "gmmtree", "gmm-tree"):
        return Variant(t.replace("-", ""), args.L)
    if t in ("flat", "gmm"):
        return Variant("flat", args.J)
    return Variant.parse(text)


def _config(args) -> RegistrationConfig:
    return RegistrationConfig(
        lambda_c=args.lambda_c,
        max_em_iterations=args.max_iterations,
        model_config=ModelConfig(rng_seed=args.seed),
        deterministic=args.deterministic,
        workers=args.workers,
    )


def _common(p):
    p.add_argument("--variant", action="append", default=None,
                   help="adaptive, gmmtree, flat, icp, or sized forms like adaptive:3 / flat:512 (repeatable)")
    p.add_argument("--L", type=int, default=3, help="tree depth for adaptive/gmmtree")
    p.add_argument("--J", type=int, default=512, help="component count for flat")
    p.add_argument("--lambda-c", type=float, default=0.01, help="adaptive complexity threshold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--workers", type=int, default=1, help="threads per E-step")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)


def _outputs(args, stem_default):
    stem = Path(args.output or stem_default)
    if stem.suffix in (".csv", ".json"):
        stem = stem.with_suffix("")
    return stem


def cmd_sweep(args) -> int:
    variants = [_variant(v, args) for v in (args.variant or ["adaptive"])]
    spec = SyntheticTransformSpec(args.rot_range, args.trans_range, args.seed, args.trials)
    cloud = read_cloud(args.cloud, args.input_format) if args.cloud else None
    jobs = 1 if args.serial else args.jobs
    rows = bench.run_synthetic_sweep(cloud, args.sizes, spec, variants, _config(args), jobs=jobs)
    stem = _outputs(args, "sweep")
    timing = not args.no_timing
    if "csv" in args.formats:
        bench.write_rows(rows, stem.with_suffix(".csv"), bench.SWEEP_COLUMNS, timing)
    if "json" in args.formats:
        bench.write_json(rows, stem.with_suffix(".json"), bench.SWEEP_COLUMNS, timing)
    for v in variants:
        mine = [r for r in rows if r.variant == v.name]
        err = np.array([r.rotation_error_deg for r in mine])
        conv = np.mean([r.converged for r in mine])
        print(f"{v.name}: {len(mine)} rows, median rotation error {np.nanmedian(err):.4g} deg, "
              f"converged {conv:.0%}")
    return 0


def _frames(args):
    frames = []
    for f in args.frames:
        if os.path.isdir(f):
            frames += sorted(p for p in glob.glob(os.path.join(f, "*"))
                             if p.lower().endswith((".ply", ".xyz", ".txt")))
        else:
            frames.append(f)
    return frames


def cmd_sequence(args) -> int:
    variant = _variant((args.variant or ["adaptive"])[0], args)
    res = bench.run_sequence(_frames(args), args.step, args.downsample, variant, args.gt, _config(args), args.seed)
    stem = _outputs(args, "sequence")
    timing = not args.no_timing
    if "csv" in args.formats:
        bench.write_rows(res.rows, stem.with_suffix(".csv"), bench.SEQUENCE_COLUMNS, timing)
        bench.write_rows(res.trajectory_rows(), Path(f"{stem}_trajectory.csv"), bench.TRAJECTORY_COLUMNS)
    if "json" in args.formats:
        bench.write_json(res.rows, stem.with_suffix(".json"), bench.SEQUENCE_COLUMNS, timing)
    err = np.array([r.rotation_error_deg for r in res.rows], float)
    if np.isfinite(err).any():
        print(f"{variant.name}: {len(res.rows)} pairs, mean rotation error {np.nanmean(err):.4g} deg")
    else:
        print(f"{variant.name}: {len(res.rows)} pairs")
    return 0


def cmd_invariants(args) -> int:
    report = bench.run_invariant_suite(args.seed)
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    for e in report.entries:
        print(f"{'PASS' if e.passed else 'FAIL'} {e.name}: {e.detail}")
    return 0 if report.passed else 1


def cmd_register(args) -> int:
    variant = _variant((args.variant or ["adaptive"])[0], args)
    target = read_cloud(args.target, args.input_format)
    source = read_cloud(args.source, args.input_format)
    res = register(target, source, replace(_config(args), variant=variant))
    np.savetxt(sys.stdout, res.transform.matrix(), fmt="%.17g")
    print(f"# {res.status}, {res.iterations} iterations", file=sys.stderr)
    return 0 if res.converged else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hgmmreg", description="GMM-tree point cloud registration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="random-transform speed/accuracy sweep")
    _common(p)
    p.add_argument("--cloud", help="input cloud (default: built-in synthetic object)")
    p.add_argument("--input-format", choices=FORMATS)
    p.add_argument("--sizes", type=int, nargs="+", default=[1000, 5000])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--rot-range", type=float, default=15.0, help="per-axis half range, degrees")
    p.add_argument("--trans-range", type=float, default=0.05, help="per-axis half range, unit-diagonal cloud")
    p.add_argument("--output", "-o", help="output path stem")
    p.add_argument("--formats", nargs="+", choices=("csv", "json"), default=["csv", "json"])
    p.add_argument("--jobs", type=int, default=1, help="trials run concurrently")
    p.add_argument("--serial", action="store_true", help="one trial at a time (use for timing)")
    p.add_argument("--no-timing", action="store_true", help="blank the timing columns")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sequence", help="frame-to-frame registration of an ordered sequence")
    _common(p)
    p.add_argument("frames", nargs="+", help="frame files, or a directory of them")
    p.add_argument("--step", type=int, default=5)
    p.add_argument("--downsample", type=int, default=5000)
    p.add_argument("--gt", help="ground-truth poses (16 numbers per line, or trajectory log)")
    p.add_argument("--output", "-o", help="output path stem")
    p.add_argument("--formats", nargs="+", choices=("csv", "json"), default=["csv", "json"])
    p.add_argument("--serial", action="store_true", help="accepted for symmetry; pairs always run in order")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_sequence)

    p = sub.add_parser("invariants", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", help="write the JSON report here")
    p.set_defaults(func=cmd_invariants)

    p = sub.add_parser("register", help="register one pair and print the 4x4 transform")
    _common(p)
    p.add_argument("target")
    p.add_argument("source")
    p.add_argument("--input-format", choices=FORMATS)
    p.set_defaults(func=cmd_register)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
