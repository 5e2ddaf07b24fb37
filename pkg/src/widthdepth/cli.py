"""``widthdepth run | list | verify``."""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness
from .netsim import TrialError

EXPERIMENTS_ENV = "WIDTHDEPTH_EXPERIMENTS"


def _cmd_run(args):
    spec = harness.load_spec(args.spec)
    try:
        bundle = harness.run(spec, args.out_dir, n_jobs=args.threads, heavy=args.heavy,
                             seed_override=args.seed_override)
    except TrialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{spec.name}: {len(bundle.artifacts)} artifacts in {bundle.directory} "
          f"({bundle.manifest['wall_seconds']:.1f} s)")
    for name in bundle.manifest["skipped"]:
        print(f"  skipped (n, L) = {tuple(name)}; rerun with --heavy")
    return 0


def _cmd_list(args):
    root = Path(args.experiments_dir)
    files = sorted(root.glob("*.yaml"))
    if not files:
        print(f"no experiment files in {root}", file=sys.stderr)
        return 1
    for path in files:
        spec = harness.load_spec(path)
        grid = " ".join(f"{n}x{L}" for n, L in spec.grid)
        print(f"{path.name:28s} {spec.kind:18s} trials={spec.trials:<6d} grid={grid}")
    return 0


def _cmd_verify(args):
    mismatches = harness.verify(args.manifest, n_jobs=args.threads)
    if mismatches:
        for name, (want, got) in mismatches.items():
            print(f"MISMATCH {name}: expected {want}, got {got}")
        return 1
    print("all artifacts reproduced byte-identically")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="widthdepth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment file")
    r.add_argument("spec")
    r.add_argument("--threads", type=int, default=1, help="worker processes")
    r.add_argument("--out-dir", default=None,
                   help=f"output root (default ${harness.OUT_DIR_ENV} or ./results)")
    r.add_argument("--heavy", action="store_true", help=f"allow n or L above {harness.CI_SCALE_CAP}")
    r.add_argument("--seed-override", type=int, default=None)
    r.set_defaults(func=_cmd_run)

    ls = sub.add_parser("list", help="list experiment files")
    ls.add_argument("--experiments-dir", default=os.environ.get(EXPERIMENTS_ENV, "experiments"))
    ls.set_defaults(func=_cmd_list)

    v = sub.add_parser("verify", help="re-run a manifest and compare artifacts")
    v.add_argument("manifest")
    v.add_argument("--threads", type=int, default=1)
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)
