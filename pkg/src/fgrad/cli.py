"""``fgrad`` command line: train, gradcheck, estimator-stats, grid, checksums."""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, load_config, resolve
from .data import DATASET_FILES, checksums
from .estimators import monte_carlo_stats
from .runner import execute

log = logging.getLogger("fgrad")


def _fail(kind: str, exc: Exception, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.out_dir:
            cfg["run"]["out_dir"] = args.out_dir
    except (ConfigError, OSError) as e:
        return _fail("config", e, 2)
    try:
        execute(cfg)
    except Exception as e:  # surfaced as a one-line error, exit nonzero
        return _fail(type(e).__name__, e, 1)
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.dtype == "float64" else np.float32
    if args.inject_sign_flip:
        with gradcheck.flipped_vjp(args.inject_sign_flip):
            checks = gradcheck.run_all(dtype, args.seed, estimators=not args.quick)
    else:
        checks = gradcheck.run_all(dtype, args.seed, estimators=not args.quick)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_estimator_stats(args) -> int:
    try:
        s = monte_carlo_stats(args.dim, args.family, args.draws, args.seed)
    except ValueError as e:
        return _fail("argument", e, 2)
    print(f"family={s['family']} dim={s['dim']} draws={s['draws']}")
    print(f"max_abs_bias={s['max_abs_bias']:.6g} clt_bound={s['bias_bound']:.6g}")
    label = "d+1" if s["family"] == "gaussian" else "d-1"
    print(f"relative_second_moment={s['ratio']:.6g} analytic({label})={s['reference']:.6g}")
    return 0


def _parse_lrs(text: str) -> list:
    lrs = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        v = float(tok)
        if v in lrs:
            log.warning("duplicate lr %g ignored", v)
            continue
        lrs.append(v)
    if not lrs:
        raise ValueError("empty lr list")
    return lrs


def run_grid(cfg: dict, lrs: list, out_root) -> list:
    """One run per lr (seed = base seed + lr index); writes ``grid.csv``. Returns the rows."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, lr in enumerate(lrs):
        sub = copy.deepcopy(cfg)
        sub["optim"]["lr"] = lr
        sub["run"]["seed"] = cfg["run"]["seed"] + i
        sub_dir = out_root / f"lr_{lr:g}"
        sub["run"]["out_dir"] = str(sub_dir)
        try:
            recs = execute(resolve(sub))
            acc = recs[-1].test_acc if recs else float("nan")
            rows.append({"lr": lr, "seed": sub["run"]["seed"], "final_test_acc": acc, "status": "ok",
                         "out_dir": str(sub_dir)})
        except Exception as e:  # a failed sub-run is recorded; the grid continues
            log.error("lr=%g failed: %s", lr, e)
            rows.append({"lr": lr, "seed": sub["run"]["seed"], "final_test_acc": float("nan"),
                         "status": f"error: {type(e).__name__}: {e}".replace("\n", " "), "out_dir": str(sub_dir)})
    accs = [r["final_test_acc"] if r["status"] == "ok" else -np.inf for r in rows]
    best = int(np.argmax(accs)) if any(np.isfinite(accs)) else -1
    with open(out_root / "grid.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lr", "seed", "final_test_acc", "best", "status", "out_dir"])
        for i, r in enumerate(rows):
            w.writerow([f"{r['lr']:g}", r["seed"], r["final_test_acc"], int(i == best), r["status"], r["out_dir"]])
    return rows


def cmd_grid(args) -> int:
    try:
        cfg = load_config(args.config)
        lrs = _parse_lrs(args.lrs)
    except (ConfigError, OSError, ValueError) as e:
        return _fail("config", e, 2)
    rows = run_grid(cfg, lrs, args.out_dir or cfg["run"]["out_dir"])
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_checksums(args) -> int:
    try:
        sums = checksums(args.dataset, args.root)
    except FileNotFoundError as e:
        return _fail("data", e, 2)
    for name, digest in sums.items():
        print(f"{digest or 'MISSING':<64s}  {name}")
    return 0 if all(sums.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fgrad", description="forward-gradient training experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("config")
    p.add_argument("--out-dir", default=None, help="override run.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="run the autodiff and estimator oracle suites")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the estimator path-agreement checks")
    p.add_argument("--inject-sign-flip", default=None, metavar="KIND", help="test hook: negate a layer kind's VJP")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("estimator-stats", help="Monte-Carlo bias and variance of random-guess estimates")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--family", choices=["gaussian", "rademacher"], required=True)
    p.add_argument("--draws", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimator_stats)

    p = sub.add_parser("grid", help="one run per learning rate plus grid.csv")
    p.add_argument("config")
    p.add_argument("--lrs", required=True, help="comma-separated learning rates")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("checksums", help="sha256 of the dataset files present under the data root")
    p.add_argument("dataset", choices=sorted(DATASET_FILES))
    p.add_argument("--root", default=None)
    p.set_defaults(func=cmd_checksums)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
