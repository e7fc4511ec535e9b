"""``homoloss`` command line.

Exit status: 0 on success, 1 on invalid input (bad flags, missing or malformed
files) or a failed gradient check, 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .errors import HomolossError, ParseError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(s):
    v = float(s)
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {s}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a non-negative number, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="homoloss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=_positive_int, default=50)
    g.add_argument("--tol", type=_positive_float, default=1e-4)
    g.add_argument("--out", help="directory for gradcheck.json")

    e = sub.add_parser("estimate", help="fit a homography to a correspondence file")
    e.add_argument("correspondences", help="file: line 'n', then n lines 'u v x y'")

    s = sub.add_parser("simulate", help="run the synthetic depth-range experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="first seed; replaces the config's seed list")
    s.add_argument("--scenes", type=_positive_int, help="number of seeds (default: config's)")
    s.add_argument("--mode", choices=("type1", "type2"), help="override the homography mode")
    s.add_argument("--lambda-homo", type=_nonneg_float,
                   help="override lambda_homo of every config that uses the homography term")
    s.add_argument("--jobs", type=_positive_int, default=1, help="worker processes over seeds")

    k = sub.add_parser("eval-kitti", help="self-consistency checks on KITTI labels")
    k.add_argument("--labels", required=True, help="label_2 directory")
    k.add_argument("--calib", required=True, help="calib directory")
    k.add_argument("--camera-height", type=_positive_float, default=1.65)
    k.add_argument("--out", help="directory for kitti_eval.json")

    r = sub.add_parser("report", help="render a results file as depth-range tables")
    r.add_argument("results", help="results.csv written by simulate")
    r.add_argument("--out", help="directory for report.txt")
    return p


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise UsageError(f"{what} is not a directory: {path}")


def read_correspondences(text: str):
    """``(pixels, ground)`` arrays from the ``n`` / ``u v x y`` format."""
    lines = [(i, l) for i, l in enumerate(text.splitlines(), start=1) if l.strip()]
    if not lines:
        raise ParseError("empty correspondence file")
    i0, head = lines[0]
    try:
        n = int(head.strip())
    except ValueError:
        raise ParseError(f"header must be a point count, got {head.strip()!r}", i0) from None
    if n < 0 or len(lines) - 1 != n:
        raise ParseError(f"header says {n} points, found {len(lines) - 1}", i0)
    rows = []
    for i, l in lines[1:]:
        toks = l.split()
        if len(toks) != 4:
            raise ParseError(f"expected 4 numbers 'u v x y', got {len(toks)}", i, min(len(toks), 4))
        row = []
        for j, t in enumerate(toks):
            try:
                v = float(t)
            except ValueError:
                raise ParseError(f"not a number: {t!r}", i, j) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {t!r}", i, j)
            row.append(v)
        rows.append(row)
    a = np.array(rows, dtype=float).reshape(-1, 4)
    return a[:, :2], a[:, 2:]


def _fmt_matrix(M):
    return "\n".join("  " + " ".join(f"{v: .12e}" for v in row) for row in M)


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    summary = run_gradcheck(seed=args.seed, scenes=args.scenes, tol=args.tol)
    for name, err in summary.max_by_loss().items():
        print(f"{name:24s} max relative error {err:.3e}")
    print(f"scenes {summary.n_scenes}, checks skipped {summary.n_skipped}")
    print(f"max relative error {summary.max_error:.3e} (tol {args.tol:g})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump({"seed": args.seed, "scenes": args.scenes, "tol": args.tol,
                       "max_error": summary.max_error, "by_loss": summary.max_by_loss(),
                       "skipped": summary.n_skipped}, f, indent=2)
    if not summary.passed:
        for i, r in summary.failures():
            print(f"FAIL scene {i} {r.name}: {r.error:.3e}", file=sys.stderr)
        return EXIT_INVALID
    print("PASS")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .homography import apply_homography, estimate_homography

    _require_file(args.correspondences, "correspondence file")
    with open(args.correspondences) as f:
        src, dst = read_correspondences(f.read())
    H = estimate_homography(src, dst)
    err = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
    print("H (unit Frobenius norm, first point with positive scale):")
    print(_fmt_matrix(H))
    print("reprojection error per point:")
    for i, e in enumerate(err):
        print(f"  {i:4d} {e:.3e}")
    print(f"max reprojection error {err.max():.3e}")
    return EXIT_OK


def _override_config(cfg, args):
    from .experiment import NamedLoss

    losses = []
    for nl in cfg.losses:
        loss = nl.loss
        if args.mode:
            loss = replace(loss, mode=args.mode)
        if args.lambda_homo is not None and loss.lambda_homo > 0:
            loss = replace(loss, lambda_homo=args.lambda_homo)
        losses.append(NamedLoss(nl.name, loss))
    seeds = cfg.seeds
    if args.seed is not None or args.scenes is not None:
        start = args.seed if args.seed is not None else cfg.seeds[0]
        count = args.scenes if args.scenes is not None else len(cfg.seeds)
        seeds = tuple(range(start, start + count))
    return replace(cfg, losses=tuple(losses), seeds=seeds)


def cmd_simulate(args) -> int:
    from .experiment import load_config, run_experiment, write_outputs
    from .metrics import format_report

    _require_file(args.config, "config")
    try:
        cfg = _override_config(load_config(args.config), args)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    result = run_experiment(cfg, jobs=args.jobs)
    paths = write_outputs(result, args.out)
    print(format_report(result.reports))
    for name, c in result.comparison().items():
        print(f"far bins (>= {cfg.far_depth:g} m): {name} vs {c['baseline']}: "
              f"improvement {c['mean_improvement']:.4f} m +- {c['standard_error']:.4f} "
              f"over {c['n_seeds']} seeds")
    if result.diverged:
        print(f"diverged runs: {result.diverged}", file=sys.stderr)
    print(f"wrote {', '.join(sorted(paths.values()))}")
    return EXIT_OK


def cmd_eval_kitti(args) -> int:
    from .kitti_io import evaluate_frames

    _require_dir(args.labels, "--labels")
    _require_dir(args.calib, "--calib")
    res = evaluate_frames(args.labels, args.calib, args.camera_height)
    if res["n_frames"] == 0:
        raise UsageError("no frame has both a label and a calib file")
    for f in res["frames"]:
        if f.error:
            print(f"{f.frame}: {f.error}", file=sys.stderr)
    print(f"frames {res['n_frames']}, objects {res['n_objects']}, parse errors {res['parse_errors']}")
    print(f"degenerate/skipped frames {res['n_skipped']} (rate {res['skip_rate']:.3f})")
    for k, v in res["max_loss_at_truth"].items():
        print(f"max {k} loss at ground truth {v:.3e}")
    print(f"bbox consistency (Easy Car, 15 px margin) {res['bbox_consistency']:.3f} "
          f"over {res['bbox_checked']} objects")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out = dict(res, frames=[asdict(f) for f in res["frames"]])
        with open(os.path.join(args.out, "kitti_eval.json"), "w") as f:
            json.dump(out, f, indent=2, default=float)
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import format_report, read_results_csv

    _require_file(args.results, "results file")
    try:
        reports = read_results_csv(args.results)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad results file: {exc}") from None
    text = format_report(reports)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(text + "\n")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "eval-kitti": cmd_eval_kitti,
    "report": cmd_report,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ParseError) as exc:
        print(f"homoloss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HomolossError, ArithmeticError, ValueError, OSError) as exc:
        print(f"homoloss {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None):
    try:
        code = run(argv)
    except SystemExit as exc:  # argparse
        code = exc.code if isinstance(exc.code, int) else EXIT_INVALID
    sys.exit(code)


if __name__ == "__main__":
    main()
