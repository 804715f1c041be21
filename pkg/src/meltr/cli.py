"""Command-line entry point: ``meltr <subcommand> ...``.

Exit codes: 0 success, 1 configuration error (or a failed gradcheck),
2 training divergence in ``run``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .losses import GAMMA_GRID
from .meltr_net import VARIANTS

log = logging.getLogger("meltr")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meltr", description="Learned loss combination for auxiliary-task training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def grid_flags(sp, out_default):
        sp.add_argument("--config", type=Path, help="base JSON config (defaults: regression suite)")
        sp.add_argument("--out", type=Path, default=Path(out_default))
        sp.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: physical cores)")
        sp.add_argument("--resume", action="store_true", help="skip cells whose run directory is complete")

    run = sub.add_parser("run", help="train once from a config")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--out", type=Path, help="run directory (default: runs/<cell name>)")
    run.add_argument("--resume", action="store_true")

    cmp_ = sub.add_parser("compare", help="compare hypergradient schemes across seeds")
    grid_flags(cmp_, "out/compare")
    cmp_.add_argument("--schemes", type=_str_list, required=True,
                      help="exact | neumann:<i> | identity | cg:<tol>:<maxit> | unrolled:<k> | mtl")

    gam = sub.add_parser("ablate-gamma", help="sweep the regularization strength")
    grid_flags(gam, "out/ablate_gamma")
    gam.add_argument("--gammas", type=_float_list, default=list(GAMMA_GRID))

    arch = sub.add_parser("ablate-arch", help="compare combiner architectures")
    grid_flags(arch, "out/ablate_arch")
    arch.add_argument("--variants", type=_str_list, default=list(VARIANTS))

    tr = sub.add_parser("trace", help="loss-surface sweeps and weight traces for a finished run")
    tr.add_argument("run_dir", type=Path)
    tr.add_argument("--out", type=Path, help="output directory (default: <run_dir>/trace)")
    tr.add_argument("--no-plots", action="store_true", help="write CSVs only")

    gc = sub.add_parser("gradcheck", help="run the differentiation and hypergradient oracle suites")
    gc.add_argument("--quick", action="store_true", help="fewer random cases")
    return p


def _base(args) -> H.RunSpec:
    return H.load_config(args.config) if args.config else H.parse_config({"suite": "regression"})


def _plan(args, **axes) -> H.ExperimentPlan:
    base = _base(args)
    return H.ExperimentPlan(base, args.out, seeds=args.seeds or [], jobs=args.jobs or H.default_jobs(), **axes)


def cmd_run(args) -> int:
    spec = H.load_config(args.config)
    run_dir = args.out or Path("runs") / spec.name
    if args.resume and (run_dir / "record.json").exists():
        rec = H.load_record(run_dir)
        print(f"{run_dir}: already complete, skipped")
    else:
        rec = H.execute(spec, run_dir).record
    status = rec["status"]
    print(f"{run_dir}: {status}" + (f" ({rec['diagnostic']})" if rec["diagnostic"] else ""))
    for w in rec["warnings"]:
        print(f"warning: {w}")
    return H.EXIT_DIVERGED if status == "diverged" else H.EXIT_OK


def cmd_compare(args) -> int:
    if len(args.schemes) < 2:
        raise H.ConfigError("compare needs at least two schemes")
    plan = _plan(args, schemes=args.schemes, with_cosine=True)
    path = H.write_table(Path(args.out) / "compare.csv", H.COMPARE_HEADER, H.compare_rows(plan.run(args.resume)))
    print(path.read_text(), end="")
    return H.EXIT_OK


def cmd_ablate_gamma(args) -> int:
    if not args.gammas:
        raise H.ConfigError("need at least one gamma")
    plan = _plan(args, gammas=args.gammas)
    path = H.write_table(Path(args.out) / "ablate_gamma.csv", H.GAMMA_HEADER, H.gamma_rows(plan.run(args.resume)))
    print(path.read_text(), end="")
    return H.EXIT_OK


def cmd_ablate_arch(args) -> int:
    bad = sorted(set(args.variants) - set(VARIANTS))
    if bad or not args.variants:
        raise H.ConfigError(f"variants must be a nonempty subset of {VARIANTS}, got {args.variants}")
    plan = _plan(args, variants=args.variants)
    path = H.write_table(Path(args.out) / "ablate_arch.csv", H.ARCH_HEADER, H.arch_rows(plan.run(args.resume)))
    print(path.read_text(), end="")
    return H.EXIT_OK


def cmd_trace(args) -> int:
    try:
        files = H.trace(args.run_dir, args.out, plots=not args.no_plots)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return H.EXIT_CONFIG
    for kind, path in files.items():
        print(f"{kind}: {path}")
    return H.EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(25, 10, 20) if args.quick else run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return H.EXIT_OK if ok else 1


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "ablate-gamma": cmd_ablate_gamma,
    "ablate-arch": cmd_ablate_arch,
    "trace": cmd_trace,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except H.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return H.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
