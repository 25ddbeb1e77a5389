"""Command-line entry point: ``actmem <command>``.

Exit status is 0 when every check in the command passes and 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from . import gelu_fit
from .config import RunConfig, load_config
from .encoder import EncoderLayerSpec, TrainRun, bench, train
from .errors import ActmemError
from .gradcheck import full_grad_check
from .memory_model import EncoderConfig, memory_report


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _table(cfg: RunConfig):
    """The table at ``table_path``, else the packaged one, refitted if ``tol`` differs."""
    if cfg.table_path:
        return gelu_fit.load_table(cfg.table_path)
    table = gelu_fit.default_table()
    if cfg.tol != table.tolerance:
        table = gelu_fit.fit_table(tolerance=cfg.tol)
    return table


def cmd_fit_gelu(args) -> int:
    table = gelu_fit.fit_table(tolerance=args.tol, max_degree=args.max_degree, verify_samples=args.samples)
    if args.out:
        gelu_fit.save_table(table, args.out)
    report = gelu_fit.verify_table(table, args.samples, store=False)
    if args.format == "json":
        print(json.dumps({
            "tolerance": table.tolerance, "max_error": report.max_error, "worst_x": report.worst_x,
            "worst_branch": report.worst_branch, "samples": report.samples,
            "segments": [{"branch": s.branch, "lo": s.lo, "hi": s.hi, "variable": s.variable,
                          "degree": s.degree} for s in table.segments],
        }, indent=2))
    else:
        print(table.summary())
        print(f"max error {report.max_error:.3e} at x={report.worst_x:.6f} (m={report.worst_branch}) "
              f"over {report.samples} samples")
        if args.out:
            print(f"wrote {args.out}")
    return 0 if report.max_error <= table.tolerance else 1


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    report = full_grad_check(cfg.encoder_config(), _table(cfg), trials=args.trials, seed=args.seed)
    print(report.to_csv() if args.format == "csv" else report.to_text())
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    cfg = _run_config(args)
    spec = EncoderLayerSpec(cfg.encoder_config(), args.variant, epsilon=cfg.epsilon,
                            table=_table(cfg) if args.variant == "tempo" else None)
    run = train(TrainRun(seed=args.seed, steps=args.steps, lr=args.lr), spec)
    if args.format == "csv":
        print("step,loss,peak_bytes,transient_bytes,seconds")
        for r in run.records:
            print(f"{r.step},{r.loss:.8g},{r.peak_bytes},{r.transient_bytes},{r.seconds:.6f}")
    elif args.format == "json":
        print(json.dumps([r.__dict__ for r in run.records]))
    else:
        for r in run.records[:: max(1, len(run.records) // 10)]:
            print(f"step {r.step:5d}  loss {r.loss:.6f}  peak stash {r.peak_bytes} B")
        if run.records:
            last = run.records[-1]
            print(f"final loss {last.loss:.6f} after {len(run.records)} steps ({args.variant})")
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    spec = EncoderLayerSpec(cfg.encoder_config(), "tempo", epsilon=cfg.epsilon, table=_table(cfg))
    report = bench(spec, reps=args.reps, seed=args.seed)
    print(report.to_csv() if args.format == "csv" else report.to_text())
    return 0


def cmd_memory_report(args) -> int:
    cfg = EncoderConfig(H=args.H, A=args.A, S=args.S, B=args.B, L=args.L)
    report = memory_report(cfg)
    out = {"text": report.to_text, "csv": report.to_csv, "json": report.to_json}[args.format]()
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actmem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def fmt(p, choices=("text", "csv", "json")):
        p.add_argument("--format", choices=choices, default="text")

    p = sub.add_parser("fit-gelu", help="fit and verify the GELU backward table")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-degree", type=int, default=gelu_fit.MAX_DEGREE)
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--out")
    fmt(p, ("text", "json"))
    p.set_defaults(func=cmd_fit_gelu)

    p = sub.add_parser("gradcheck", help="finite-difference checks of operators and layers")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    fmt(p, ("text", "csv"))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="SGD on a synthetic regression task")
    p.add_argument("--variant", choices=("reference", "tempo"), default="reference")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--config")
    fmt(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="forward+backward throughput, reference vs tempo")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    fmt(p, ("text", "csv"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("memory-report", help="analytic activation memory of one layer")
    p.add_argument("--H", type=int, required=True)
    p.add_argument("--A", type=int, required=True)
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--B", type=int, default=1)
    p.add_argument("--L", type=int, default=1)
    fmt(p)
    p.set_defaults(func=cmd_memory_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ActmemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
