"""Command-line interface.

Subcommands: ``run <config>``, ``compare <config> --modes ...``,
``sweep <config> --vary key=v1,v2,...``, ``verify``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 protocol fault or simulation budget exhaustion, 4 divergence
(non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import sys

from ..collective import ProtocolFault
from ..netsim import BudgetExceededError
from ..optim import MODES, ConfigError, DivergenceError
from .config import load_config
from .runner import (
    format_compare_table,
    resolve_out_dir,
    run_compare,
    run_sweep,
    execute_run,
)
from .verify import run_verification

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_DIVERGENCE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wagma",
        description="Group model averaging SGD over a simulated network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one training run")
    run_p.add_argument("config", help="path to a JSON run config")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="override the output directory")

    cmp_p = sub.add_parser("compare", help="run several modes with a shared setup")
    cmp_p.add_argument("config")
    cmp_p.add_argument("--modes", required=True,
                       help=f"comma-separated subset of {','.join(MODES)}")
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--out", default=None)

    sweep_p = sub.add_parser("sweep", help="run the config across parameter values")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--vary", required=True, help="key=v1,v2,... (dotted keys allowed)")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--out", default=None)

    sub.add_parser("verify", help="run the invariant verification suite")
    return parser


def _load(args) -> "RunConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = resolve_out_dir(cfg.out_dir, args.out)
    artifacts = execute_run(cfg, out)
    final = artifacts.result.final
    print(f"wrote {artifacts.metrics_path} ({len(artifacts.result.records)} rows)")
    print(f"wrote {artifacts.manifest_path}")
    print(
        f"final: loss={final.loss_mu:.6e} grad_norm_sq={final.grad_norm_sq_mu:.6e} "
        f"sim_time={artifacts.result.final_time_ms:.2f} ms sha256={artifacts.metrics_sha256[:12]}"
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = _load(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes list is empty")
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    out = resolve_out_dir(cfg.out_dir, args.out)
    rows = run_compare(cfg, modes, out)
    print(format_compare_table(rows))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    out = resolve_out_dir(cfg.out_dir, args.out)
    try:
        rows = run_sweep(cfg, args.vary, out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for r in rows:
        print(
            f"{r['key']}={r['value']}: loss={r['final_loss']:.6e} "
            f"grad_norm_sq={r['grad_norm_sq']:.6e} sim_time={r['sim_time_ms']:.2f} ms -> {r['out']}"
        )
    return EXIT_OK


def _cmd_verify(_args) -> int:
    results = run_verification()
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name}: {res.detail}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed}/{len(results)} checks failed")
        return EXIT_VERIFY_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "sweep": _cmd_sweep,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolFault, BudgetExceededError) as exc:
        print(f"protocol fault: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
