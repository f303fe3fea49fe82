"""Command-line surface: generate, compare, gradcheck, pack, moesim, flow.

Each verb takes --config PATH --seed N --out PATH, appends one JSON-lines
report per run to --out, and prints a short human summary. Exit codes:
0 success, 1 runtime fault, 2 config/schema violation.
"""

from __future__ import annotations

import argparse
import sys

from blockdlm import bench
from blockdlm.config import ConfigError, load_config
from blockdlm.reports import append_report, compare_reports, make_report, read_reports


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default="runs.jsonl", help="report sink (JSON lines, appended)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockdlm",
        description="Block-diffusion decoding, training objectives and acceleration benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    gen_parser = sub.add_parser("generate")
    _add_common(gen_parser)
    gen_parser.add_argument(
        "--seeds", default=None, help="comma-separated seed list (overrides --seed)"
    )
    gen_parser.add_argument(
        "--jobs", type=int, default=1, help="parallel workers for independent seeds"
    )
    for command in ("gradcheck", "pack", "moesim", "flow"):
        _add_common(sub.add_parser(command))
    cmp_parser = sub.add_parser("compare")
    _add_common(cmp_parser)
    cmp_parser.add_argument("--a", default=None, help="baseline report file (overrides config)")
    cmp_parser.add_argument("--b", default=None, help="candidate report file (overrides config)")
    return parser


def _pick_report(path: str, mode: str | None = None) -> dict:
    reports = [r for r in read_reports(path) if "tokens" in r]
    if mode is not None:
        reports = [r for r in reports if r.get("mode") == mode]
    if not reports:
        raise ValueError(f"no generate reports in {path}")
    return reports[-1]


def _run_compare(config: dict, args) -> dict:
    path_a = args.a or config["compare"]["report_a"]
    path_b = args.b or config["compare"]["report_b"]
    if not path_a or not path_b:
        raise ConfigError("compare requires compare.report_a/report_b (or --a/--b)")
    return compare_reports(_pick_report(path_a), _pick_report(path_b))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    bench.configure_determinism()
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else config["seed"]

        if args.command == "compare":
            payload = _run_compare(config, args)
            report = make_report("compare", config, seed, payload)
            append_report(args.out, report)
            print(
                f"compare: agreement={payload['token_agreement']:.4f} "
                f"nfe_ratio={payload['nfe_ratio']} attended_ratio={payload['attended_ratio']}"
            )
            return 0

        if args.command == "generate" and args.seeds is not None:
            seeds = [int(v) for v in args.seeds.split(",") if v.strip() != ""]
            results = bench.run_generate_multi(config, seeds, jobs=args.jobs)
            for run_seed, runs in results:
                for p in runs:
                    append_report(args.out, make_report("generate", config, run_seed, p))
                    print(
                        f"generate[{p['mode']} seed={run_seed}]: nfe={p['nfe']} "
                        f"attended={p['attended']}"
                    )
            return 0

        runner = bench.RUNNERS[args.command]
        payload = runner(config, seed)
        payloads = payload if isinstance(payload, list) else [payload]
        for p in payloads:
            report = make_report(args.command, config, seed, p)
            append_report(args.out, report)

        if args.command == "generate":
            for p in payloads:
                print(
                    f"generate[{p['mode']}]: nfe={p['nfe']} attended={p['attended']} "
                    f"steps/block={p['per_block_steps']}"
                )
        elif args.command == "gradcheck":
            for row in payloads[0]["rows"]:
                status = "pass" if row["ok"] else "FAIL"
                print(
                    f"gradcheck {row['loss']:<16} params={row['n_params']:<5} "
                    f"max_rel_err={row['max_rel_err']:.3e} {status}"
                )
            if not payloads[0]["all_ok"]:
                return 1
        elif args.command == "moesim":
            p = payloads[0]
            print(
                f"moesim: gap {p['initial_gap']:.4f} -> {p['final_gap']:.4f}, "
                f"min final load {p['min_final_load']:.4f}"
            )
        elif args.command == "pack":
            p = payloads[0]
            print(
                f"pack: {p['n_samples']} samples -> {p['n_rows']} rows, "
                f"padding {p['total_padding']} (naive {p['naive_padding']}), "
                f"utilization {p['utilization']:.3f}"
            )
        elif args.command == "flow":
            p = payloads[0]
            for c in p["per_code"]:
                print(
                    f"flow code {c['code']}: ED={c['energy_distance']:.6f} "
                    f"self={c['teacher_self_distance']:.6f} ratio={c['ratio']:.2f}"
                )
            if not p["all_within_2x"]:
                return 1
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime fault
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
