"""Command-line front end.

Commands: gen-synthetic, stress-test, reinforce, evaluate, blend, report.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .types import CfkitError

ENV_RUN_ROOT = "CFKIT_RUN_ROOT"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfkit",
        description=(
            "Stress-test image classifiers with caption-guided counterfactual "
            "images and reinforce them by head fine-tuning with weight blending."
        ),
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command")

    def add_config_args(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--jobs", type=int, default=None, help="worker threads for per-item work")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                       help="dotted config overrides, e.g. train.alpha=0.5")

    p = sub.add_parser("gen-synthetic", help="generate the planted-bias synthetic dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=16)
    p.add_argument("--n-focus", type=int, default=4)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--n-pretrain-per-class", type=int, default=40)

    p = sub.add_parser("stress-test", help="stage 1: generate counterfactuals and a weakness report")
    add_config_args(p)

    p = sub.add_parser("reinforce", help="stage 2: fine-tune on a stress run's counterfactuals")
    p.add_argument("--stress-run", required=True, help="run id of the completed stress test")
    add_config_args(p)

    p = sub.add_parser("evaluate", help="weakness report for two labeled manifests")
    p.add_argument("--t", required=True, help="original-set manifest (JSONL)")
    p.add_argument("--t-prime", required=True, help="counterfactual-set manifest (JSONL)")
    p.add_argument("--out", help="write report JSON here instead of stdout")
    add_config_args(p)

    p = sub.add_parser("blend", help="interpolate two parameter directories")
    p.add_argument("--theta0", required=True)
    p.add_argument("--theta1", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scope", choices=["head", "all"], default="head")

    p = sub.add_parser("report", help="render a stored report")
    p.add_argument("path", help="report JSON file")
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")

    return parser


def _load_config(args) -> dict:
    from .pipeline import apply_dotted_overrides, load_config

    config = load_config(args.config)
    if getattr(args, "overrides", None):
        config = apply_dotted_overrides(config, args.overrides)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        config["stress"]["jobs"] = args.jobs
    env_root = os.environ.get(ENV_RUN_ROOT)
    if env_root and "run_root" not in _explicit_keys(args):
        config.setdefault("run_root", env_root)
        if config["run_root"] == "runs":
            config["run_root"] = env_root
    return config


def _explicit_keys(args) -> set[str]:
    keys = set()
    for pair in getattr(args, "overrides", None) or []:
        if "=" in pair:
            keys.add(pair.split("=", 1)[0])
    return keys


def render_report(report_path: str | Path, format: str = "table") -> str:
    """Render a stored weakness or comparison report as table, csv or json."""
    from .evaluation import EvalReport
    from .reinforcement import ComparisonReport

    data = json.loads(Path(report_path).read_text())
    if "arms" in data:
        comparison = ComparisonReport.from_dict(data)
        if format == "json":
            return comparison.to_json()
        if format == "csv":
            return comparison.to_csv()
        arms = comparison.arms
        header = ["Class"] + [a.capitalize() for a in arms]
        rows = [[cls] + [f"{comparison.per_class[cls][a]:.2f}" for a in arms]
                for cls in sorted(comparison.per_class)]
        rows.append(["(overall)"] + [f"{comparison.overall[a]:.2f}" for a in arms])
        title = f"Acc@5 on {comparison.set_name} — model {comparison.model_name}"
        return _format_table(title, header, rows)
    report = EvalReport.from_dict(data)
    if format == "json":
        return report.to_json()
    if format == "csv":
        return report.to_csv()
    header = ["Class", "Acc@5 T", "Acc@5 T'", "Delta"]
    rows = []
    for cls in report.class_order:
        row = report.per_class[cls]
        rows.append([cls, f"{row['acc5_T']:.2f}", f"{row['acc5_Tprime']:.2f}",
                     f"{row['delta']:.2f}"])
    title = f"Weakness identification — model {report.model_name}"
    out = _format_table(title, header, rows)
    if report.per_factor:
        factor_rows = [[f, f"{d:.2f}"] for f, d in sorted(report.per_factor.items())]
        out += "\n" + _format_table("Per-factor delta (extension)", ["Factor", "Delta"], factor_rows)
    return out


def _format_table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(header[i])), *(len(str(r[i])) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    lines = [title]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; map the latter to 1.
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage()
        return 1

    try:
        if args.command == "gen-synthetic":
            from .backends.synthetic import generate_dataset

            summary = generate_dataset(
                args.out, seed=args.seed, n_classes=args.n_classes, n_focus=args.n_focus,
                n_per_class=args.n_per_class, n_pretrain_per_class=args.n_pretrain_per_class,
            )
            print(json.dumps(summary, indent=2, sort_keys=True))
            return 0

        if args.command == "stress-test":
            from .pipeline import run_stress_test

            config = _load_config(args)
            _, report, manifest = run_stress_test(config)
            print(f"stress-test run {manifest.run_id}: "
                  f"{manifest.counts['T_prime']} counterfactuals from {manifest.counts['T']} images")
            print(f"report: {manifest.artifact_paths['report']}")
            return 0

        if args.command == "reinforce":
            from .pipeline import run_reinforcement

            config = _load_config(args)
            manifest = run_reinforcement(args.stress_run, config)
            print(f"reinforce run {manifest.run_id}: "
                  f"{manifest.counts['epochs_run']} epochs on {manifest.counts['cf_train']} counterfactuals")
            for name, path in manifest.artifact_paths["comparisons"].items():
                print(f"comparison [{name}]: {path}")
            return 0

        if args.command == "evaluate":
            from .backends import load_world
            from .evaluation import build_weakness_report, load_labeled_set
            from .pipeline import build_backends, pretrain_classifier

            config = _load_config(args)
            world = load_world(config["dataset_dir"])
            backends = build_backends(config, world)
            pretrain_classifier(backends["classifier"], config, world)
            T = load_labeled_set(args.t, "T", list(world.classes))
            T_prime = load_labeled_set(args.t_prime, "T_prime", list(world.classes))
            report = build_weakness_report(T, T_prime, {}, backends["classifier"])
            text = report.to_json()
            if args.out:
                Path(args.out).write_text(text)
                print(f"report: {args.out}")
            else:
                print(text)
            return 0

        if args.command == "blend":
            from .params import load_parameters, save_parameters
            from .reinforcement import blend_parameters

            theta0 = load_parameters(args.theta0)
            theta1 = load_parameters(args.theta1)
            scope = set(theta0.head_groups) if args.scope == "head" else set(theta0.groups)
            blended = blend_parameters(theta0, theta1, args.alpha, scope)
            save_parameters(blended, args.out)
            print(f"blended parameters written to {args.out}")
            return 0

        if args.command == "report":
            print(render_report(args.path, args.format), end="")
            return 0

        parser.print_usage()
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except CfkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line diagnostics per contract
        if os.environ.get("CFKIT_DEBUG"):
            raise
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
