"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 checkpoint unreadable or
mismatched, 4 runtime fault during training or evaluation, 5 missing input
path.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, dump_checkpoint_csv, load_checkpoint
from .config import ConfigError, RunConfig, bundled_config, load_config, parse_ini
from .experiment import (SUITES, CheckpointMismatch, evaluate_policy, load_plan, restore_policy, run_comparison,
                         saliency_env, write_manifest)
from .policy import GROUP_NAMES
from .ppo import TrainingFault, train
from .saliency import analyze_policy

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_RUNTIME, EXIT_MISSING = 0, 2, 3, 4, 5


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _base_config(path) -> RunConfig:
    if path is None:
        return parse_ini(bundled_config("reference"))
    return load_config(path)


def _open_checkpoint(args):
    ckpt = load_checkpoint(args.checkpoint)
    return (ckpt, *restore_policy(ckpt, getattr(args, "group", None)))


# -- subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    run = _base_config(args.config)
    changes = {}
    if args.group is not None:
        changes["group"] = args.group
    if args.seed is not None:
        changes["seed"] = args.seed
    ppo = run.ppo
    if args.max_updates is not None:
        ppo = replace(ppo, max_updates=args.max_updates)
    if args.num_envs is not None:
        ppo = replace(ppo, num_envs=args.num_envs)
    try:
        run = replace(run, ppo=ppo, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out or f"runs/{run.group}_seed{run.seed}")
    write_manifest(out, run, "train")
    result = train(run, out, log=None if args.quiet else _log)
    _dump(result)
    return EXIT_OK


def cmd_eval(args) -> int:
    _, run, ac, params = _open_checkpoint(args)
    if args.config is not None:
        run = replace(run, evaluation=load_config(args.config).evaluation)
    if args.trials is not None:
        n = args.trials
        run = replace(run, evaluation=replace(run.evaluation, tracking_trials=n, orientation_trials=n,
                                              traversal_trials=n))
    suites = SUITES if "all" in args.suite else tuple(dict.fromkeys(args.suite))
    result = evaluate_policy(run, ac, params, suites, None if args.quiet else _log)
    result = {"checkpoint": str(args.checkpoint), "group": run.group, "seed": run.seed, **result}
    if args.out:
        out = Path(args.out)
        write_manifest(out, run, "eval", {"checkpoint": str(args.checkpoint), "suites": list(suites)})
        (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _dump(result)
    return EXIT_OK


def cmd_saliency(args) -> int:
    _, run, ac, params = _open_checkpoint(args)
    s = run.saliency
    if args.samples is not None:
        s = replace(s, samples=args.samples)
    if args.horizon is not None:
        s = replace(s, horizon=args.horizon)
    run = replace(run, saliency=s)
    report = analyze_policy(ac, params, saliency_env(run), s, metadata={"checkpoint": str(args.checkpoint)})
    out = Path(args.out or Path(args.checkpoint).parent / "saliency")
    write_manifest(out, run, "saliency", {"checkpoint": str(args.checkpoint)})
    report.write(out)
    _dump({"iota": report.iota, "estimate_iota": report.estimate_iota, "estimate_ranking": report.ranking(),
           "out": str(out)})
    return EXIT_OK


def cmd_compare(args) -> int:
    plan = load_plan(args.plan)
    out = Path(args.out or "runs/compare")
    write_manifest(out, plan.run, "compare", {"plan": Path(args.plan).read_text(), "groups": list(plan.groups),
                                              "seeds": list(plan.seeds)})
    result = run_comparison(plan, out, None if args.quiet else _log)
    _dump({"table": result["table"], "saliency": result["saliency"], "out": str(out)})
    return EXIT_OK


def _write_rows(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def plot_data(report: Path, out_dir: Path) -> list:
    """Re-emit a JSON or JSONL report as plotting-ready CSV files; returns the paths written."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report.stem
    text = report.read_text()
    written = []
    if report.suffix == ".jsonl":
        rows = [_flatten(json.loads(line)) for line in text.splitlines() if line.strip()]
        cols = list(dict.fromkeys(k for r in rows for k in r))
        path = out_dir / f"{stem}.csv"
        _write_rows(path, cols, [[r.get(c, "") for c in cols] for r in rows])
        return [path]
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{report}: not a JSON report ({exc})") from exc
    if "estimate_sample_summary" in data:
        # Saliency report: group means for a pie chart and quartiles for a box plot.
        path = out_dir / f"{stem}_groups.csv"
        est = data.get("estimate_iota", {})
        _write_rows(path, ["group", "iota", "estimate_iota"],
                    [[g, data["iota"][g], est.get(g, "")] for g in data["groups"]])
        written.append(path)
        for key in ("sample_summary", "estimate_sample_summary"):
            path = out_dir / f"{stem}_{key}.csv"
            stats = ["mean", "min", "q25", "median", "q75", "max"]
            _write_rows(path, ["group"] + stats,
                        [[g] + ["" if s[k] is None else s[k] for k in stats] for g, s in data[key].items()])
            written.append(path)
        return written
    flat = _flatten(data)
    path = out_dir / f"{stem}.csv"
    _write_rows(path, ["key", "value"], [[k, v] for k, v in flat.items() if not isinstance(v, list)])
    return [path]


def cmd_plot_data(args) -> int:
    report = Path(args.report)
    if not report.is_file():
        raise FileNotFoundError(f"report not found: {report}")
    paths = plot_data(report, Path(args.out or report.parent / "plot_data"))
    _dump({"written": [str(p) for p in paths]})
    return EXIT_OK


def cmd_dump_checkpoint(args) -> int:
    ckpt, run, ac, _ = _open_checkpoint(args)
    header = {k: v for k, v in ckpt.header.items() if k != "config_ini"}
    if args.out:
        layout = {name: (s.start, s.stop) for name, s in ac.slices.items()}
        dump_checkpoint_csv(ckpt, args.out, layout)
        header["csv"] = str(args.out)
    if args.config_out:
        Path(args.config_out).write_text(ckpt.header["config_ini"])
    _dump(header)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="estloco", description=__doc__.splitlines()[0])
    parser.add_argument("--quiet", action="store_true", help="suppress progress messages")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("train", help="train one group with one seed")
    p.add_argument("--config", help="INI run configuration (default: bundled reference)")
    p.add_argument("--group", choices=GROUP_NAMES + ("Plain",))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-updates", type=int)
    p.add_argument("--num-envs", type=int)
    p.add_argument("--out", help="output directory (default runs/<group>_seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run benchmark suites on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", action="append", choices=SUITES + ("all",), default=None,
                   help="repeatable; default all")
    p.add_argument("--group", choices=GROUP_NAMES + ("Plain",), help="fail unless the checkpoint holds this group")
    p.add_argument("--config", help="INI file whose [eval] section replaces the checkpoint's")
    p.add_argument("--trials", type=int, help="trial count for every suite")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="integrated-gradients saliency of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--horizon", type=int, help="integral resolution")
    p.add_argument("--group", choices=GROUP_NAMES + ("Plain",))
    p.add_argument("--out")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("compare", help="train and evaluate a group-by-seed plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot-data", help="re-emit a JSON/JSONL report as CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("dump-checkpoint", help="print a checkpoint header, optionally dump parameters to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group", choices=GROUP_NAMES + ("Plain",))
    p.add_argument("--out", help="CSV file for the parameters")
    p.add_argument("--config-out", help="write the embedded run configuration here")
    p.set_defaults(func=cmd_dump_checkpoint)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "suite", None) is None and args.command == "eval":
        args.suite = ["all"]
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return EXIT_MISSING
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (CheckpointMismatch, CheckpointError) as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except (TrainingFault, FloatingPointError) as exc:
        _log(f"runtime fault: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
