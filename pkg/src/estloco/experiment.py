"""Group-by-seed comparison runs, evaluation records and the aggregated table.

A plan is an INI file with a ``[plan]`` section; any other section is a run
configuration override applied on top of the referenced training config.

    [plan]
    groups = FullEst, Implicit
    seeds = 0, 1, 2
    config = reference          # bundled name or a path relative to the plan
    suites = tracking, orientation, traversal
    saliency = true

Each (group, seed) cell gets its own directory holding the training stream,
checkpoints, a manifest and its metrics record. A cell whose ``final.ckpt``
already exists is evaluated without retraining.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, bundled_config, config_from_checkpoint, parse_ini
from .env import BipedEnv
from .evaluation import (PolicyRunner, TemplateTrajectory, eval_orientation, eval_traversal,
                         eval_velocity_tracking)
from .policy import GROUP_NAMES
from .ppo import train
from .saliency import analyze_policy

SUITES = ("tracking", "orientation", "traversal")


class CheckpointMismatch(CheckpointError):
    """A checkpoint does not fit the requested group or network layout."""


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = resources.files("estloco")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".py")):
        h.update(name.encode())
        h.update(root.joinpath(name).read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out_dir, run: RunConfig, command: str, extra: dict | None = None) -> Path:
    """Record everything needed to regenerate the outputs in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "group": run.group, "seed": run.seed, "code_version": code_version(),
                "config_ini": run.to_ini()}
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def restore_policy(ckpt: Checkpoint, group: str | None = None):
    """Rebuild (run config, actor-critic, parameters) from a checkpoint."""
    if group is not None and ckpt.group != group:
        raise CheckpointMismatch(f"checkpoint holds group {ckpt.group!r}, expected {group!r}")
    try:
        run = config_from_checkpoint(ckpt.header)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint configuration unreadable: {exc}") from exc
    ac = run.make_actor_critic()
    if ac.n_params != ckpt.params.size:
        raise CheckpointMismatch(f"checkpoint has {ckpt.params.size} parameters, "
                                 f"group {run.group} needs {ac.n_params}")
    return run, ac, ckpt.params


# -- plans --------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    groups: tuple
    seeds: tuple
    run: RunConfig = field(default_factory=RunConfig)
    suites: tuple = SUITES
    saliency: bool = True

    def __post_init__(self):
        if not self.groups or not self.seeds:
            raise ConfigError("a plan needs at least one group and one seed")
        unknown = [g for g in self.groups if g not in GROUP_NAMES]
        if unknown:
            raise ConfigError(f"unknown groups {unknown}; expected names from {GROUP_NAMES}")
        bad = [s for s in self.suites if s not in SUITES]
        if bad:
            raise ConfigError(f"unknown evaluation suites {bad}")
        if len(set(self.groups)) != len(self.groups) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("groups and seeds must not repeat")

    def cell_config(self, group: str, seed: int) -> RunConfig:
        return replace(self.run, group=group, seed=seed)


def _split(text: str) -> list:
    return [t for t in (s.strip() for s in text.split(",")) if t]


def parse_plan(text: str, base_dir=None) -> ExperimentPlan:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed plan: {exc}") from exc
    if not parser.has_section("plan"):
        raise ConfigError("plan file has no [plan] section")
    p = dict(parser.items("plan"))
    known = {"groups", "seeds", "config", "suites", "saliency"}
    extra = set(p) - known
    if extra:
        raise ConfigError(f"[plan]: unknown settings {sorted(extra)}")
    ref = p.get("config", "reference").strip()
    if ref.endswith(".ini") or "/" in ref:
        path = Path(base_dir or ".") / ref
        if not path.is_file():
            raise FileNotFoundError(f"training config not found: {path}")
        base = parse_ini(path.read_text())
    else:
        try:
            base = parse_ini(bundled_config(ref))
        except FileNotFoundError as exc:
            raise ConfigError(f"[plan] config: no bundled config named {ref!r}") from exc
    overrides = configparser.ConfigParser(interpolation=None)
    overrides.optionxform = str
    for section in parser.sections():
        if section != "plan":
            overrides[section] = dict(parser.items(section))
    lines = []
    for section in overrides.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in overrides.items(section))
    run = parse_ini("\n".join(lines), base)
    try:
        seeds = tuple(int(s) for s in _split(p.get("seeds", "0")))
    except ValueError as exc:
        raise ConfigError(f"[plan] seeds: {exc}") from exc
    saliency = p.get("saliency", "true").strip().lower()
    if saliency not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
        raise ConfigError(f"[plan] saliency: not a boolean: {saliency!r}")
    return ExperimentPlan(groups=tuple(_split(p.get("groups", ""))), seeds=seeds, run=run,
                          suites=tuple(_split(p.get("suites", ",".join(SUITES)))),
                          saliency=saliency in ("true", "yes", "1", "on"))


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"plan file not found: {path}")
    return parse_plan(path.read_text(), path.parent)


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    group: str
    seed: int
    r_final: float | None
    rms_dv: float | None = None
    rms_dg: float | None = None
    tsr: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("rms_dv", "rms_dg"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be non-negative")
        if any(not 0.0 <= v <= 1.0 for v in self.tsr.values()):
            raise ValueError("traversal success rates must lie in [0, 1]")

    def metrics(self) -> dict:
        """Flat metric-name -> value map (the table rows)."""
        out = {"r_final": self.r_final, "rms_dv": self.rms_dv, "rms_dg": self.rms_dg}
        out.update({f"tsr_{k}": v for k, v in sorted(self.tsr.items())})
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(d["group"], int(d["seed"]), d.get("r_final"), d.get("rms_dv"), d.get("rms_dg"),
                   dict(d.get("tsr", {})))


def aggregate(records) -> dict:
    """Per-group mean and standard deviation of every metric over seeds.

    Returns ``{metric: {group: {"mean", "std", "n"}}}``; missing values are
    skipped, and a metric absent for a group has ``n = 0`` and no mean.
    """
    records = list(records)
    groups = list(dict.fromkeys(r.group for r in records))
    metrics = list(dict.fromkeys(k for r in records for k in r.metrics()))
    table = {}
    for m in metrics:
        row = {}
        for g in groups:
            vals = [r.metrics().get(m) for r in records if r.group == g]
            vals = [float(v) for v in vals if v is not None and math.isfinite(v)]
            row[g] = {"mean": float(np.mean(vals)) if vals else None,
                      "std": float(np.std(vals)) if vals else None, "n": len(vals)}
        table[m] = row
    return table


def write_table(table: dict, path, stat: str = "mean") -> None:
    """Metrics as rows, groups as columns."""
    groups = list(dict.fromkeys(g for row in table.values() for g in row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + groups)
        for m, row in table.items():
            cells = [row.get(g, {}).get(stat) for g in groups]
            w.writerow([m] + ["" if v is None else repr(v) for v in cells])


def write_records(records, out_dir) -> None:
    out = Path(out_dir)
    records = list(records)
    with open(out / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    names = list(dict.fromkeys(k for r in records for k in r.metrics()))
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "seed"] + names)
        for r in records:
            m = r.metrics()
            w.writerow([r.group, r.seed] + ["" if m.get(k) is None else repr(m[k]) for k in names])


def read_records(path) -> list:
    with open(path) as fh:
        return [MetricsRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- evaluation ---------------------------------------------------------------

def evaluate_policy(run: RunConfig, ac, params, suites=SUITES, log=None) -> dict:
    """Run the requested benchmark suites; returns the metrics-record fields."""
    if run.env_kind != "biped":
        raise ConfigError("the evaluation suites need the biped environment")
    policy = PolicyRunner(ac, params)
    ecfg, env_cfg = run.evaluation, run.env
    out: dict = {}
    if "tracking" in suites:
        out["rms_dv"] = eval_velocity_tracking(policy, env_cfg, ecfg)
        _say(log, f"  tracking RMS dv = {out['rms_dv']:.4f}")
    if "orientation" in suites:
        out["rms_dg"] = eval_orientation(policy, env_cfg, ecfg, TemplateTrajectory())
        _say(log, f"  orientation RMS dg = {out['rms_dg']:.4f}")
    if "traversal" in suites:
        out["tsr"] = {kind: eval_traversal(policy, env_cfg, ecfg, kind) for kind in ecfg.traversal_kinds}
        _say(log, f"  traversal {out['tsr']}")
    return out


def saliency_env(run: RunConfig):
    """Environment feeding saliency samples: training randomization, fixed terrain level."""
    s = run.saliency
    cfg = replace(run.env, use_curriculum=False, start_level=s.terrain_level)
    return BipedEnv(cfg, s.episodes, s.seed)


def _say(log, msg):
    if log:
        log(msg)


def run_cell(plan: ExperimentPlan, group: str, seed: int, out_dir, log=None) -> MetricsRecord:
    cell = Path(out_dir) / f"{group}_seed{seed}"
    run = plan.cell_config(group, seed)
    ckpt_path = cell / "final.ckpt"
    if ckpt_path.is_file():
        _say(log, f"[{group} seed {seed}] loading {ckpt_path}")
        ckpt = load_checkpoint(ckpt_path)
        run, ac, params = restore_policy(ckpt, group)
    else:
        _say(log, f"[{group} seed {seed}] training {run.ppo.max_updates} updates")
        write_manifest(cell, run, "train")
        train(run, cell, log=log)
        ckpt = load_checkpoint(ckpt_path)
        run, ac, params = restore_policy(ckpt, group)
    # Benchmarks follow the plan, whatever the checkpoint was trained with.
    run = replace(run, evaluation=plan.run.evaluation, saliency=plan.run.saliency)
    fields = evaluate_policy(run, ac, params, plan.suites, log)
    record = MetricsRecord(group, seed, ckpt.header.get("r_final"), fields.get("rms_dv"),
                           fields.get("rms_dg"), fields.get("tsr", {}))
    (cell / "record.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    if plan.saliency and group == "FullEst":
        _say(log, f"[{group} seed {seed}] saliency on {run.saliency.samples} samples")
        report = analyze_policy(ac, params, saliency_env(run), run.saliency,
                                metadata={"checkpoint": str(ckpt_path)})
        report.write(cell / "saliency")
    return record


def run_comparison(plan: ExperimentPlan, out_dir, log=None) -> dict:
    """Train or load every cell, evaluate it, and write the records and tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [run_cell(plan, g, s, out, log) for g in plan.groups for s in plan.seeds]
    write_records(records, out)
    table = aggregate(records)
    write_table(table, out / "table.csv", "mean")
    write_table(table, out / "table_std.csv", "std")
    summary = saliency_summary(out, plan)
    if summary:
        (out / "saliency_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"records": records, "table": table, "saliency": summary}


def saliency_summary(out_dir, plan: ExperimentPlan) -> dict:
    """Estimation-group ranking of every FullEst cell that has a saliency report."""
    out = {}
    for seed in plan.seeds:
        path = Path(out_dir) / f"FullEst_seed{seed}" / "saliency" / "saliency_report.json"
        if path.is_file():
            rep = json.loads(path.read_text())
            out[str(seed)] = {"ranking": rep["estimate_ranking"], "estimate_iota": rep["estimate_iota"],
                              "mean_sample_iota": {g: s["mean"] for g, s in
                                                   rep["estimate_sample_summary"].items()}}
    return out
