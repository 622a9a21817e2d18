"""Integrated-gradients saliency of the policy backbone and grouped importances.

For each sampled backbone input the integrated gradient of every output is
accumulated along the straight path from the baseline; absolute values are
taken per output and summed over outputs. The resulting matrix is thresholded
at its global mean, normalized to [0, 1], summed over samples and averaged
within named input groups. The group averages, normalized to sum to one,
give the relative importance of each input category.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ESTIMATE_GROUPS = ("velocity_estimate", "foot_heightmap_estimate", "height_estimate", "implicit_latent")


@dataclass(frozen=True)
class SaliencySettings:
    horizon: int = 25           # integral resolution p
    samples: int = 4096         # N sampled timesteps
    episodes: int = 16          # parallel evaluation episodes feeding the samples
    seed: int = 0
    terrain_level: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1 or self.episodes < 1:
            raise ValueError("horizon, samples and episodes must be >= 1")


def path_jacobian_sum(vjp, x, baseline, p: int, n_out: int) -> np.ndarray:
    """``sum_k dF_j/dx`` at ``baseline + (k/p)(x - baseline)``, k = 1..p; shape (N, m, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=float), x.shape)
    if x.shape != baseline.shape:
        raise ValueError("input and baseline widths differ")
    n, width = x.shape
    alphas = np.arange(1, p + 1) / p
    points = baseline[:, None, :] + alphas[None, :, None] * (x - baseline)[:, None, :]
    flat = points.reshape(n * p, width)
    out = np.zeros((n, n_out, width))
    for j in range(n_out):
        cot = np.zeros((n * p, n_out))
        cot[:, j] = 1.0
        g = np.asarray(vjp(flat, cot), dtype=float)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient on the integration path")
        out[:, j, :] = g.reshape(n, p, width).sum(axis=1)
    return out


def signed_integrated_gradient(vjp, x, baseline, p: int, n_out: int) -> np.ndarray:
    """Per-output signed attributions (N, m, n); their sum over inputs approximates F(x) - F(baseline)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    baseline = np.broadcast_to(np.asarray(baseline, dtype=float), x.shape)
    sums = path_jacobian_sum(vjp, x, baseline, p, n_out)
    return ((x - baseline) / p)[:, None, :] * sums


def integrated_gradient(vjp, x, baseline=0.0, p: int = 25, n_out: int = 1) -> np.ndarray:
    """Saliency G (N, n): absolute per-output integrated gradients summed over outputs."""
    return np.abs(signed_integrated_gradient(vjp, x, baseline, p, n_out)).sum(axis=1)


def saliency_normalize(G):
    """Threshold at the global mean and rescale to [0, 1].

    Returns ``(epsilon, S_d, S, degenerate)``; ``degenerate`` is True when no
    entry exceeds the mean, in which case S is all zeros.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    eps = float(G.mean())
    S_d = np.maximum(G - eps, 0.0)
    peak = S_d.max()
    if peak > 0:
        return eps, S_d, S_d / peak, False
    return eps, S_d, np.zeros_like(S_d), True


def _check_partition(groups: dict, width: int) -> None:
    idx = np.concatenate([np.asarray(v, dtype=int) for v in groups.values()]) if groups else np.zeros(0, int)
    if idx.size != width or not np.array_equal(np.sort(idx), np.arange(width)):
        raise ValueError("groups must partition the input indices exactly once")
    if any(len(v) == 0 for v in groups.values()):
        raise ValueError("groups must be non-empty")


def importance(S, groups: dict):
    """Per-element importance, per-group mean importance and relative importance."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    _check_partition(groups, S.shape[1])
    I = S.sum(axis=0)
    I_group = {name: float(I[np.asarray(ix)].mean()) for name, ix in groups.items()}
    total = sum(I_group.values())
    iota = {name: (v / total if total > 0 else 0.0) for name, v in I_group.items()}
    return I, I_group, iota


def per_sample_iota(S, groups: dict) -> np.ndarray:
    """Relative importance computed from each sample's row alone (NaN rows when all zero)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    cols = np.column_stack([S[:, np.asarray(ix)].mean(axis=1) for ix in groups.values()])
    totals = cols.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, cols / totals, np.nan)


def restrict(iota: dict, names) -> dict:
    """Renormalize a relative-importance map over a subset of its groups."""
    keep = {k: v for k, v in iota.items() if k in names}
    total = sum(keep.values())
    return {k: (v / total if total > 0 else 0.0) for k, v in keep.items()}


@dataclass
class SaliencyReport:
    G: np.ndarray
    epsilon: float
    S_d: np.ndarray
    S: np.ndarray
    I: np.ndarray
    I_group: dict
    iota: dict
    sample_iota: np.ndarray            # (N, groups)
    group_names: list
    degenerate: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def estimate_iota(self) -> dict:
        return restrict(self.iota, ESTIMATE_GROUPS)

    def sample_summary(self, names=None) -> dict:
        """Mean and quartiles of per-sample relative importance, optionally over a subset of groups."""
        cols = list(range(len(self.group_names)))
        values = self.sample_iota
        if names is not None:
            cols = [i for i, g in enumerate(self.group_names) if g in names]
            sub = self.sample_iota[:, cols]
            with np.errstate(invalid="ignore", divide="ignore"):
                values = sub / sub.sum(axis=1, keepdims=True)
        else:
            values = values[:, cols]
        out = {}
        valid = ~np.isnan(values).any(axis=1)
        for j, c in enumerate(cols):
            v = values[valid, j]
            name = self.group_names[c]
            if v.size == 0:
                out[name] = {"mean": None, "q25": None, "median": None, "q75": None, "min": None, "max": None}
                continue
            out[name] = {"mean": float(v.mean()), "q25": float(np.quantile(v, 0.25)),
                         "median": float(np.median(v)), "q75": float(np.quantile(v, 0.75)),
                         "min": float(v.min()), "max": float(v.max())}
        return out

    def ranking(self, names=ESTIMATE_GROUPS) -> list:
        """Groups ordered by mean per-sample relative importance (restricted to ``names``)."""
        summary = self.sample_summary([n for n in self.group_names if n in names])
        scored = [(s["mean"] if s["mean"] is not None else -1.0, g) for g, s in summary.items()]
        return [g for _, g in sorted(scored, key=lambda t: (-t[0], t[1]))]

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "degenerate": self.degenerate,
            "groups": self.group_names,
            "I_group": self.I_group,
            "iota": self.iota,
            "estimate_iota": self.estimate_iota,
            "sample_summary": self.sample_summary(),
            "estimate_sample_summary": self.sample_summary(ESTIMATE_GROUPS),
            "estimate_ranking": self.ranking(),
            "element_importance": self.I.tolist(),
            "samples": int(self.G.shape[0]),
            "metadata": self.metadata,
        }

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "saliency_report.json", "pie": out / "saliency_group_means.csv",
                 "box": out / "saliency_per_sample.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        est = self.estimate_iota
        samples = self.sample_summary()
        with open(paths["pie"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "size", "I_group", "iota", "estimate_iota", "mean_sample_iota"])
            for g in self.group_names:
                size = self.metadata.get("group_sizes", {}).get(g, "")
                w.writerow([g, size, repr(self.I_group[g]), repr(self.iota[g]),
                            repr(est[g]) if g in est else "", samples[g]["mean"]])
        with open(paths["box"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample"] + self.group_names)
            for i, row in enumerate(self.sample_iota):
                w.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return {k: str(v) for k, v in paths.items()}


def saliency_report(vjp, X, groups: dict, p: int = 25, n_out: int = 1, baseline=0.0,
                    metadata: dict | None = None) -> SaliencyReport:
    """Run the full pipeline on sampled inputs ``X`` (N, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_partition(groups, X.shape[1])
    G = integrated_gradient(vjp, X, baseline, p, n_out)
    eps, S_d, S, degenerate = saliency_normalize(G)
    I, I_group, iota = importance(S, groups)
    meta = dict(metadata or {})
    meta.setdefault("group_sizes", {k: len(v) for k, v in groups.items()})
    return SaliencyReport(G, eps, S_d, S, I, I_group, iota, per_sample_iota(S, groups), list(groups),
                          degenerate, meta)


def collect_backbone_inputs(ac, params, env, samples: int) -> np.ndarray:
    """Deterministic on-policy rollout; returns ``samples`` backbone inputs."""
    rows, total = [], 0
    ob = env.reset()
    while total < samples:
        out = ac.act(params, ob.history, ob.obs, ob.cmd, None, stochastic=False)
        rows.append(ac.backbone_input(ob.obs, out.est, out.z, ob.cmd))
        total += rows[-1].shape[0]
        ob = env.step(out.action).obs
    return np.concatenate(rows)[:samples]


def analyze_policy(ac, params, env, settings: SaliencySettings, metadata: dict | None = None,
                   available_groups=None) -> SaliencyReport:
    """Saliency of a trained backbone on ``settings.samples`` on-policy inputs."""
    groups = ac.backbone_groups()
    if available_groups is not None:
        missing = set(available_groups) - set(groups)
        if missing:
            raise ValueError(f"policy has no input groups {sorted(missing)}")
    X = collect_backbone_inputs(ac, params, env, settings.samples)
    _, vjp = ac.backbone_jacobian_fn(params)
    meta = {"group": ac.spec.name, "horizon": settings.horizon, "samples": settings.samples,
            "episodes": settings.episodes, "seed": settings.seed}
    meta.update(metadata or {})
    return saliency_report(vjp, X, groups, settings.horizon, ac.dims.act, 0.0, meta)
