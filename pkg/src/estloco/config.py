"""Run configuration: nested dataclasses read from and written to INI files.

Each INI section maps onto one dataclass; keys are field names. Tuples are
comma-separated. Reward kernels are addressed as ``<term>.<alpha|sigma|beta>``
in the ``[reward]`` section.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .env import BipedEnv, Dims, EnvConfig, PointMassEnv
from .evaluation import EvalConfig
from .kernels import KernelParams
from .policy import GROUP_NAMES, ActorCritic, LossWeights, NetworkSizes, make_comparison_group
from .ppo import PpoConfig
from .rewards import TERM_NAMES
from .saliency import SaliencySettings

ENV_KINDS = ("biped", "point_mass")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class RunConfig:
    group: str = "FullEst"
    seed: int = 0
    env_kind: str = "biped"
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    sizes: NetworkSizes = field(default_factory=NetworkSizes)
    weights: LossWeights = field(default_factory=LossWeights)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    saliency: SaliencySettings = field(default_factory=SaliencySettings)

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ConfigError(f"env_kind must be one of {ENV_KINDS}, got {self.env_kind!r}")
        allowed = GROUP_NAMES + ("Plain",)
        if self.group not in allowed:
            raise ConfigError(f"unknown group {self.group!r}; expected one of {allowed}")
        if self.env_kind == "point_mass" and self.group != "Plain":
            raise ConfigError("the point-mass task has no history; use group = Plain")
        # The run seed is authoritative; mirror it into the trainer settings.
        if self.ppo.seed != self.seed:
            object.__setattr__(self, "ppo", dataclasses.replace(self.ppo, seed=self.seed))

    def make_env(self, num_envs: int, seed: int):
        if self.env_kind == "point_mass":
            return PointMassEnv(num_envs, seed, reward=self.env.reward)
        return BipedEnv(self.env, num_envs, seed)

    def make_actor_critic(self, dims: Dims | None = None) -> ActorCritic:
        spec = make_comparison_group(self.group)
        if dims is None:
            dims = PointMassEnv.dims if self.env_kind == "point_mass" else BipedEnv.dims
        return ActorCritic(spec, dims, self.sizes)

    def with_overrides(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_ini(self) -> str:
        return dump_ini(self)


# section name -> attribute path from RunConfig
SECTIONS = {
    "run": (),
    "ppo": ("ppo",),
    "network": ("sizes",),
    "loss": ("weights",),
    "env": ("env",),
    "robot": ("env", "model"),
    "simulation": ("env", "sim"),
    "reward": ("env", "reward"),
    "terrain": ("env", "terrain"),
    "curriculum": ("env", "curriculum"),
    "commands": ("env", "commands"),
    "domain": ("env", "domain"),
    "observation": ("env", "obs_scales"),
    "noise": ("env", "noise"),
    "eval": ("evaluation",),
    "saliency": ("saliency",),
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _get(root, path):
    for name in path:
        root = getattr(root, name)
    return root


def _set(root, path, value):
    if not path:
        return value
    head, rest = path[0], path[1:]
    return dataclasses.replace(root, **{head: _set(getattr(root, head), rest, value)})


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name)) and f.name != "kernels"]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


_BOOLS = {"true": True, "yes": True, "on": True, "1": True,
          "false": False, "no": False, "off": False, "0": False}


def _parse_scalar(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in _BOOLS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOLS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() == "none" else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_value(text: str, default, where: str):
    if isinstance(default, tuple):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        proto = default[0] if default else 0.0
        if isinstance(proto, int) and not isinstance(proto, bool):
            # Integer tuples (such as latency bounds) stay integers; others parse as floats.
            proto = proto if all(s.lstrip("-").isdigit() for s in items) else 0.0
        return tuple(_parse_scalar(s, proto, where) for s in items)
    return _parse_scalar(text, default, where)


def _apply_section(obj, items: dict, section: str):
    names = {f.name for f in _scalar_fields(obj)}
    changes = {}
    kernels = dict(obj.kernels) if hasattr(obj, "kernels") else None
    for key, text in items.items():
        where = f"[{section}] {key}"
        if kernels is not None and "." in key:
            term, _, attr = key.partition(".")
            if term not in kernels or attr not in ("alpha", "sigma", "beta"):
                raise ConfigError(f"{where}: unknown reward kernel setting")
            old = kernels[term]
            values = dict(old) if isinstance(old, dict) else {"alpha": old.alpha, "sigma": old.sigma,
                                                              "beta": old.beta}
            values[attr] = _parse_scalar(text, values[attr], where)
            kernels[term] = values
            continue
        if key not in names:
            raise ConfigError(f"{where}: unknown setting")
        changes[key] = _parse_value(text, getattr(obj, key), where)
    if kernels is not None:
        try:
            changes["kernels"] = {k: v if isinstance(v, KernelParams) else KernelParams(**v)
                                  for k, v in kernels.items()}
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        path = SECTIONS[section]
        updated = _apply_section(_get(cfg, path), dict(parser.items(section)), section)
        cfg = _set(cfg, path, updated)
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_ini(path.read_text(), base)


def bundled_config(name: str) -> str:
    """Text of a config shipped with the package (``reference`` or ``smoke_plan``)."""
    return resources.files("estloco").joinpath("data", f"{name}.ini").read_text()


def dump_ini(cfg: RunConfig) -> str:
    lines = []
    for section, path in SECTIONS.items():
        obj = _get(cfg, path)
        lines.append(f"[{section}]")
        for f in _scalar_fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        if section == "reward":
            for term in TERM_NAMES:
                k = obj.kernels[term]
                lines.append(f"{term}.alpha = {k.alpha!r}")
                lines.append(f"{term}.sigma = {k.sigma!r}")
                lines.append(f"{term}.beta = {k.beta}")
        lines.append("")
    return "\n".join(lines)


def point_mass_config(seed: int = 0, max_updates: int = 300) -> RunConfig:
    """Small plain actor-critic on the point-mass velocity-tracking task."""
    return RunConfig(
        group="Plain", seed=seed, env_kind="point_mass",
        ppo=PpoConfig(num_envs=64, horizon=50, max_updates=max_updates, seed=seed, learning_rate=1e-3,
                      checkpoint_every=0),
        sizes=NetworkSizes(backbone=(32, 32), encoder=(8,), decoder=(8,), critic=(32, 32), init_log_std=-1.0),
        weights=LossWeights(entropy_coef=0.0),
    )


def config_from_checkpoint(header: dict) -> RunConfig:
    """The run configuration embedded in a checkpoint header."""
    text = header.get("config_ini")
    if text is None:
        raise ConfigError("checkpoint carries no configuration")
    return parse_ini(text)
