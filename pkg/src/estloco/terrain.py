"""One-dimensional heightfield terrains and the difficulty curriculum."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

TERRAIN_KINDS = ("flat", "slope", "stairs", "rough_profiles")


@dataclass(frozen=True)
class TerrainSpec:
    """Geometry shared by every generated terrain."""

    x_min: float = -6.0
    x_max: float = 14.0
    spacing: float = 0.02
    course_start: float = 1.0
    course_length: float = 5.0
    max_level: int = 9
    max_slope_deg: float = 25.0
    max_stair_rise: float = 0.10
    stair_count: int = 3
    stair_tread: float = 0.30
    max_profile_height: float = 0.04

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("terrain spacing must be positive")
        if self.max_level < 0:
            raise ValueError("max_level must be >= 0")

    @property
    def course_end(self) -> float:
        return self.course_start + self.course_length


@dataclass
class TerrainMap:
    kind: str
    heights: np.ndarray
    spacing: float
    x0: float
    friction: float = 1.0
    level: int = 0

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("terrain heights must be finite")
        if not self.spacing > 0:
            raise ValueError("terrain spacing must be positive")

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + self.spacing * np.arange(self.heights.size)

    def height_slope(self, x):
        """Linear interpolation of the heightfield and its cell slope.

        Positions beyond the grid see the edge height with zero slope.
        """
        return _interp_single(self.heights, self.x0, self.spacing, np.asarray(x, dtype=float))

    def height(self, x):
        return self.height_slope(x)[0]


def _interp_single(heights, x0, dx, x):
    n = heights.size
    u = (x - x0) / dx
    i = np.clip(np.floor(u).astype(int), 0, n - 2)
    frac = u - i
    inside = (u >= 0) & (u <= n - 1)
    frac = np.clip(frac, 0.0, 1.0)
    h0, h1 = heights[i], heights[i + 1]
    h = h0 + frac * (h1 - h0)
    slope = np.where(inside, (h1 - h0) / dx, 0.0)
    return h, slope


def _interp(heights, x0, dx, x):
    """Row-wise interpolation: ``heights`` (B, G), ``x`` (B, ...)."""
    n = heights.shape[1]
    u = (x - x0) / dx
    i = np.clip(np.floor(u).astype(int), 0, n - 2)
    frac = np.clip(u - i, 0.0, 1.0)
    inside = (u >= 0) & (u <= n - 1)
    rows = np.arange(heights.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
    h0 = heights[rows, i]
    h1 = heights[rows, i + 1]
    h = h0 + frac * (h1 - h0)
    slope = np.where(inside, (h1 - h0) / dx, 0.0)
    return h, slope


@dataclass
class TerrainBatch:
    """One terrain per robot, all sharing a grid."""

    heights: np.ndarray   # (B, G)
    x0: float
    spacing: float
    friction: np.ndarray  # (B,)
    kinds: list = field(default_factory=list)
    levels: np.ndarray | None = None

    def height_slope(self, x):
        x = np.asarray(x, dtype=float)
        return _interp(self.heights, self.x0, self.spacing, x)

    @classmethod
    def from_maps(cls, maps) -> "TerrainBatch":
        first = maps[0]
        return cls(
            heights=np.stack([m.heights for m in maps]),
            x0=first.x0,
            spacing=first.spacing,
            friction=np.array([m.friction for m in maps]),
            kinds=[m.kind for m in maps],
            levels=np.array([m.level for m in maps]),
        )

    def take(self, idx) -> "TerrainBatch":
        idx = np.atleast_1d(idx)
        return TerrainBatch(self.heights[idx], self.x0, self.spacing, self.friction[idx],
                            [self.kinds[i] for i in idx], self.levels[idx])

    def assign(self, idx, terrain: TerrainMap) -> None:
        self.heights[idx] = terrain.heights
        self.friction[idx] = terrain.friction
        self.kinds[idx] = terrain.kind
        self.levels[idx] = terrain.level


def flat_terrain(spec: TerrainSpec | None = None, friction: float = 1.0) -> TerrainMap:
    spec = spec or TerrainSpec()
    n = int(round((spec.x_max - spec.x_min) / spec.spacing)) + 1
    return TerrainMap("flat", np.zeros(n), spec.spacing, spec.x_min, friction, 0)


def generate_terrain(kind: str, level: int, seed: int, spec: TerrainSpec | None = None) -> TerrainMap:
    """Heightfield whose difficulty grows linearly with ``level``.

    Features occupy ``[course_start, course_end]``; the rest is flat at the
    height where the course leaves off on each side.
    """
    spec = spec or TerrainSpec()
    if kind not in TERRAIN_KINDS:
        raise ValueError(f"unknown terrain kind {kind!r}; expected one of {TERRAIN_KINDS}")
    if not 0 <= level <= spec.max_level:
        raise ValueError(f"level {level} outside [0, {spec.max_level}]")
    terrain = flat_terrain(spec)
    terrain.kind, terrain.level = kind, int(level)
    difficulty = level / spec.max_level if spec.max_level else 1.0
    xs = terrain.xs
    a, b = spec.course_start, spec.course_end
    h = terrain.heights

    if kind == "slope":
        grade = np.tan(np.deg2rad(spec.max_slope_deg * difficulty))
        # Symmetric ridge: up for 40% of the course, a plateau, then down.
        run = 0.4 * spec.course_length
        up = np.clip(xs - a, 0.0, run)
        down = np.clip(xs - (b - run), 0.0, run)
        h[:] = grade * (up - down)
    elif kind == "stairs":
        rise = spec.max_stair_rise * difficulty
        tread = spec.stair_tread
        descent = b - spec.stair_count * tread
        steps_up = np.clip(np.floor((xs - a) / tread) + 1, 0, spec.stair_count)
        steps_up[xs < a] = 0
        steps_down = np.clip(np.floor((xs - descent) / tread) + 1, 0, spec.stair_count)
        steps_down[xs < descent] = 0
        h[:] = rise * (steps_up - steps_down)
    elif kind == "rough_profiles":
        rng = np.random.default_rng([seed, level])
        height = spec.max_profile_height * difficulty
        x = a
        while True:
            x += rng.uniform(0.15, 0.45)
            width = rng.uniform(0.04, 0.10)
            if x + width > b:
                break
            sel = (xs >= x) & (xs < x + width)
            h[sel] = height * rng.uniform(0.5, 1.0)
            x += width
    return terrain


def terrain_bank(spec: TerrainSpec, kinds=TERRAIN_KINDS, seed: int = 0) -> dict:
    """All (kind, level) terrains, generated once and shared read-only."""
    return {(kind, level): generate_terrain(kind, level, seed, spec)
            for kind in kinds for level in range(spec.max_level + 1)}


def export_terrain_csv(bank: dict, path) -> None:
    keys = sorted(bank)
    first = bank[keys[0]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x"] + [f"{kind}_{level}" for kind, level in keys])
        for j, x in enumerate(first.xs):
            writer.writerow([f"{x:.4f}"] + [f"{bank[k].heights[j]:.6f}" for k in keys])


@dataclass(frozen=True)
class CurriculumConfig:
    promote_fraction: float = 0.5   # of the course length
    demote_fraction: float = 0.4    # of the maximum episode length


@dataclass
class CurriculumState:
    levels: np.ndarray
    max_level: int
    promote_distance: float
    survive_time: float

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=int)
        if np.any(self.levels < 0) or np.any(self.levels > self.max_level):
            raise ValueError("curriculum level outside [0, max_level]")


def update_curriculum(cur: CurriculumState, episode_distance, episode_time, idx=None) -> CurriculumState:
    """Promote on long traversals, demote on short survival, clamp to the level range."""
    idx = np.arange(cur.levels.size) if idx is None else np.asarray(idx)
    levels = cur.levels.copy()
    dist = np.broadcast_to(np.asarray(episode_distance, float), idx.shape)
    time = np.broadcast_to(np.asarray(episode_time, float), idx.shape)
    promote = dist >= cur.promote_distance
    demote = (~promote) & (time < cur.survive_time)
    levels[idx] = np.clip(levels[idx] + promote.astype(int) - demote.astype(int), 0, cur.max_level)
    return CurriculumState(levels, cur.max_level, cur.promote_distance, cur.survive_time)
