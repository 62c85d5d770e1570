"""Equal-mass elastic billiards for the SimB family of tables.

Units are pixels and frames. A frame is integrated with ``SUBSTEPS`` equal
sub-steps; after each sub-step, wall contacts are resolved first and then ball
pairs in ascending ``(i, j)`` order, repeated until nothing penetrates.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

N_BALLS = 3
SUBSTEPS = 4
MAX_RESOLVE_ITERS = 8
MAX_PLACEMENT_TRIES = 10_000

PLAIN_SIZE = (64, 64)
WIDE_SIZE = (192, 96)
BASE_RADIUS = 2.0
WIDE_RADIUS_SCALE = 1.5
SPEED_RANGE = (1.0, 3.0)
BORDER_RANGE = (0, 15)
BAR_CENTER_RANGE = (64, 128)
BAR_WIDTH = 5


class PlacementError(RuntimeError):
    """Raised when three balls cannot be placed in the free space."""


class EnvKind(str, enum.Enum):
    PLAIN = "plain"
    BORDER = "border"
    SPLIT = "split"


class Vec2(NamedTuple):
    x: float
    y: float


class BallState(NamedTuple):
    position: Vec2
    velocity: Vec2
    radius: float


@dataclass(frozen=True)
class EnvContext:
    kind: EnvKind
    width: int
    height: int
    border_size: int = 0
    bar_center_x: int | None = None
    bar_width: int = BAR_WIDTH

    def __post_init__(self):
        kind = EnvKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is EnvKind.PLAIN:
            if (self.width, self.height) != PLAIN_SIZE or self.border_size != 0:
                raise ValueError(f"plain env must be 64x64 without border, got {self}")
        else:
            if (self.width, self.height) != WIDE_SIZE:
                raise ValueError(f"{kind.value} env must be 192x96, got {self.width}x{self.height}")
            lo, hi = BORDER_RANGE
            if not lo <= self.border_size <= hi:
                raise ValueError(f"border_size {self.border_size} outside [{lo}, {hi}]")
        if kind is EnvKind.SPLIT:
            lo, hi = BAR_CENTER_RANGE
            if self.bar_center_x is None or not lo <= self.bar_center_x <= hi:
                raise ValueError(f"bar_center_x {self.bar_center_x} outside [{lo}, {hi}]")
            if self.bar_width != BAR_WIDTH:
                raise ValueError(f"bar_width must be {BAR_WIDTH}")
        elif self.bar_center_x is not None:
            raise ValueError("bar_center_x only applies to split envs")

    @classmethod
    def plain(cls) -> EnvContext:
        return cls(EnvKind.PLAIN, *PLAIN_SIZE)

    @classmethod
    def border(cls, border_size: int) -> EnvContext:
        return cls(EnvKind.BORDER, *WIDE_SIZE, border_size=border_size)

    @classmethod
    def split(cls, border_size: int, bar_center_x: int) -> EnvContext:
        return cls(EnvKind.SPLIT, *WIDE_SIZE, border_size=border_size, bar_center_x=bar_center_x)

    @property
    def ball_radius(self) -> float:
        if self.kind is EnvKind.PLAIN:
            return BASE_RADIUS
        return BASE_RADIUS * WIDE_RADIUS_SCALE

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """Free-space rectangle ``(x_min, y_min, x_max, y_max)`` inside the border."""
        b = float(self.border_size)
        return b, b, self.width - b, self.height - b

    @property
    def bar_interval(self) -> tuple[float, float] | None:
        if self.kind is not EnvKind.SPLIT:
            return None
        half = self.bar_width / 2
        return self.bar_center_x - half, self.bar_center_x + half

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "width": self.width,
            "height": self.height,
            "border_size": self.border_size,
            "bar_center_x": self.bar_center_x,
            "bar_width": self.bar_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EnvContext:
        return cls(
            EnvKind(d["kind"]),
            int(d["width"]),
            int(d["height"]),
            border_size=int(d.get("border_size", 0)),
            bar_center_x=None if d.get("bar_center_x") is None else int(d["bar_center_x"]),
            bar_width=int(d.get("bar_width", BAR_WIDTH)),
        )


def sample_env(kind: EnvKind | str, rng: np.random.Generator) -> EnvContext:
    kind = EnvKind(kind)
    if kind is EnvKind.PLAIN:
        return EnvContext.plain()
    border = int(rng.integers(BORDER_RANGE[0], BORDER_RANGE[1] + 1))
    if kind is EnvKind.BORDER:
        return EnvContext.border(border)
    bar = int(rng.integers(BAR_CENTER_RANGE[0], BAR_CENTER_RANGE[1] + 1))
    return EnvContext.split(border, bar)


@dataclass(frozen=True)
class WorldState:
    balls: tuple[BallState, ...]
    env: EnvContext
    frame_index: int = 0

    @property
    def positions(self) -> np.ndarray:
        return np.array([b.position for b in self.balls], dtype=np.float64)

    @property
    def velocities(self) -> np.ndarray:
        return np.array([b.velocity for b in self.balls], dtype=np.float64)

    @property
    def radii(self) -> np.ndarray:
        return np.array([b.radius for b in self.balls], dtype=np.float64)

    def kinetic_energy(self) -> float:
        # unit mass per ball
        return 0.5 * float(np.sum(self.velocities ** 2))

    @classmethod
    def from_arrays(cls, positions, velocities, radii, env: EnvContext, frame_index: int = 0) -> WorldState:
        balls = tuple(
            BallState(Vec2(float(p[0]), float(p[1])), Vec2(float(v[0]), float(v[1])), float(r))
            for p, v, r in zip(positions, velocities, radii)
        )
        if len(balls) != N_BALLS:
            raise ValueError(f"expected {N_BALLS} balls, got {len(balls)}")
        return cls(balls, env, frame_index)


def _x_limits(env: EnvContext, radius: float, left_of_bar: bool) -> tuple[float, float]:
    x_min, _, x_max, _ = env.bounds
    lo, hi = x_min + radius, x_max - radius
    bar = env.bar_interval
    if bar is not None:
        if left_of_bar:
            hi = min(hi, bar[0] - radius)
        else:
            lo = max(lo, bar[1] + radius)
    return lo, hi


def init_world(seed: int, env: EnvContext) -> WorldState:
    """Place three equal balls at random non-overlapping positions with random headings."""
    rng = np.random.default_rng(seed)
    r = env.ball_radius
    x_min, y_min, x_max, y_max = env.bounds
    bar = env.bar_interval
    positions: list[np.ndarray] = []
    for _ in range(MAX_PLACEMENT_TRIES):
        p = np.array([rng.uniform(x_min + r, x_max - r), rng.uniform(y_min + r, y_max - r)])
        if bar is not None and bar[0] - r < p[0] < bar[1] + r:
            continue
        if any(np.hypot(*(p - q)) <= 2 * r for q in positions):
            continue
        positions.append(p)
        if len(positions) == N_BALLS:
            break
    else:
        raise PlacementError(f"could not place {N_BALLS} balls of radius {r} in {env}")
    speed = rng.uniform(*SPEED_RANGE)
    angles = rng.uniform(0.0, 2 * math.pi, size=N_BALLS)
    velocities = speed * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return WorldState.from_arrays(np.array(positions), velocities, np.full(N_BALLS, r), env)


def _resolve_walls(pos, vel, radii, env, left_of_bar) -> bool:
    hit = False
    _, y_min, _, y_max = env.bounds
    for i in range(len(pos)):
        r = radii[i]
        lo, hi = _x_limits(env, r, left_of_bar[i])
        if pos[i, 0] < lo:
            pos[i, 0] = min(2 * lo - pos[i, 0], hi)
            vel[i, 0] = abs(vel[i, 0])
            hit = True
        elif pos[i, 0] > hi:
            pos[i, 0] = max(2 * hi - pos[i, 0], lo)
            vel[i, 0] = -abs(vel[i, 0])
            hit = True
        lo, hi = y_min + r, y_max - r
        if pos[i, 1] < lo:
            pos[i, 1] = min(2 * lo - pos[i, 1], hi)
            vel[i, 1] = abs(vel[i, 1])
            hit = True
        elif pos[i, 1] > hi:
            pos[i, 1] = max(2 * hi - pos[i, 1], lo)
            vel[i, 1] = -abs(vel[i, 1])
            hit = True
    return hit


def _clamp_into(p, r, env, left_of_bar):
    _, y_min, _, y_max = env.bounds
    lo, hi = _x_limits(env, r, left_of_bar)
    p[0] = min(max(p[0], lo), hi)
    p[1] = min(max(p[1], y_min + r), y_max - r)


def _resolve_pairs(pos, vel, radii, env, left_of_bar) -> bool:
    hit = False
    n_balls = len(pos)
    for i in range(n_balls):
        for j in range(i + 1, n_balls):
            d = pos[j] - pos[i]
            dist = math.hypot(d[0], d[1])
            reach = radii[i] + radii[j]
            if dist >= reach:
                continue
            hit = True
            n = d / dist if dist > 0 else np.array([1.0, 0.0])
            approach = float(np.dot(vel[i] - vel[j], n))
            if approach > 0:
                # equal masses: swap the normal components
                vel[i] -= approach * n
                vel[j] += approach * n
            overlap = reach - dist
            pos[i] -= 0.5 * overlap * n
            _clamp_into(pos[i], radii[i], env, left_of_bar[i])
            # whatever the clamp took from ball i is made up by ball j
            pos[j] = pos[i] + reach * n
            _clamp_into(pos[j], radii[j], env, left_of_bar[j])
    return hit


def step(world: WorldState) -> WorldState:
    pos = world.positions
    vel = world.velocities
    radii = world.radii
    env = world.env
    bar = env.bar_interval
    left_of_bar = [bar is not None and p[0] < env.bar_center_x for p in pos]
    dt = 1.0 / SUBSTEPS
    for _ in range(SUBSTEPS):
        pos += vel * dt
        for _ in range(MAX_RESOLVE_ITERS):
            hit = _resolve_walls(pos, vel, radii, env, left_of_bar)
            hit |= _resolve_pairs(pos, vel, radii, env, left_of_bar)
            if not hit:
                break
    return WorldState.from_arrays(pos, vel, radii, env, world.frame_index + 1)


def simulate(seed: int, env: EnvContext, n_frames: int) -> list[WorldState]:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    states = [init_world(seed, env)]
    while len(states) < n_frames:
        states.append(step(states[-1]))
    return states
