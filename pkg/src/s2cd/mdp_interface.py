"""MDP view of the highway world.

The observation is 11 numbers: ego speed plus (speed, distance) pairs for
the nearest front, front-left, rear-left, front-right and rear-right
vehicles within sensor range. The reward is a piecewise-linear efficiency
term minus a piecewise-linear proximity/collision cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .highway_sim import (
    Action,
    SimConfig,
    StepEvents,
    WorldState,
    spawn_scenario,
    step as sim_step,
)

__all__ = [
    "Action",
    "Observation",
    "RewardConfig",
    "RewardBreakdown",
    "build_observation",
    "efficiency_reward",
    "safety_cost",
    "step_reward",
    "HighwayEnv",
    "OBS_DIM",
    "N_ACTIONS",
    "SLOT_NAMES",
]

OBS_DIM = 11
N_ACTIONS = 3

# Neighbour slot order; (lane offset, ahead?) relative to the ego lane.
SLOT_NAMES = ("front", "front_left", "rear_left", "front_right", "rear_right")
_SLOT_SPEC = ((0, True), (-1, True), (-1, False), (1, True), (1, False))


@dataclass(frozen=True)
class Observation:
    v_e: float
    neighbors: tuple[tuple[float, float], ...]  # five (v_i, d_i) pairs
    normalized: bool = False

    def vector(self) -> np.ndarray:
        out = [self.v_e]
        for v_i, d_i in self.neighbors:
            out.extend((v_i, d_i))
        return np.array(out, dtype=np.float64)

    def normalize(self, speed_limit: float = 25.0, sensor_range: float = 50.0) -> "Observation":
        if self.normalized:
            return self
        return Observation(
            v_e=self.v_e / speed_limit,
            neighbors=tuple((v / speed_limit, d / sensor_range) for v, d in self.neighbors),
            normalized=True,
        )


@dataclass(frozen=True)
class RewardConfig:
    alpha1: float = 0.5   # efficiency weight
    alpha2: float = 1.0   # safety weight

    def __post_init__(self) -> None:
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("reward weights must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    efficiency: float
    cost: float

    @property
    def total(self) -> float:
        return self.efficiency - self.cost


def build_observation(world: WorldState) -> Observation:
    """Raw (unnormalized) observation of the current world.

    Absent slots take the sentinel (v_i = ego speed, d_i = sensor range):
    a phantom at maximum range with zero closing speed.
    """
    cfg = world.config
    ego = world.ego()
    slots = []
    for lane_offset, ahead in _SLOT_SPEC:
        lane = ego.lane_index + lane_offset
        best = None
        best_gap = math.inf
        if 0 <= lane < cfg.lanes_count:
            for v in world.vehicles:
                if v.is_ego or v.lane_index != lane:
                    continue
                dx = v.longitudinal_pos - ego.longitudinal_pos
                if ahead and dx <= 0 or not ahead and dx >= 0:
                    continue
                gap = max(abs(dx) - (v.length + ego.length) / 2.0, 0.0)
                if gap > cfg.sensor_range:
                    continue
                if best is None or gap < best_gap:
                    best = v
                    best_gap = gap
        if best is None:
            slots.append((ego.speed, cfg.sensor_range))
        else:
            slots.append((best.speed, best_gap))
    return Observation(v_e=ego.speed, neighbors=tuple(slots), normalized=False)


def efficiency_reward(v_e: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Zero below half the speed limit, then linear up to the full weight."""
    if not 0.0 <= v_e <= 25.0 + 1e-9:
        raise ValueError("ego speed outside [0, 25]")
    if v_e < 12.5:
        return 0.0
    if v_e < 25.0:
        return cfg.alpha1 * (v_e / 12.5 - 1.0)
    return cfg.alpha1


def safety_cost(d_safe: float, collided: bool, cfg: RewardConfig = RewardConfig()) -> float:
    """Collision dominates; otherwise a proximity ramp on the closest
    same-lane gap: full weight below 5 m, fading linearly to zero at 10 m."""
    if d_safe < 0:
        raise ValueError("d_safe must be nonnegative")
    if collided:
        return 1.0
    if d_safe < 5.0:
        return cfg.alpha2
    if d_safe < 10.0:
        return cfg.alpha2 * (1.0 - (d_safe - 5.0) / 5.0)
    return 0.0


def step_reward(events: StepEvents, world: WorldState,
                cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    d_safe = min(events.min_gap_front, events.min_gap_rear)
    eff = efficiency_reward(world.ego().speed, cfg)
    cost = safety_cost(d_safe, events.collision, cfg)
    return RewardBreakdown(efficiency=eff, cost=cost)


class HighwayEnv:
    """Episode-managing adapter over the simulator.

    ``reset`` spawns a fresh scenario with a seed derived from the master
    seed and the episode counter, so a fixed master seed reproduces the
    whole episode sequence while every episode still differs.
    """

    def __init__(self, config: SimConfig, reward: RewardConfig = RewardConfig(),
                 master_seed: int = 0):
        self.config = config
        self.reward_config = reward
        self.master_seed = master_seed
        self.episode_index = -1
        self.world: WorldState | None = None
        self.last_events: StepEvents | None = None

    @property
    def obs_dim(self) -> int:
        return OBS_DIM

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    def _scenario_seed(self, episode: int) -> int:
        ss = np.random.SeedSequence(entropy=(self.master_seed, episode))
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def reset(self) -> np.ndarray:
        self.episode_index += 1
        cfg_kwargs = vars(self.config).copy()
        cfg_kwargs["seed"] = self._scenario_seed(self.episode_index)
        self.world = spawn_scenario(SimConfig(**cfg_kwargs))
        self.last_events = None
        return self._observe()

    def step(self, action: Action) -> tuple[np.ndarray, RewardBreakdown, StepEvents]:
        if self.world is None or self.world.terminal:
            raise RuntimeError("call reset() before stepping")
        _, events = sim_step(self.world, action)
        reward = step_reward(events, self.world, self.reward_config)
        self.last_events = events
        return self._observe(), reward, events

    def ego_speed(self) -> float:
        return self.world.ego().speed

    def _observe(self) -> np.ndarray:
        obs = build_observation(self.world)
        return obs.normalize(self.config.speed_limit, self.config.sensor_range).vector()
