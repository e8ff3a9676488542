"""Deterministic two-fidelity multi-lane highway world.

Simple fidelity runs 2 Hz decisions over 10 Hz kinematics and finishes a
lane change in exactly 2 decision steps by linear lateral interpolation.
Complex fidelity runs 20 Hz decisions over 20 Hz kinematics and executes
lane changes through the low-level stack (spline path, PID lateral
tracking, IDM speed), taking 10 to 20 decision steps.

Traffic follows IDM car-following plus a MOBIL-style gap-and-incentive
lane-change rule. All stochasticity lives in ``spawn_scenario``; stepping
is fully deterministic, so (seed, command sequence) reproduces a world
trajectory bit for bit.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .lowlevel_control import (
    IdmParams,
    LATERAL_GAINS,
    LanePath,
    PidState,
    build_lane_path,
    idm_accel,
    pid_step,
    plan_lane_change,
)


class Fidelity(str, Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


class Density(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class Action(IntEnum):
    FOLLOW = 0
    LEFT_LANE_CHANGE = 1
    RIGHT_LANE_CHANGE = 2


# Uniform spacing interval (metres) between consecutive same-lane vehicles.
SPACING_BY_DENSITY = {
    Density.LOW: (90.0, 120.0),
    Density.MEDIUM: (50.0, 90.0),
    Density.HIGH: (20.0, 50.0),
}

VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0

# Minimum clear distance to the first vehicle spawned ahead of the ego, so
# no scenario starts inside the safety-cost band. Only binds at high density.
EGO_FRONT_CLEARANCE = 30.0

TRAFFIC_TARGET_SPEED_RANGE = (15.0, 25.0)

# MOBIL-style traffic lane changes: accel gain threshold, politeness zero,
# and a hard front/rear gap requirement in the target lane.
MOBIL_GAIN_THRESHOLD = 0.2
MOBIL_SAFETY_GAP = 10.0
TRAFFIC_DECISION_PERIOD = 1.0   # seconds between traffic lane-change checks
TRAFFIC_COOLDOWN = 5.0          # seconds a vehicle keeps its lane after a change

# Complex-fidelity lateral execution. The slope cap and the flat rate
# ceiling together pin maneuver completion into the 10..20 decision-step
# window for initial speeds in [10, 25] m/s.
LATERAL_LOOKAHEAD = 2.0         # metres ahead on the planned path
MAX_LATERAL_SLOPE = 0.4         # |dy/dx| bound of the executed motion
MAX_LATERAL_RATE = 7.0          # m/s absolute lateral speed bound
LANE_CHANGE_COMPLETION_TOL = 0.2

# Safety net so a stalled episode cannot run unbounded.
MAX_DECISION_STEPS = {Fidelity.SIMPLE: 600, Fidelity.COMPLEX: 4000}


@dataclass
class SimConfig:
    fidelity: Fidelity = Fidelity.SIMPLE
    lanes_count: int = 3
    lane_width: float = 3.75
    speed_limit: float = 25.0
    density: Density = Density.MEDIUM
    episode_length: float = 1000.0
    sensor_range: float = 50.0
    seed: int = 0
    sim_dt: float | None = None
    decisions_per_second: float | None = None

    def __post_init__(self) -> None:
        self.fidelity = Fidelity(self.fidelity)
        self.density = Density(self.density)
        if self.sim_dt is None:
            self.sim_dt = 0.1 if self.fidelity is Fidelity.SIMPLE else 0.05
        if self.decisions_per_second is None:
            self.decisions_per_second = 2.0 if self.fidelity is Fidelity.SIMPLE else 20.0
        self.validate()

    def validate(self) -> None:
        if self.lanes_count < 2:
            raise ValueError("lanes_count must be at least 2")
        if self.sim_dt <= 0:
            raise ValueError("sim_dt must be positive")
        if self.sensor_range <= 0:
            raise ValueError("sensor_range must be positive")
        if self.density not in SPACING_BY_DENSITY:
            raise ValueError(f"unknown density {self.density}")
        if self.substeps_per_decision < 1:
            raise ValueError("decision interval must cover at least one sim step")
        interval = 1.0 / self.decisions_per_second
        if abs(interval / self.sim_dt - round(interval / self.sim_dt)) > 1e-9:
            raise ValueError("decision interval must be an integer multiple of sim_dt")

    @property
    def substeps_per_decision(self) -> int:
        return int(round(1.0 / (self.decisions_per_second * self.sim_dt)))

    @property
    def decision_dt(self) -> float:
        return 1.0 / self.decisions_per_second

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    @property
    def road_width(self) -> float:
        return self.lanes_count * self.lane_width


@dataclass
class LaneChangeManeuver:
    """In-progress lane change bookkeeping for one vehicle."""

    source_lane: int
    target_lane: int
    # simple fidelity: integer substep schedule
    substeps_total: int = 0
    substeps_done: int = 0
    # complex fidelity: planned path plus controller state
    path: LanePath | None = None
    pid: PidState = field(default_factory=PidState)
    lateral_rate: float = 0.0

    @property
    def progress(self) -> float:
        if self.substeps_total:
            return self.substeps_done / self.substeps_total
        return 0.0


@dataclass
class VehicleState:
    id: int
    longitudinal_pos: float
    lane_index: int
    lateral_offset: float
    speed: float
    target_speed: float
    length: float = VEHICLE_LENGTH
    is_ego: bool = False
    lane_change: LaneChangeManeuver | None = None
    cooldown_until: float = 0.0
    idm: IdmParams = field(default_factory=IdmParams)


@dataclass
class WorldState:
    config: SimConfig
    vehicles: list[VehicleState]
    sim_time: float = 0.0
    ego_distance_travelled: float = 0.0
    rng_state: dict | None = None
    decision_count: int = 0
    substep_count: int = 0
    terminal: bool = False

    def ego(self) -> VehicleState:
        for v in self.vehicles:
            if v.is_ego:
                return v
        raise RuntimeError("world has no ego vehicle")


@dataclass
class StepEvents:
    collision: bool = False
    min_gap_front: float = 0.0
    min_gap_rear: float = 0.0
    episode_done: bool = False
    success: bool = False
    command_degraded: bool = False


def spawn_scenario(config: SimConfig) -> WorldState:
    """Build the initial world: ego mid-lane in the center lane at x=0, all
    speeds zero, traffic placed ahead with density-driven uniform spacing."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    lo, hi = SPACING_BY_DENSITY[config.density]
    ego_lane = config.lanes_count // 2

    ego = VehicleState(
        id=0, longitudinal_pos=0.0, lane_index=ego_lane, lateral_offset=0.0,
        speed=0.0, target_speed=config.speed_limit, is_ego=True,
        idm=IdmParams(v0=config.speed_limit),
    )
    vehicles = [ego]
    next_id = 1
    for lane in range(config.lanes_count):
        pos = 0.0
        first = True
        while True:
            spacing = float(rng.uniform(lo, hi))
            if first and lane == ego_lane:
                spacing = max(spacing, EGO_FRONT_CLEARANCE)
            pos += spacing
            first = False
            if pos > config.episode_length:
                break
            target = float(rng.uniform(*TRAFFIC_TARGET_SPEED_RANGE))
            vehicles.append(VehicleState(
                id=next_id, longitudinal_pos=pos, lane_index=lane,
                lateral_offset=0.0, speed=0.0, target_speed=target,
                idm=IdmParams(v0=target),
            ))
            next_id += 1

    vehicles.sort(key=lambda v: (v.lane_index, v.longitudinal_pos))
    return WorldState(config=config, vehicles=vehicles,
                      rng_state=rng.bit_generator.state)


def step(world: WorldState, ego_command: Action) -> tuple[WorldState, StepEvents]:
    """Advance one decision step (mutates ``world`` and returns it).

    Lane-change commands into a nonexistent lane, or while a maneuver is
    already running, degrade to Follow and set ``command_degraded``.
    """
    if world.terminal:
        raise RuntimeError("episode is over; spawn a fresh scenario")
    cfg = world.config
    ego = world.ego()

    degraded = False
    command = Action(ego_command)
    if command is not Action.FOLLOW:
        delta = -1 if command is Action.LEFT_LANE_CHANGE else 1
        target = ego.lane_index + delta
        if ego.lane_change is not None or not 0 <= target < cfg.lanes_count:
            degraded = True
        else:
            _begin_lane_change(cfg, ego, target)

    traffic_period = max(1, int(round(TRAFFIC_DECISION_PERIOD / cfg.sim_dt)))
    collided = False
    for _ in range(cfg.substeps_per_decision):
        if world.substep_count % traffic_period == 0:
            _traffic_lane_decisions(world)
        _advance_substep(world)
        world.substep_count += 1
        if _ego_collides(world):
            collided = True
            break
    world.decision_count += 1
    world.sim_time = world.substep_count * cfg.sim_dt

    events = detect_collision(world)
    events.collision = events.collision or collided
    events.command_degraded = degraded
    reached_goal = world.ego_distance_travelled >= cfg.episode_length
    out_of_time = world.decision_count >= MAX_DECISION_STEPS[cfg.fidelity]
    events.success = reached_goal and not events.collision
    events.episode_done = events.collision or reached_goal or out_of_time
    if events.episode_done:
        world.terminal = True
    return world, events


def _begin_lane_change(cfg: SimConfig, vehicle: VehicleState, target: int) -> None:
    if cfg.fidelity is Fidelity.SIMPLE:
        vehicle.lane_change = LaneChangeManeuver(
            source_lane=vehicle.lane_index, target_lane=target,
            substeps_total=2 * cfg.substeps_per_decision,
        )
    else:
        y = cfg.lane_center(vehicle.lane_index) + vehicle.lateral_offset
        waypoints = plan_lane_change(vehicle.longitudinal_pos, y, vehicle.lane_index,
                                     target, cfg.lane_width, cfg.lanes_count)
        vehicle.lane_change = LaneChangeManeuver(
            source_lane=vehicle.lane_index, target_lane=target,
            path=build_lane_path(waypoints),
        )


def _per_lane_index(world: WorldState) -> dict[int, tuple[list[float], list[VehicleState]]]:
    lanes: dict[int, tuple[list[float], list[VehicleState]]] = {}
    for v in world.vehicles:  # already sorted by (lane, pos)
        positions, members = lanes.setdefault(v.lane_index, ([], []))
        positions.append(v.longitudinal_pos)
        members.append(v)
    return lanes


def _leader(lanes, lane: int, vehicle: VehicleState):
    """Nearest vehicle ahead of ``vehicle`` in ``lane`` and the bumper gap."""
    entry = lanes.get(lane)
    if entry is None:
        return None, math.inf
    positions, members = entry
    idx = bisect.bisect_right(positions, vehicle.longitudinal_pos)
    while idx < len(members) and members[idx] is vehicle:
        idx += 1
    if idx >= len(members):
        return None, math.inf
    lead = members[idx]
    gap = lead.longitudinal_pos - vehicle.longitudinal_pos - (lead.length + vehicle.length) / 2.0
    return lead, gap


def _follower(lanes, lane: int, vehicle: VehicleState):
    entry = lanes.get(lane)
    if entry is None:
        return None, math.inf
    positions, members = entry
    idx = bisect.bisect_left(positions, vehicle.longitudinal_pos) - 1
    while idx >= 0 and members[idx] is vehicle:
        idx -= 1
    if idx < 0:
        return None, math.inf
    rear = members[idx]
    gap = vehicle.longitudinal_pos - rear.longitudinal_pos - (rear.length + vehicle.length) / 2.0
    return rear, gap


def _longitudinal_accel(cfg: SimConfig, lanes, vehicle: VehicleState) -> float:
    """IDM acceleration against the most restrictive visible leader."""
    check = {vehicle.lane_index}
    if vehicle.lane_change is not None:
        check.add(vehicle.lane_change.target_lane)
    accel = idm_accel(vehicle.speed, vehicle.speed, math.inf, vehicle.idm)
    for lane in check:
        lead, gap = _leader(lanes, lane, vehicle)
        if lead is not None and gap <= cfg.sensor_range:
            accel = min(accel, idm_accel(vehicle.speed, lead.speed, max(gap, 0.1), vehicle.idm))
    return accel


def _advance_substep(world: WorldState) -> None:
    cfg = world.config
    dt = cfg.sim_dt
    lanes = _per_lane_index(world)
    accels = [_longitudinal_accel(cfg, lanes, v) for v in world.vehicles]
    for v, a in zip(world.vehicles, accels):
        v.speed = min(max(v.speed + a * dt, 0.0), cfg.speed_limit)
        dx = v.speed * dt
        v.longitudinal_pos += dx
        if v.is_ego:
            world.ego_distance_travelled += dx
        if v.lane_change is not None:
            if cfg.fidelity is Fidelity.SIMPLE:
                _advance_simple_maneuver(cfg, v)
            else:
                _advance_complex_maneuver(cfg, v, dt)
    world.vehicles.sort(key=lambda v: (v.lane_index, v.longitudinal_pos))


def _advance_simple_maneuver(cfg: SimConfig, v: VehicleState) -> None:
    lc = v.lane_change
    lc.substeps_done += 1
    if lc.substeps_done >= lc.substeps_total:
        v.lane_index = lc.target_lane
        v.lateral_offset = 0.0
        v.lane_change = None
        return
    frac = lc.substeps_done / lc.substeps_total
    y_src = cfg.lane_center(lc.source_lane)
    y_tgt = cfg.lane_center(lc.target_lane)
    y = y_src + frac * (y_tgt - y_src)
    lane = lc.target_lane if frac >= 0.5 else lc.source_lane
    v.lane_index = lane
    v.lateral_offset = y - cfg.lane_center(lane)


def _advance_complex_maneuver(cfg: SimConfig, v: VehicleState, dt: float) -> None:
    lc = v.lane_change
    y = cfg.lane_center(v.lane_index) + v.lateral_offset
    error = lc.path.value(v.longitudinal_pos + LATERAL_LOOKAHEAD) - y
    correction = pid_step(LATERAL_GAINS, error, lc.pid, dt)
    heading = lc.path.slope(v.longitudinal_pos) + correction
    limit = min(MAX_LATERAL_SLOPE * v.speed, MAX_LATERAL_RATE)
    rate = min(max(heading * v.speed, -limit), limit)
    y += rate * dt
    lc.lateral_rate = rate

    lane = min(max(int(y // cfg.lane_width), 0), cfg.lanes_count - 1)
    v.lane_index = lane
    v.lateral_offset = y - cfg.lane_center(lane)
    y_target = cfg.lane_center(lc.target_lane)
    overran = v.longitudinal_pos > lc.path.x_end + 15.0
    if (lane == lc.target_lane and abs(y - y_target) < LANE_CHANGE_COMPLETION_TOL) or overran:
        v.lane_index = lc.target_lane
        v.lateral_offset = 0.0
        v.lane_change = None


def _traffic_lane_decisions(world: WorldState) -> None:
    cfg = world.config
    lanes = _per_lane_index(world)
    for v in world.vehicles:
        if v.is_ego or v.lane_change is not None or world.sim_time < v.cooldown_until:
            continue
        _, decision = traffic_policy(world, v.id, lanes)
        if decision is Action.FOLLOW:
            continue
        target = v.lane_index + (-1 if decision is Action.LEFT_LANE_CHANGE else 1)
        _begin_lane_change(cfg, v, target)
        v.cooldown_until = world.sim_time + TRAFFIC_COOLDOWN


def traffic_policy(world: WorldState, vehicle_id: int, lanes=None) -> tuple[float, Action]:
    """IDM acceleration plus a MOBIL-style lane recommendation for one
    traffic vehicle. Politeness is zero: only the vehicle's own accel gain
    counts, and both target-lane gaps must exceed the safety gap."""
    vehicle = next((v for v in world.vehicles if v.id == vehicle_id), None)
    if vehicle is None:
        raise ValueError(f"no vehicle with id {vehicle_id}")
    if vehicle.is_ego:
        raise ValueError("traffic_policy does not control the ego vehicle")
    cfg = world.config
    if lanes is None:
        lanes = _per_lane_index(world)

    accel = _longitudinal_accel(cfg, lanes, vehicle)

    best_gain = MOBIL_GAIN_THRESHOLD
    best_action = Action.FOLLOW
    if vehicle.lane_change is None:
        for candidate in (vehicle.lane_index - 1, vehicle.lane_index + 1):
            if not 0 <= candidate < cfg.lanes_count:
                continue
            _, front_gap = _leader(lanes, candidate, vehicle)
            _, rear_gap = _follower(lanes, candidate, vehicle)
            if front_gap <= MOBIL_SAFETY_GAP or rear_gap <= MOBIL_SAFETY_GAP:
                continue
            lead, gap = _leader(lanes, candidate, vehicle)
            if lead is not None and gap <= cfg.sensor_range:
                cand_accel = idm_accel(vehicle.speed, lead.speed, max(gap, 0.1), vehicle.idm)
            else:
                cand_accel = idm_accel(vehicle.speed, vehicle.speed, math.inf, vehicle.idm)
            gain = cand_accel - accel
            if gain > best_gain:
                best_gain = gain
                best_action = (Action.LEFT_LANE_CHANGE if candidate < vehicle.lane_index
                               else Action.RIGHT_LANE_CHANGE)
    return accel, best_action


def _ego_collides(world: WorldState) -> bool:
    cfg = world.config
    ego = world.ego()
    y_ego = cfg.lane_center(ego.lane_index) + ego.lateral_offset
    if y_ego - VEHICLE_WIDTH / 2.0 < 0.0 or y_ego + VEHICLE_WIDTH / 2.0 > cfg.road_width:
        return True
    for v in world.vehicles:
        if v.is_ego:
            continue
        if abs(v.longitudinal_pos - ego.longitudinal_pos) >= (v.length + ego.length) / 2.0:
            continue
        y_other = cfg.lane_center(v.lane_index) + v.lateral_offset
        if abs(y_other - y_ego) < VEHICLE_WIDTH:
            return True
    return False


def detect_collision(world: WorldState) -> StepEvents:
    """Collision/gap snapshot of the current world.

    Collision is rectangle overlap of the ego with any vehicle, or the ego
    rectangle leaving the road's lateral extent. Gaps are bumper-to-bumper
    to the nearest same-lane neighbours (both lanes while a lane change is
    in progress), capped at the sensor range.
    """
    cfg = world.config
    ego = world.ego()
    lanes = _per_lane_index(world)
    check = {ego.lane_index}
    if ego.lane_change is not None:
        check.add(ego.lane_change.target_lane)
    front = math.inf
    rear = math.inf
    for lane in check:
        _, fgap = _leader(lanes, lane, ego)
        _, rgap = _follower(lanes, lane, ego)
        front = min(front, fgap)
        rear = min(rear, rgap)
    front = min(max(front, 0.0), cfg.sensor_range)
    rear = min(max(rear, 0.0), cfg.sensor_range)

    events = StepEvents(collision=_ego_collides(world),
                        min_gap_front=front, min_gap_rear=rear)
    reached_goal = world.ego_distance_travelled >= cfg.episode_length
    events.success = reached_goal and not events.collision
    events.episode_done = events.collision or reached_goal
    return events


def world_hash(world: WorldState) -> str:
    """Stable digest of the full kinematic state (bit-exact floats)."""
    parts = [world.sim_time.hex(), world.ego_distance_travelled.hex(),
             str(world.decision_count)]
    for v in world.vehicles:
        lc = v.lane_change
        maneuver = "-" if lc is None else f"{lc.source_lane}>{lc.target_lane}:{lc.substeps_done}:{lc.lateral_rate.hex()}"
        parts.append("|".join([
            str(v.id), str(v.lane_index), v.longitudinal_pos.hex(),
            v.lateral_offset.hex(), v.speed.hex(), v.target_speed.hex(), maneuver,
        ]))
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def snapshot_json(world: WorldState) -> str:
    """Debug replay record: compact JSON of time plus per-vehicle kinematics."""
    payload = {
        "sim_time": world.sim_time,
        "vehicles": [
            {"id": v.id, "lane": v.lane_index, "pos": v.longitudinal_pos, "speed": v.speed}
            for v in world.vehicles
        ],
    }
    return json.dumps(payload, sort_keys=True)
