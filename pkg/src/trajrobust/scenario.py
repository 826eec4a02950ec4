"""Synthetic intersection sequences at 10 Hz.

Three archetypes stand in for the recorded crossings:

* ``crossing1``: straight through an intersection with cross traffic,
* ``crossing2``: left turn (curvature 0.05 1/m) with merging traffic,
* ``crossing3``: right turn (curvature -0.04 1/m) followed by a merge.

The ego tracks the lane centerline with pure pursuit (8 m lookahead). Its speed
is a function of arc length: constant deceleration into the curve (or
intersection), constant speed through it, constant acceleration out. Agents
drive straight routes at constant speed with small per-frame speed jitter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import state as st
from .rng import SplitMix64, derive_seed

PATH_STEP = 0.25
LOOKAHEAD = 8.0
SEQUENCE_FRAMES = 200
DEFAULT_AGENT_COUNT = (2, 14)
DEFAULT_AGENT_SPEED = (3.0, 12.0)
AGENT_SPEED_JITTER = 0.2

# per class: (probability, nominal length, nominal width)
CLASS_TABLE = {0: (0.6, 4.5, 1.8), 1: (0.15, 8.0, 2.5), 2: (0.15, 1.8, 0.6), 3: (0.10, 0.5, 0.5)}
PEDESTRIAN_SPEED = (1.0, 2.0)
# traffic scripts come from a fixed stream so every dataset sees the same crossings
SCRIPT_SEED = 2024
SCRIPT_DELAY = 3.0
DELAY_NOISE = 0.1
SPEED_NOISE = 0.01


@dataclass(frozen=True)
class Route:
    """Straight agent route anchored at arc length ``s_anchor`` of the centerline."""

    s_anchor: float
    lateral: float
    heading_offset: float


@dataclass(frozen=True)
class CrossingArchetype:
    id: str
    heading0: float
    segments: tuple[tuple[float, float], ...]  # (length m, curvature 1/m)
    slow_start: float  # arc length where the slow section begins
    slow_end: float
    slow_speed: float
    decel: float
    accel: float
    routes: tuple[Route, ...] = ()
    lateral_offset_range: tuple[float, float] = (-0.3, 0.3)
    start_margin: float = 13.0

    @property
    def length(self) -> float:
        return sum(seg[0] for seg in self.segments)

    def speed_at(self, s: float) -> float:
        if s < self.slow_start:
            return math.sqrt(self.slow_speed ** 2 + 2.0 * self.decel * (self.slow_start - s))
        if s <= self.slow_end:
            return self.slow_speed
        return math.sqrt(self.slow_speed ** 2 + 2.0 * self.accel * (s - self.slow_end))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [list(seg) for seg in self.segments]
        d["routes"] = [asdict(r) for r in self.routes]
        return d


def _turn(id_, heading0, approach, kappa, turn_angle, exit_len, decel, accel, routes):
    curve = abs(turn_angle / kappa)
    slow = math.sqrt(1.25 / abs(kappa))  # 1.25 m/s^2 lateral acceleration in the curve
    return CrossingArchetype(
        id=id_, heading0=heading0,
        segments=((approach, 0.0), (curve, kappa), (exit_len, 0.0)),
        slow_start=approach, slow_end=approach + curve, slow_speed=slow,
        decel=decel, accel=accel, routes=routes,
    )


ARCHETYPES: dict[str, CrossingArchetype] = {
    "crossing1": CrossingArchetype(
        id="crossing1", heading0=0.0, segments=((330.0, 0.0),),
        slow_start=150.0, slow_end=150.0, slow_speed=4.0, decel=0.4, accel=0.35,
        routes=(Route(150.0, -150.0, math.pi / 2), Route(150.0, 150.0, -math.pi / 2),
                Route(300.0, 3.5, math.pi), Route(0.0, -3.5, 0.0)),
    ),
    "crossing2": _turn("crossing2", math.pi / 4, 140.0, 0.05, math.pi / 2, 110.0, 0.4, 0.45,
                       (Route(100.0, 3.5, math.pi), Route(150.0, -120.0, math.pi / 2),
                        Route(171.4, -40.0, 0.08), Route(230.0, 3.5, math.pi))),
    "crossing3": _turn("crossing3", -math.pi / 4, 130.0, -0.04, -math.pi / 2, 120.0, 0.4, 0.4,
                       (Route(60.0, 3.5, math.pi), Route(169.3, 30.0, -0.08),
                        Route(200.0, 3.5, math.pi), Route(130.0, 100.0, -math.pi / 2))),
}


def straight_archetype(speed: float, length: float = 400.0, id_: str = "straight") -> CrossingArchetype:
    """Constant-speed straight road with no routes and no lateral offset."""
    return CrossingArchetype(id=id_, heading0=0.0, segments=((length, 0.0),),
                             slow_start=0.0, slow_end=length, slow_speed=speed,
                             decel=0.0, accel=0.0, routes=(), lateral_offset_range=(0.0, 0.0))


class Centerline:
    """Densely sampled lane centerline obtained by integrating curvature."""

    def __init__(self, archetype: CrossingArchetype):
        s_list, k_list = [0.0], []
        for seg_len, kappa in archetype.segments:
            n = max(1, int(round(seg_len / PATH_STEP)))
            step = seg_len / n
            for _ in range(n):
                s_list.append(s_list[-1] + step)
                k_list.append(kappa)
        self.s = np.array(s_list)
        self.kappa = np.array(k_list + [k_list[-1]])
        m = len(self.s)
        x = np.zeros(m)
        y = np.zeros(m)
        psi = np.zeros(m)
        psi[0] = archetype.heading0
        for i in range(1, m):
            ds = self.s[i] - self.s[i - 1]
            k = self.kappa[i - 1]
            mid = psi[i - 1] + 0.5 * k * ds
            chord = ds if k == 0.0 else 2.0 * math.sin(0.5 * k * ds) / k
            x[i] = x[i - 1] + chord * math.cos(mid)
            y[i] = y[i - 1] + chord * math.sin(mid)
            psi[i] = psi[i - 1] + k * ds
        self.x, self.y, self.psi = x, y, psi

    def point(self, s: float) -> tuple[float, float, float]:
        """(x, y, heading) at arc length s, linearly interpolated."""
        s = min(max(s, 0.0), self.s[-1])
        i = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.s) - 2)
        t = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        return (self.x[i] + t * (self.x[i + 1] - self.x[i]),
                self.y[i] + t * (self.y[i + 1] - self.y[i]),
                self.psi[i] + t * (self.psi[i + 1] - self.psi[i]))

    def project(self, x: float, y: float, hint: int) -> tuple[float, int]:
        """Arc length of the closest centerline point, searching near ``hint``."""
        lo = max(0, hint - 60)
        hi = min(len(self.s), hint + 60)
        d2 = (self.x[lo:hi] - x) ** 2 + (self.y[lo:hi] - y) ** 2
        k = lo + int(np.argmin(d2))
        best_s, best_d = self.s[k], float(d2[k - lo])
        for i in (k - 1, k):
            if i < 0 or i + 1 >= len(self.s):
                continue
            ex, ey = self.x[i + 1] - self.x[i], self.y[i + 1] - self.y[i]
            t = ((x - self.x[i]) * ex + (y - self.y[i]) * ey) / (ex * ex + ey * ey)
            t = min(max(t, 0.0), 1.0)
            px, py = self.x[i] + t * ex, self.y[i] + t * ey
            d = (x - px) ** 2 + (y - py) ** 2
            if d < best_d:
                best_d, best_s = d, self.s[i] + t * (self.s[i + 1] - self.s[i])
        return float(best_s), k

    def curvature(self, s: float) -> float:
        i = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.kappa) - 1)
        return float(self.kappa[max(i, 0)])


def start_range(archetype: CrossingArchetype, frames: int = SEQUENCE_FRAMES) -> tuple[float, float]:
    """Range of start arc lengths from which ``frames`` frames stay on the route."""
    grid, elapsed = _ego_clock(archetype)
    end = archetype.length - archetype.start_margin
    needed = frames * st.DT + 1.0
    t_end = np.interp(end, grid, elapsed)
    ok = grid[(t_end - elapsed >= needed) & (grid <= end)]
    if len(ok) == 0:
        raise ValueError(f"archetype {archetype.id} too short for {frames} frames")
    return 0.0, float(ok[-1])


@dataclass(frozen=True)
class Frame:
    t: float
    pose: st.Pose
    ego: st.EgoDynamics
    lane: st.LaneGeometry
    agents: tuple[st.Agent, ...]
    s: float


@dataclass
class DrivingSequence:
    crossing_id: str
    seed: int
    frames: list[Frame] = field(default_factory=list)


@dataclass
class _AgentTrack:
    agent_id: int
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    class_id: int
    nominal_speed: float


def _ego_clock(archetype: CrossingArchetype) -> tuple[np.ndarray, np.ndarray]:
    """Nominal time for the ego to reach each arc length from s = 0."""
    grid = np.arange(0.0, archetype.length + 1e-9, PATH_STEP)
    inv_v = np.array([1.0 / archetype.speed_at(s) for s in grid])
    elapsed = np.concatenate([[0.0], np.cumsum(0.5 * (inv_v[1:] + inv_v[:-1]) * PATH_STEP)])
    return grid, elapsed


@dataclass(frozen=True)
class TrafficSlot:
    """One scripted agent: its route, speed, and when it passes the route anchor.

    ``delay`` is measured from the moment the ego nominally reaches the
    anchor's arc length, so the traffic around the ego at a given point of the
    crossing looks alike in every sequence.
    """

    route: Route
    class_id: int
    length: float
    width: float
    speed: float
    delay: float


def traffic_script(archetype: CrossingArchetype, slots: int,
                   speed_range=DEFAULT_AGENT_SPEED) -> list[TrafficSlot]:
    """The fixed traffic pattern of a crossing; independent of the dataset seed."""
    rng = SplitMix64.named(SCRIPT_SEED, f"traffic/{archetype.id}")
    weights = [CLASS_TABLE[c][0] for c in sorted(CLASS_TABLE)]
    script = []
    for k in range(slots):
        cls = rng.choice(weights)
        _, length, width = CLASS_TABLE[cls]
        length *= rng.uniform(0.9, 1.1)
        width *= rng.uniform(0.9, 1.1)
        lo, hi = PEDESTRIAN_SPEED if cls == 3 else speed_range
        speed = rng.uniform(lo, hi)
        if k % 3 != 2 or not archetype.routes:
            side = 3.5 if rng.uniform() < 0.5 else -3.5
            route = Route(rng.uniform(0.0, archetype.length), side, 0.0)
        else:
            route = archetype.routes[rng.integer(0, len(archetype.routes) - 1)]
        script.append(TrafficSlot(route, cls, length, width, speed, rng.uniform(-SCRIPT_DELAY, SCRIPT_DELAY)))
    return script


def _spawn_agents(archetype: CrossingArchetype, line: Centerline, rng: SplitMix64, s0: float,
                  count_range, speed_range) -> list[_AgentTrack]:
    """The first n slots of the crossing's traffic script with per-sequence noise.

    n is drawn from ``count_range``; each agent's pass time and speed are
    perturbed slightly so no two sequences share exact agent tracks.
    """
    n = rng.integer(*count_range)
    if n == 0:
        return []
    grid, elapsed = _ego_clock(archetype)
    t0 = float(np.interp(s0, grid, elapsed))
    agents = []
    for agent_id, slot in enumerate(traffic_script(archetype, n, speed_range)):
        speed = slot.speed * rng.uniform(1.0 - SPEED_NOISE, 1.0 + SPEED_NOISE)
        t_pass = float(np.interp(slot.route.s_anchor, grid, elapsed)) - t0 + slot.delay
        t_pass += rng.uniform(-DELAY_NOISE, DELAY_NOISE)
        travel = -speed * t_pass
        cx, cy, cpsi = line.point(slot.route.s_anchor)
        ox = cx - math.sin(cpsi) * slot.route.lateral
        oy = cy + math.cos(cpsi) * slot.route.lateral
        heading = cpsi + slot.route.heading_offset
        agents.append(_AgentTrack(agent_id, ox + travel * math.cos(heading), oy + travel * math.sin(heading),
                                  st.wrap_angle(heading), speed, slot.length, slot.width, slot.class_id, speed))
    return agents


def generate_sequence(archetype: CrossingArchetype, seed: int, frames: int = SEQUENCE_FRAMES,
                      agent_count_range=DEFAULT_AGENT_COUNT,
                      agent_speed_range=DEFAULT_AGENT_SPEED) -> DrivingSequence:
    """Simulate ``frames`` frames at 10 Hz; a pure function of its arguments."""
    rng = SplitMix64(seed)
    line = Centerline(archetype)
    s_lo, s_hi = start_range(archetype, frames)
    s0 = rng.uniform(s_lo, s_hi)
    e_y0 = rng.uniform(*archetype.lateral_offset_range)
    cx, cy, cpsi = line.point(s0)
    x = cx - math.sin(cpsi) * e_y0
    y = cy + math.cos(cpsi) * e_y0
    psi = cpsi
    hint = int(round(s0 / PATH_STEP))
    agents = _spawn_agents(archetype, line, rng.spawn("agents"), s0, agent_count_range, agent_speed_range)
    jitter = rng.spawn("jitter")
    dt = st.DT

    raw = []
    s, hint = line.project(x, y, hint)
    v = archetype.speed_at(s)
    # one extra step so the last frame has a forward-difference acceleration
    for i in range(frames + 1):
        lx, ly, _ = line.point(s + LOOKAHEAD)
        c, sn = math.cos(psi), math.sin(psi)
        fx = c * (lx - x) + sn * (ly - y)
        fy = -sn * (lx - x) + c * (ly - y)
        yaw_rate = 2.0 * v * math.sin(math.atan2(fy, fx)) / math.hypot(fx, fy)

        px, py, path_psi = line.point(s)
        e_y = -math.sin(path_psi) * (x - px) + math.cos(path_psi) * (y - py)
        lane = st.LaneGeometry(e_y, st.wrap_angle(psi - path_psi), line.curvature(s))
        snapshot = tuple(st.Agent(a.agent_id, a.x, a.y, a.heading, a.speed, a.length, a.width, a.class_id)
                         for a in agents)
        raw.append((i / 10.0, st.Pose(x, y, psi, v), yaw_rate, lane, snapshot, s))

        mid = psi + 0.5 * yaw_rate * dt
        x += v * dt * math.cos(mid)
        y += v * dt * math.sin(mid)
        psi += yaw_rate * dt
        s, hint = line.project(x, y, hint)
        v = archetype.speed_at(s)
        jit = jitter.uniform_array(len(agents), -AGENT_SPEED_JITTER, AGENT_SPEED_JITTER)
        for a, dv in zip(agents, jit):
            if a.class_id != 3:
                a.speed = max(0.0, a.nominal_speed + dv)
            a.x += a.speed * dt * math.cos(a.heading)
            a.y += a.speed * dt * math.sin(a.heading)

    seq = DrivingSequence(archetype.id, seed)
    for (t, pose, yaw_rate, lane, snapshot, s_i), nxt in zip(raw[:-1], raw[1:]):
        accel = (nxt[1].speed - pose.speed) / dt
        ego = st.EgoDynamics(pose.speed, accel, yaw_rate, st.wrap_angle(pose.heading))
        seq.frames.append(Frame(t, pose, ego, lane, snapshot, s_i))
    return seq


def sequence_samples(seq: DrivingSequence, seq_name: str, horizon: int = st.HORIZON,
                     stride: int = 1) -> st.Dataset:
    """State/target pairs for every ``stride``-th frame with ``horizon`` future frames."""
    states, targets, times = [], [], []
    n = len(seq.frames)
    for i in range(0, n - horizon, stride):
        f = seq.frames[i]
        sv = st.build_state(f.ego, f.lane, f.agents, st.Pose(f.pose.x, f.pose.y, f.pose.heading, f.pose.speed))
        states.append(sv.flatten())
        targets.append(st.build_target(f.pose, [g.pose for g in seq.frames[i + 1:i + 1 + horizon]]))
        times.append(f.t)
    if not states:
        return st.Dataset.empty()
    m = len(states)
    return st.Dataset(np.array(states), np.array(targets), [seq_name] * m, times, [seq.crossing_id] * m)


@dataclass(frozen=True)
class GeneratorConfig:
    crossings: tuple[str, ...] = ("crossing1", "crossing2", "crossing3")
    sequences_per_crossing: int = 10
    seed: int = 0
    agent_count_range: tuple[int, int] = DEFAULT_AGENT_COUNT
    speed_range: tuple[float, float] = DEFAULT_AGENT_SPEED
    frames: int = SEQUENCE_FRAMES
    sample_stride: int = 1

    def validate(self) -> list[str]:
        errors = []
        unknown = [c for c in self.crossings if c not in ARCHETYPES]
        if not self.crossings:
            errors.append("crossings: must list at least one crossing")
        if unknown:
            errors.append(f"crossings: unknown ids {unknown}; known {sorted(ARCHETYPES)}")
        if self.sequences_per_crossing < 1:
            errors.append("sequences_per_crossing: must be positive")
        lo, hi = self.agent_count_range
        if lo < 0 or hi < lo:
            errors.append("agent_count_range: need 0 <= low <= high")
        slo, shi = self.speed_range
        if slo < 0 or shi < slo:
            errors.append("speed_range: need 0 <= low <= high")
        if self.frames <= st.HORIZON:
            errors.append(f"frames: must exceed the horizon ({st.HORIZON})")
        if self.sample_stride < 1:
            errors.append("sample_stride: must be positive")
        return errors

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("crossings", "agent_count_range", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"crossings": list(self.crossings), "sequences_per_crossing": self.sequences_per_crossing,
                "seed": self.seed, "agent_count_range": list(self.agent_count_range),
                "speed_range": list(self.speed_range), "frames": self.frames,
                "sample_stride": self.sample_stride}


def sequence_seed(seed: int, crossing_id: str, index: int) -> int:
    return derive_seed(seed, f"generate/{crossing_id}/{index}")


def generate_dataset(config: GeneratorConfig) -> st.Dataset:
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    parts = []
    counts = {}
    skipped = 0
    for crossing_id in config.crossings:
        arch = ARCHETYPES[crossing_id]
        n_before = sum(len(p) for p in parts)
        for k in range(config.sequences_per_crossing):
            seq = generate_sequence(arch, sequence_seed(config.seed, crossing_id, k), config.frames,
                                    config.agent_count_range, config.speed_range)
            part = sequence_samples(seq, f"{crossing_id}/{k:03d}", stride=config.sample_stride)
            skipped += min(st.HORIZON, len(seq.frames))
            parts.append(part)
        counts[crossing_id] = sum(len(p) for p in parts) - n_before
    meta = {
        "schema_version": st.SCHEMA_VERSION, "seed": config.seed, "crossing": list(config.crossings),
        "frequency_hz": st.FREQUENCY_HZ, "horizon": st.HORIZON,
        "generator": config.to_dict(),
        "archetypes": {c: ARCHETYPES[c].to_dict() for c in config.crossings},
        "samples_per_crossing": counts, "skipped_frames": skipped,
    }
    return st.Dataset.concat(parts, meta) if parts else st.Dataset.empty(meta)
