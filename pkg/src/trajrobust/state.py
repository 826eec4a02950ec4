"""Structured 97-dimensional driving state, 20x4 trajectory target, dataset files.

Ego frame: x forward, y left, angles counter-clockwise. Flat state layout::

    [0:4]    ego    v, a, yaw_rate, heading
    [4:7]    lane   e_y, e_psi, kappa
    [7:87]   10 object slots x (x_rel, y_rel, psi_rel, v_rel, length, width, class_id, distance)
    [87:97]  validity mask, one flag per slot
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STATE_DIM = 97
EGO_DIM = 4
LANE_DIM = 3
NUM_OBJECTS = 10
OBJECT_DIM = 8
HORIZON = 20
TARGET_CHANNELS = 4
FREQUENCY_HZ = 10.0
DT = 1.0 / FREQUENCY_HZ
OBJECT_RADIUS = 60.0
SCHEMA_VERSION = 1

EGO_SLICE = slice(0, 4)
LANE_SLICE = slice(4, 7)
OBJECTS_SLICE = slice(7, 87)
MASK_SLICE = slice(87, 97)

EGO_FIELDS = ("v", "a", "yaw_rate", "heading")
LANE_FIELDS = ("e_y", "e_psi", "kappa")
OBJECT_FIELDS = ("x_rel", "y_rel", "psi_rel", "v_rel", "length", "width", "class_id", "distance")
TARGET_FIELDS = ("dx", "dy", "dpsi", "v")

CLASS_NAMES = {0: "car", 1: "truck", 2: "bicycle", 3: "pedestrian"}


class ValidityError(ValueError):
    """Input data that cannot produce a valid sample."""


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class SchemaVersionError(DatasetFormatError):
    pass


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def wrap_angle_array(angle: np.ndarray) -> np.ndarray:
    a = np.fmod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi)
    a = np.where(a <= 0.0, a + 2.0 * np.pi, a)
    return a - np.pi


def field_names() -> list[str]:
    """Name of every flat index, in order."""
    names = [f"ego.{f}" for f in EGO_FIELDS] + [f"lane.{f}" for f in LANE_FIELDS]
    for k in range(NUM_OBJECTS):
        names += [f"obj{k}.{f}" for f in OBJECT_FIELDS]
    names += [f"mask{k}" for k in range(NUM_OBJECTS)]
    return names


def index_table() -> str:
    """Markdown table mapping each flat state index to its field."""
    lines = ["| index | field |", "|---:|---|"]
    lines += [f"| {i} | {name} |" for i, name in enumerate(field_names())]
    return "\n".join(lines)


@dataclass(frozen=True)
class EgoDynamics:
    v: float
    a: float
    yaw_rate: float
    heading: float

    def as_list(self) -> list[float]:
        return [self.v, self.a, self.yaw_rate, self.heading]


@dataclass(frozen=True)
class LaneGeometry:
    e_y: float
    e_psi: float
    kappa: float

    def as_list(self) -> list[float]:
        return [self.e_y, self.e_psi, self.kappa]


@dataclass(frozen=True)
class ObjectFeature:
    x_rel: float = 0.0
    y_rel: float = 0.0
    psi_rel: float = 0.0
    v_rel: float = 0.0
    length: float = 0.0
    width: float = 0.0
    class_id: float = 0.0
    distance: float = 0.0

    def as_list(self) -> list[float]:
        return [self.x_rel, self.y_rel, self.psi_rel, self.v_rel,
                self.length, self.width, self.class_id, self.distance]


EMPTY_OBJECT = ObjectFeature()


@dataclass(frozen=True)
class Agent:
    """A traffic participant in the world frame."""

    agent_id: int
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    class_id: int


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    speed: float = 0.0


@dataclass(frozen=True)
class StateVector:
    ego: EgoDynamics
    lane: LaneGeometry
    objects: tuple[ObjectFeature, ...]
    mask: tuple[float, ...]

    def flatten(self) -> np.ndarray:
        if len(self.objects) != NUM_OBJECTS or len(self.mask) != NUM_OBJECTS:
            raise ValidityError("state needs exactly 10 object slots and 10 mask flags")
        flat = self.ego.as_list() + self.lane.as_list()
        for obj in self.objects:
            flat += obj.as_list()
        flat += list(self.mask)
        return np.array(flat, dtype=np.float64)

    @classmethod
    def unflatten(cls, flat: Sequence[float]) -> "StateVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (STATE_DIM,):
            raise ValidityError(f"flat state must have length {STATE_DIM}, got shape {flat.shape}")
        values = flat.tolist()
        objs = tuple(
            ObjectFeature(*values[7 + OBJECT_DIM * k: 7 + OBJECT_DIM * (k + 1)])
            for k in range(NUM_OBJECTS)
        )
        return cls(EgoDynamics(*values[0:4]), LaneGeometry(*values[4:7]), objs, tuple(values[87:97]))


def _check_finite(values: Iterable[float], what: str) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ValidityError(f"non-finite {what}")


def select_objects(agents: Sequence[Agent], ego: Pose,
                   radius: float = OBJECT_RADIUS) -> tuple[tuple[ObjectFeature, ...], tuple[float, ...]]:
    """The (up to) 10 nearest agents within ``radius``, in the ego frame.

    Sorted by ascending distance, ties by agent id; unused slots are zero with
    mask 0.
    """
    _check_finite((ego.x, ego.y, ego.heading, ego.speed), "ego pose")
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    candidates = []
    for ag in agents:
        _check_finite((ag.x, ag.y, ag.heading, ag.speed), f"pose for agent {ag.agent_id}")
        dx, dy = ag.x - ego.x, ag.y - ego.y
        x_rel = c * dx + s * dy
        y_rel = -s * dx + c * dy
        dist = math.hypot(x_rel, y_rel)
        if dist <= radius:
            candidates.append((dist, ag.agent_id, x_rel, y_rel, ag))
    candidates.sort(key=lambda item: (item[0], item[1]))
    objects = []
    for dist, _, x_rel, y_rel, ag in candidates[:NUM_OBJECTS]:
        objects.append(ObjectFeature(
            x_rel=x_rel, y_rel=y_rel,
            psi_rel=wrap_angle(ag.heading - ego.heading),
            v_rel=ag.speed - ego.speed,
            length=ag.length, width=ag.width,
            class_id=float(ag.class_id), distance=dist,
        ))
    n = len(objects)
    mask = tuple([1.0] * n + [0.0] * (NUM_OBJECTS - n))
    objects += [EMPTY_OBJECT] * (NUM_OBJECTS - n)
    return tuple(objects), mask


def build_state(ego: EgoDynamics, lane: LaneGeometry, agents: Sequence[Agent], ego_pose: Pose) -> StateVector:
    _check_finite(ego.as_list() + lane.as_list(), "ego/lane quantities")
    objects, mask = select_objects(agents, ego_pose)
    return StateVector(ego, lane, objects, mask)


def build_target(current: Pose, future: Sequence[Pose]) -> np.ndarray:
    """20x4 rows (dx, dy, dpsi, v) between consecutive future poses.

    Future world poses are expressed in the ego frame at ``current``; row k
    holds the position/heading change from step k-1 to step k (step 0 is the
    current pose) and the speed at step k.
    """
    if len(future) < HORIZON:
        raise ValidityError(f"need {HORIZON} future frames, got {len(future)}")
    c, s = math.cos(current.heading), math.sin(current.heading)
    out = np.empty((HORIZON, TARGET_CHANNELS), dtype=np.float64)
    px = py = 0.0
    ppsi = current.heading
    for k, pose in enumerate(future[:HORIZON]):
        dx, dy = pose.x - current.x, pose.y - current.y
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        out[k] = (lx - px, ly - py, wrap_angle(pose.heading - ppsi), pose.speed)
        px, py, ppsi = lx, ly, pose.heading
    return out


def check_state(flat: np.ndarray, tol: float = 1e-6) -> list[str]:
    """Schema violations of a generated (unperturbed) state; empty if valid."""
    problems = []
    flat = np.asarray(flat)
    if flat.shape != (STATE_DIM,):
        return [f"shape {flat.shape}"]
    if not np.all(np.isfinite(flat)):
        problems.append("non-finite value")
    objs = flat[OBJECTS_SLICE].reshape(NUM_OBJECTS, OBJECT_DIM)
    mask = flat[MASK_SLICE]
    if not np.all((mask == 0.0) | (mask == 1.0)):
        problems.append("mask not binary")
    valid = mask == 1.0
    if np.any(valid[1:] & ~valid[:-1]):
        problems.append("padded slot precedes a valid slot")
    if np.any(objs[~valid] != 0.0):
        problems.append("masked slot not zero")
    d = objs[valid, 7]
    if np.any(np.abs(d - np.hypot(objs[valid, 0], objs[valid, 1])) > tol):
        problems.append("distance inconsistent with (x_rel, y_rel)")
    if np.any(np.diff(d) < 0):
        problems.append("distances not sorted")
    if np.any(d > OBJECT_RADIUS):
        problems.append("object beyond radius")
    if np.any(objs[valid, 4] <= 0) or np.any(objs[valid, 5] <= 0):
        problems.append("non-positive object size")
    return problems


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Ordered samples stored column-wise.

    ``states`` is (N, 97), ``targets`` (N, 20, 4); ``seq``, ``t`` and
    ``crossing`` are per-sample identifiers.
    """

    states: np.ndarray
    targets: np.ndarray
    seq: list[str]
    t: list[float]
    crossing: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, STATE_DIM)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, HORIZON, TARGET_CHANNELS)
        n = len(self.states)
        if not (len(self.targets) == len(self.seq) == len(self.t) == len(self.crossing) == n):
            raise DatasetFormatError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def empty(cls, metadata: dict | None = None) -> "Dataset":
        return cls(np.zeros((0, STATE_DIM)), np.zeros((0, HORIZON, TARGET_CHANNELS)), [], [], [], metadata or {})

    def sample_ids(self) -> list[str]:
        return [f"{s}@{t:.1f}" for s, t in zip(self.seq, self.t)]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.states[index], self.targets[index],
                       [self.seq[i] for i in index], [self.t[i] for i in index],
                       [self.crossing[i] for i in index], dict(self.metadata))

    def for_crossing(self, crossing_id: str) -> "Dataset":
        return self.subset([i for i, c in enumerate(self.crossing) if c == crossing_id])

    def crossings(self) -> list[str]:
        return sorted(set(self.crossing))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.states).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        h.update("\n".join(self.sample_ids()).encode())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (self.states.shape == other.states.shape
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.targets, other.targets)
                and self.seq == other.seq and self.t == other.t
                and self.crossing == other.crossing and self.header() == other.header())

    def header(self) -> dict:
        """Metadata as persisted: required header keys filled in."""
        meta = {"schema_version": SCHEMA_VERSION, "seed": None, "crossing": self.crossings(),
                "frequency_hz": FREQUENCY_HZ, "horizon": HORIZON}
        meta.update(self.metadata)
        meta["schema_version"] = SCHEMA_VERSION
        return meta

    @staticmethod
    def concat(parts: Sequence["Dataset"], metadata: dict | None = None) -> "Dataset":
        if not parts:
            return Dataset.empty(metadata)
        return Dataset(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.targets for p in parts]),
            [s for p in parts for s in p.seq], [t for p in parts for t in p.t],
            [c for p in parts for c in p.crossing], metadata or dict(parts[0].metadata),
        )


_HEADER_KEYS = ("schema_version", "seed", "crossing", "frequency_hz", "horizon")


def write_dataset(dataset: Dataset, path) -> None:
    """JSON Lines: one metadata header, then one object per sample.

    Floats go through ``repr`` so reading them back is exact.
    """
    meta = dataset.header()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i in range(len(dataset)):
            record = {
                "state": dataset.states[i].tolist(),
                "target": dataset.targets[i].tolist(),
                "seq": dataset.seq[i],
                "t": dataset.t[i],
                "crossing": dataset.crossing[i],
            }
            fh.write(json.dumps(record) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    states, targets, seqs, times, crossings = [], [], [], [], []
    meta = None
    offset = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            where = f"{path}:{lineno} (byte {offset})"
            offset += len(line.encode("utf-8"))
            if not line.endswith("\n"):
                raise DatasetFormatError(f"{where}: truncated record (no line terminator)")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{where}: invalid JSON: {exc.msg}") from None
            if meta is None:
                if not isinstance(obj, dict) or any(k not in obj for k in _HEADER_KEYS):
                    raise DatasetFormatError(f"{where}: header must contain {list(_HEADER_KEYS)}")
                if obj["schema_version"] != SCHEMA_VERSION:
                    raise SchemaVersionError(
                        f"{where}: schema_version {obj['schema_version']} unsupported (expected {SCHEMA_VERSION})")
                meta = obj
                continue
            try:
                state = obj["state"]
                target = obj["target"]
                if len(state) != STATE_DIM or len(target) != HORIZON or any(len(r) != TARGET_CHANNELS for r in target):
                    raise DatasetFormatError(f"{where}: state/target has wrong shape")
                states.append(state)
                targets.append(target)
                seqs.append(str(obj["seq"]))
                times.append(float(obj["t"]))
                crossings.append(str(obj["crossing"]))
            except (KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{where}: malformed sample record ({exc!r})") from None
    if meta is None:
        raise DatasetFormatError(f"{path}: empty file, missing header")
    if not states:
        return Dataset.empty(meta)
    return Dataset(np.array(states, dtype=np.float64), np.array(targets, dtype=np.float64),
                   seqs, times, crossings, meta)
