"""Intersection scenarios: participants, trajectory hypotheses, AOG/POG rasterization, datasets.

Coordinates are meters in the ego frame: x points forward, y to the left, and
the ego center of gravity sits at (2.5, 0) with heading 0. The layout is a
four-way crossing of two-lane roads with right-hand traffic.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grid as _grid
from ._parallel import parallel_map
from .grid import AugmentedOccupancyGrid, GridConfig, PredictedOccupancyGrid

EGO_POSITION = (2.5, 0.0)
KINDS = ("ego", "car", "bicycle", "static")
LAYOUT_KINDS = ("four-way-open", "four-way-left-no-entry")
TEMPLATES = ("straight", "left", "right", "brake")
ARMS = ("ego", "ahead", "right", "left")

DEFAULT_FOOTPRINTS = {
    "ego": (4.0, 1.8),
    "car": (4.0, 1.8),
    "bicycle": (1.8, 0.6),
    "static": (1.0, 1.0),
}

BRAKE_DECEL = 4.0
# acceleration offsets applied when more hypotheses are requested than templates exist
VARIANT_ACCEL_OFFSETS = (0.0, 1.5, -1.5, 3.0, -3.0)

# (approach arm, maneuver) -> exit arm
_EXITS = {
    ("ego", "straight"): "ahead", ("ego", "left"): "left", ("ego", "right"): "right",
    ("ahead", "straight"): "ego", ("ahead", "left"): "right", ("ahead", "right"): "left",
    ("right", "straight"): "left", ("right", "left"): "ego", ("right", "right"): "ahead",
    ("left", "straight"): "right", ("left", "left"): "ahead", ("left", "right"): "ego",
}


@dataclass(frozen=True)
class RoadLayout:
    """Four-way intersection. ``center`` is the crossing point in the ego frame."""

    kind: str = "four-way-open"
    extent: tuple[float, float] = (40.0, 40.0)
    lane_width: float = 3.5

    def __post_init__(self):
        if self.kind not in LAYOUT_KINDS:
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if not (self.extent[0] > 0 and self.extent[1] > 0 and self.lane_width > 0):
            raise ValueError("layout extent and lane width must be positive")
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))

    @property
    def half_width(self) -> float:
        return self.lane_width

    @property
    def center(self) -> tuple[float, float]:
        # ego drives in the right lane, so the road axis is half a lane to its left
        return (self.extent[0] / 2.0, self.lane_width / 2.0)

    @property
    def origin(self) -> tuple[float, float]:
        """Lower-left corner of the covered area."""
        return (0.0, self.center[1] - self.extent[1] / 2.0)

    @property
    def closed_arms(self) -> frozenset:
        return frozenset({"left"}) if self.kind == "four-way-left-no-entry" else frozenset()

    def permitted_maneuvers(self, arm: str) -> tuple[str, ...]:
        ok = tuple(m for m in ("straight", "left", "right")
                   if _EXITS[(arm, m)] not in self.closed_arms)
        return ok + ("brake",)

    def grid_config(self, rows: int, cols: int) -> GridConfig:
        return GridConfig(rows, cols, self.extent[0] / rows, self.extent[1] / cols, self.origin, 5)

    def markings(self) -> list[np.ndarray]:
        """Lane-boundary polylines, each an (n, 2) array."""
        cx, cy = self.center
        w = self.half_width
        x0, y0 = self.origin
        x1, y1 = x0 + self.extent[0], y0 + self.extent[1]
        lines = []
        for off in (-w, 0.0, w):
            lines.append(np.array([[x0, cy + off], [cx - w, cy + off]]))
            lines.append(np.array([[cx + w, cy + off], [x1, cy + off]]))
            lines.append(np.array([[cx + off, y0], [cx + off, cy - w]]))
            lines.append(np.array([[cx + off, cy + w], [cx + off, y1]]))
        if "left" in self.closed_arms:
            # bar across the lane leading into the closed arm
            lines.append(np.array([[cx, cy + w], [cx + w, cy + w]]))
        return lines

    def on_road(self, x: float, y: float) -> bool:
        cx, cy = self.center
        x0, y0 = self.origin
        if not (x0 <= x <= x0 + self.extent[0] and y0 <= y <= y0 + self.extent[1]):
            return False
        return abs(y - cy) <= self.half_width or abs(x - cx) <= self.half_width

    def to_dict(self) -> dict:
        return {"kind": self.kind, "extent": list(self.extent), "lane_width": self.lane_width}

    @classmethod
    def from_dict(cls, d: dict) -> RoadLayout:
        return cls(d.get("kind", "four-way-open"), tuple(d.get("extent", (40.0, 40.0))),
                   float(d.get("lane_width", 3.5)))


@dataclass(frozen=True)
class TrafficParticipant:
    id: int
    kind: str
    pose: tuple[float, float, float]
    velocity: float = 0.0
    accel: tuple[float, float] = (0.0, 0.0)
    footprint: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown participant kind {self.kind!r}")
        if self.footprint is None:
            object.__setattr__(self, "footprint", DEFAULT_FOOTPRINTS[self.kind])
        if not (self.footprint[0] > 0 and self.footprint[1] > 0):
            raise ValueError("footprint dimensions must be positive")
        if self.velocity < 0:
            raise ValueError("velocity must be nonnegative")
        object.__setattr__(self, "pose", tuple(float(v) for v in self.pose))
        object.__setattr__(self, "accel", tuple(float(v) for v in self.accel))
        object.__setattr__(self, "footprint", tuple(float(v) for v in self.footprint))

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "pose": list(self.pose),
                "velocity": self.velocity, "accel": list(self.accel),
                "footprint": list(self.footprint)}

    @classmethod
    def from_dict(cls, d: dict) -> TrafficParticipant:
        return cls(int(d["id"]), d["kind"], tuple(d["pose"]), float(d.get("velocity", 0.0)),
                   tuple(d.get("accel", (0.0, 0.0))), tuple(d["footprint"]) if "footprint" in d else None)


@dataclass(frozen=True, eq=False)
class TrajectoryHypothesis:
    """Timed poses ``(t, x, y, psi)`` of one participant under one maneuver."""

    participant: int
    poses: np.ndarray
    probability: float
    template: str = "straight"
    accel_offset: float = 0.0

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != 4 or len(poses) == 0:
            raise ValueError("poses must be an (n, 4) array of (t, x, y, psi)")
        if np.any(np.diff(poses[:, 0]) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("hypothesis probability outside [0, 1]")
        poses.flags.writeable = False
        object.__setattr__(self, "poses", poses)

    def pose_at(self, t: float) -> tuple[float, float, float]:
        ts = self.poses[:, 0]
        if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise ValueError(f"t_pred={t} outside hypothesis span [{ts[0]}, {ts[-1]}]")
        k = int(np.searchsorted(ts, t))
        if k < len(ts) and abs(ts[k] - t) <= 1e-9:
            return tuple(self.poses[k, 1:])
        if k > 0 and abs(ts[k - 1] - t) <= 1e-9:
            return tuple(self.poses[k - 1, 1:])
        a, b = self.poses[k - 1], self.poses[k]
        w = (t - a[0]) / (b[0] - a[0])
        return tuple(a[1:] + w * (b[1:] - a[1:]))


@dataclass(frozen=True, eq=False)
class Scenario:
    layout: RoadLayout
    participants: tuple[TrafficParticipant, ...]
    hypotheses: tuple[tuple[TrajectoryHypothesis, ...], ...]
    rng_seed: int = 0
    horizon: float = 1.0
    dt: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "hypotheses", tuple(tuple(h) for h in self.hypotheses))
        if len(self.hypotheses) != len(self.participants):
            raise ValueError("need one hypothesis set per participant")
        n_ego = sum(p.kind == "ego" for p in self.participants)
        if self.participants and n_ego != 1:
            raise ValueError(f"scenario needs exactly one ego participant, found {n_ego}")
        for part, hyps in zip(self.participants, self.hypotheses):
            if not hyps:
                raise ValueError(f"participant {part.id} has no hypotheses")
            total = math.fsum(h.probability for h in hyps)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"participant {part.id}: hypothesis probabilities sum to {total}")

    @property
    def ego(self) -> TrafficParticipant | None:
        return next((p for p in self.participants if p.kind == "ego"), None)


# -- kinematics -------------------------------------------------------------

def _arc_length(v0: float, a: float, t: np.ndarray) -> np.ndarray:
    if a >= 0:
        return v0 * t + 0.5 * a * t * t
    t_stop = v0 / -a
    tc = np.minimum(t, t_stop)
    return v0 * tc + 0.5 * a * tc * tc


def _path_pose(s: np.ndarray, x0, y0, psi0, template: str, entry: float, radius: float):
    """Pose after arc length ``s`` along a straight-arc-straight path."""
    hx, hy = math.cos(psi0), math.sin(psi0)
    if template in ("straight", "brake", "stationary"):
        return x0 + s * hx, y0 + s * hy, np.full_like(s, psi0)
    sign = 1.0 if template == "left" else -1.0
    nx, ny = -hy, hx
    arc = radius * math.pi / 2.0
    x = np.empty_like(s)
    y = np.empty_like(s)
    psi = np.empty_like(s)
    pre = s <= entry
    x[pre], y[pre], psi[pre] = x0 + s[pre] * hx, y0 + s[pre] * hy, psi0
    dx, dy = x0 + entry * hx, y0 + entry * hy
    mid = (~pre) & (s <= entry + arc)
    th = (s[mid] - entry) / radius
    x[mid] = dx + radius * (np.sin(th) * hx + sign * (1 - np.cos(th)) * nx)
    y[mid] = dy + radius * (np.sin(th) * hy + sign * (1 - np.cos(th)) * ny)
    psi[mid] = psi0 + sign * th
    post = s > entry + arc
    ex = dx + radius * (hx + sign * nx)
    ey = dy + radius * (hy + sign * ny)
    psi_end = psi0 + sign * math.pi / 2
    rest = s[post] - entry - arc
    x[post] = ex + rest * math.cos(psi_end)
    y[post] = ey + rest * math.sin(psi_end)
    psi[post] = psi_end
    return x, y, psi


def approach_arm(p: TrafficParticipant, road: RoadLayout) -> str | None:
    """Arm the participant drives toward the crossing from, or None if off-road or departing."""
    x, y, psi = p.pose
    if not road.on_road(x, y):
        return None
    cx, cy = road.center
    if np.hypot(cx - x, cy - y) > 1e-9 and (cx - x) * math.cos(psi) + (cy - y) * math.sin(psi) <= 0:
        return None
    # arm opposite to the (axis-snapped) heading
    k = int(round(psi / (math.pi / 2))) % 4
    return ("ego", "right", "ahead", "left")[k]


def _turn_geometry(p: TrafficParticipant, road: RoadLayout) -> tuple[float, float, float]:
    """(distance to crossing entry, left radius, right radius)."""
    x, y, psi = p.pose
    cx, cy = road.center
    along = (cx - x) * math.cos(psi) + (cy - y) * math.sin(psi)
    entry = max(0.0, along - road.half_width)
    return entry, road.half_width + road.lane_width / 2.0, road.lane_width / 2.0


def _time_grid(horizon: float, dt: float) -> np.ndarray:
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    n = round(horizon / dt)
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"dt={dt} does not divide horizon={horizon}")
    return np.arange(n + 1) * dt


def rollout(p: TrafficParticipant, road: RoadLayout, template: str, horizon: float, dt: float,
            accel_offset: float = 0.0) -> np.ndarray:
    """Poses (t, x, y, psi) for one maneuver template."""
    t = _time_grid(horizon, dt)
    x0, y0, psi0 = p.pose
    if template == "stationary" or p.kind == "static":
        s = np.zeros_like(t)
    elif template == "brake":
        s = _arc_length(p.velocity, -BRAKE_DECEL, t)
    else:
        s = _arc_length(p.velocity, p.accel[0] + accel_offset, t)
    entry, r_left, r_right = _turn_geometry(p, road)
    radius = r_left if template == "left" else r_right
    x, y, psi = _path_pose(s, x0, y0, psi0, template, entry, radius)
    return np.column_stack([t, x, y, psi])


def hypothesis_plan(p: TrafficParticipant, road: RoadLayout, s_count: int) -> list[tuple[str, float]]:
    """Ordered (template, accel offset) pairs for ``s_count`` hypotheses."""
    if s_count < 1:
        raise ValueError("s_count must be >= 1")
    if p.kind == "static":
        base = ["stationary"]
    else:
        arm = approach_arm(p, road)
        base = ["straight"] if arm is None else list(road.permitted_maneuvers(arm))
    plan = []
    for k in range(s_count):
        rep, idx = divmod(k, len(base))
        offset = VARIANT_ACCEL_OFFSETS[rep % len(VARIANT_ACCEL_OFFSETS)] * (1 + rep // len(VARIANT_ACCEL_OFFSETS))
        plan.append((base[idx], 0.0 if base[idx] == "stationary" else offset))
    return plan


def generate_hypotheses(participant: TrafficParticipant, road: RoadLayout, s_count: int = 3,
                        horizon: float = 1.0, dt: float = 0.1,
                        prior: dict[str, float] | None = None) -> list[TrajectoryHypothesis]:
    """Kinematic rollouts of permitted maneuver templates.

    ``prior`` maps template names to relative weights (uniform when omitted);
    weights are renormalized over the selected hypotheses.
    """
    plan = hypothesis_plan(participant, road, s_count)
    weights = np.array([1.0 if prior is None else float(prior.get(t, 0.0)) for t, _ in plan])
    if weights.sum() <= 0:
        raise ValueError("prior assigns zero weight to every selected template")
    probs = weights / weights.sum()
    return [TrajectoryHypothesis(participant.id, rollout(participant, road, t, horizon, dt, off),
                                 float(pr), t, off)
            for (t, off), pr in zip(plan, probs)]


def make_scenario(layout: RoadLayout, participants, s_count: int = 3, horizon: float = 1.0,
                  dt: float = 0.1, prior: dict[str, float] | None = None, rng_seed: int = 0) -> Scenario:
    hyps = [generate_hypotheses(p, layout, s_count, horizon, dt, prior) for p in participants]
    return Scenario(layout, tuple(participants), tuple(tuple(h) for h in hyps), rng_seed, horizon, dt)


# -- rasterization ----------------------------------------------------------

def footprint_mask(config: GridConfig, x: float, y: float, psi: float,
                   footprint: tuple[float, float]) -> np.ndarray:
    """Cells whose center lies inside the oriented rectangle centered at (x, y)."""
    cxs, cys = config.cell_centers()
    dx, dy = cxs - x, cys - y
    c, s = math.cos(psi), math.sin(psi)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= footprint[0] / 2.0) & (np.abs(v) <= footprint[1] / 2.0)


def _ego_transform(scenario: Scenario):
    """(x, y, psi) -> ego-frame map putting the ego CG at (2.5, 0) with heading 0."""
    ego = scenario.ego
    if ego is None:
        return lambda x, y, psi: (x, y, psi)
    ex, ey, epsi = ego.pose
    if (ex, ey, epsi) == (EGO_POSITION[0], EGO_POSITION[1], 0.0):
        return lambda x, y, psi: (x, y, psi)
    c, s = math.cos(-epsi), math.sin(-epsi)

    def tf(x, y, psi):
        dx, dy = x - ex, y - ey
        return (EGO_POSITION[0] + c * dx - s * dy, EGO_POSITION[1] + s * dx + c * dy, psi - epsi)
    return tf


def trace_polyline(config: GridConfig, line: np.ndarray) -> np.ndarray:
    """Boolean mask of cells touched by a polyline, one cell wide."""
    mask = np.zeros(config.shape, dtype=bool)
    step = min(config.cell_length, config.cell_width) / 4.0
    for a, b in zip(line[:-1], line[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / step)))
        for w in np.linspace(0.0, 1.0, n + 1):
            cell = config.cell_of(*(a + w * (b - a)))
            if cell is not None:
                mask[cell] = True
    return mask


@dataclass
class BuildReport:
    clipped: list[int] = field(default_factory=list)
    invisible: list[int] = field(default_factory=list)


def build_aog_with_report(scenario: Scenario, config: GridConfig) -> tuple[AugmentedOccupancyGrid, BuildReport]:
    report = BuildReport()
    cells = np.zeros((config.rows, config.cols, 5))
    tf = _ego_transform(scenario)
    for line in scenario.layout.markings():
        pts = np.array([tf(x, y, 0.0)[:2] for x, y in line])
        cells[trace_polyline(config, pts)] = (1.0, 0.0, 0.0, 0.0, 0.0)
    ordered = sorted(scenario.participants, key=lambda p: (p.kind != "static", p.id))
    x0, y0 = config.origin
    x1, y1 = x0 + config.extent[0], y0 + config.extent[1]
    for p in ordered:
        x, y, psi = tf(*p.pose)
        mask = footprint_mask(config, x, y, psi, p.footprint)
        r = 0.5 * math.hypot(*p.footprint)
        if x - r < x0 or x + r > x1 or y - r < y0 or y + r > y1:
            report.clipped.append(p.id)
        if not mask.any():
            report.invisible.append(p.id)
        if p.kind == "static":
            cells[mask] = (1.0, 0.0, 0.0, 0.0, 0.0)
        else:
            cells[mask] = (1.0, p.velocity, psi, p.accel[0], p.accel[1])
    return AugmentedOccupancyGrid(config, cells), report


def build_aog(scenario: Scenario, config: GridConfig) -> AugmentedOccupancyGrid:
    """Current-state grid in the ego frame; participants outside the grid are clipped."""
    return build_aog_with_report(scenario, config)[0]


def rasterize_hypothesis(h: TrajectoryHypothesis, footprint: tuple[float, float], config: GridConfig,
                         t_pred: float, transform=None) -> np.ndarray:
    x, y, psi = h.pose_at(t_pred)
    if transform is not None:
        x, y, psi = transform(x, y, psi)
    return footprint_mask(config, x, y, psi, footprint)


def compute_ground_truth_pog(scenario: Scenario, config: GridConfig, t_pred: float) -> PredictedOccupancyGrid:
    """Per cell: min(1, sum over participants and hypotheses of mask * probability)."""
    tf = _ego_transform(scenario)
    acc = np.zeros(config.shape)
    for p, hyps in zip(scenario.participants, scenario.hypotheses):
        for h in hyps:
            acc += rasterize_hypothesis(h, p.footprint, config, t_pred, tf) * h.probability
    return PredictedOccupancyGrid(config, t_pred, np.minimum(1.0, acc))


# -- sampling ---------------------------------------------------------------

KMH = 1.0 / 3.6
SPEED_RANGE = (10.0 * KMH, 35.0 * KMH)
ACCEL_RANGE = (0.0, 4.0)
POSITION_RANGE = 10.0
HEADING_RANGE = math.radians(60.0)
APPROACH_GAP = 7.0  # nominal distance from the crossing box to a participant's center


def _nominal_poses(road: RoadLayout) -> dict[str, tuple[float, float, float]]:
    cx, cy = road.center
    w, lane = road.half_width, road.lane_width / 2.0
    return {
        "ahead": (cx + w + APPROACH_GAP, cy + lane, math.pi),
        "right": (cx - lane, cy - w - APPROACH_GAP, math.pi / 2),
        "left": (cx + lane, cy + w + APPROACH_GAP, -math.pi / 2),
    }


def sample_participants(template: RoadLayout, rng: np.random.Generator,
                        footprints: dict[str, tuple[float, float]] | None = None) -> list[TrafficParticipant]:
    """Ego plus two cars and a bicyclist with jittered position, speed, heading and acceleration."""
    fp = dict(DEFAULT_FOOTPRINTS, **(footprints or {}))
    nominal = _nominal_poses(template)
    participants = [TrafficParticipant(
        0, "ego", (EGO_POSITION[0], EGO_POSITION[1], 0.0), float(rng.uniform(*SPEED_RANGE)),
        (float(rng.uniform(*ACCEL_RANGE)), 0.0), fp["ego"])]
    for pid, (kind, arm) in enumerate((("car", "ahead"), ("car", "right"), ("bicycle", "left")), 1):
        x, y, psi = nominal[arm]
        shift = rng.uniform(-POSITION_RANGE / 2, POSITION_RANGE / 2)
        speed = rng.uniform(*SPEED_RANGE)
        dpsi = rng.uniform(-HEADING_RANGE / 2, HEADING_RANGE / 2)
        ax = rng.uniform(*ACCEL_RANGE)
        participants.append(TrafficParticipant(
            pid, kind, (x + shift * math.cos(psi), y + shift * math.sin(psi), psi + dpsi),
            float(speed), (float(ax), 0.0), fp[kind]))
    return participants


def sample_scenario(template: RoadLayout, rng_seed: int, s_count: int = 3, horizon: float = 1.0,
                    dt: float = 0.1, prior: dict[str, float] | None = None,
                    footprints: dict[str, tuple[float, float]] | None = None) -> Scenario:
    participants = sample_participants(template, np.random.default_rng(rng_seed), footprints)
    return make_scenario(template, participants, s_count, horizon, dt, prior, rng_seed)


def scenario_seed(seed: int, index: int) -> int:
    """Independent per-scenario seed derived from (dataset seed, scenario index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


# -- scenario files ---------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "layout": s.layout.to_dict(),
        "seed": s.rng_seed,
        "horizon": s.horizon,
        "dt": s.dt,
        "participants": [
            dict(p.to_dict(), hypotheses=[
                {"template": h.template, "accel_offset": h.accel_offset, "probability": h.probability}
                for h in hyps])
            for p, hyps in zip(s.participants, s.hypotheses)],
    }


def scenario_from_dict(d: dict) -> Scenario:
    """Build a scenario from its JSON form.

    Participants either list explicit ``hypotheses`` (template, probability,
    optional accel_offset) or get ``s_count`` template rollouts with ``prior``.
    """
    layout = RoadLayout.from_dict(d.get("layout", {}))
    horizon, dt = float(d.get("horizon", 1.0)), float(d.get("dt", 0.1))
    s_count = int(d.get("s_count", 3))
    prior = d.get("prior")
    parts, hyps = [], []
    for pd in d["participants"]:
        p = TrafficParticipant.from_dict(pd)
        parts.append(p)
        if "hypotheses" in pd:
            hyps.append(tuple(
                TrajectoryHypothesis(p.id, rollout(p, layout, hd["template"], horizon, dt,
                                                   float(hd.get("accel_offset", 0.0))),
                                     float(hd["probability"]), hd["template"],
                                     float(hd.get("accel_offset", 0.0)))
                for hd in pd["hypotheses"]))
        else:
            hyps.append(tuple(generate_hypotheses(p, layout, s_count, horizon, dt, prior)))
    return Scenario(layout, tuple(parts), tuple(hyps), int(d.get("seed", 0)), horizon, dt)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True))


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """In-memory paired grids. ``aogs`` is (n, rows, cols, 5); ``pogs``/``qpogs`` are (n, rows, cols)."""

    config: GridConfig
    t_pred: float
    ids: np.ndarray
    aogs: np.ndarray
    pogs: np.ndarray
    qpogs: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def aog(self, k: int) -> AugmentedOccupancyGrid:
        return AugmentedOccupancyGrid(self.config, self.aogs[k])

    def pog(self, k: int) -> PredictedOccupancyGrid:
        return PredictedOccupancyGrid(self.config.with_attributes(1), self.t_pred, self.pogs[k])

    def qpog(self, k: int) -> _grid.QuantizedPog:
        return _grid.QuantizedPog(self.config.with_attributes(1), self.t_pred, self.qpogs[k])

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return Dataset(self.config, self.t_pred, self.ids[index], self.aogs[index],
                       self.pogs[index], self.qpogs[index], self.manifest)

    @classmethod
    def from_scenarios(cls, scenarios, config: GridConfig, t_pred: float, ids=None) -> Dataset:
        aogs, pogs = [], []
        for s in scenarios:
            aogs.append(build_aog(s, config).cells)
            pogs.append(compute_ground_truth_pog(s, config, t_pred).probs)
        pogs = np.array(pogs).reshape(-1, config.rows, config.cols)
        ids = np.arange(len(pogs)) if ids is None else np.asarray(ids)
        return cls(config.with_attributes(5), t_pred, ids,
                   np.array(aogs).reshape(-1, config.rows, config.cols, 5), pogs,
                   _grid.LEVELS[_grid.level_index(pogs)])


def _record(args):
    template, seed, index, config, t_pred, s_count, horizon, dt, prior, footprints = args
    s = sample_scenario(template, scenario_seed(seed, index), s_count, horizon, dt, prior, footprints)
    aog, report = build_aog_with_report(s, config)
    pog = compute_ground_truth_pog(s, config, t_pred)
    return aog, pog, _grid.quantize_pog(pog), report


def generate_dataset(template: RoadLayout, n_total: int, train_fraction: float, seed: int,
                     config: GridConfig, t_pred: float, out_dir, s_count: int = 3,
                     horizon: float = 1.0, dt: float = 0.1, prior: dict[str, float] | None = None,
                     footprints: dict[str, tuple[float, float]] | None = None,
                     workers: int | None = None) -> Path:
    """Sample ``n_total`` scenarios and write AOG / POG / quantized-POG grids plus a manifest.

    Returns the manifest path. Output bytes depend only on the arguments.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split in ("train", "validation"):
            (out / split).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    n_train = int(round(n_total * train_fraction))
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1])).permutation(n_total)
    split_of = np.empty(n_total, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:]] = "validation"

    fp = dict(DEFAULT_FOOTPRINTS, **(footprints or {}))
    config = config.with_attributes(5)
    jobs = [(template, seed, i, config, t_pred, s_count, horizon, dt, prior, fp) for i in range(n_total)]
    records = []
    for i, (aog, pog, qpog, report) in enumerate(parallel_map(_record, jobs, workers)):
        split = split_of[i]
        stem = f"{split}/{i:06d}"
        paths = {"aog": f"{stem}.aog", "pog": f"{stem}.pog", "qpog": f"{stem}.qpog"}
        for key, g in (("aog", aog), ("pog", pog), ("qpog", qpog)):
            try:
                _grid.save_grid(out / paths[key], g)
            except OSError as exc:
                raise OSError(f"cannot write {out / paths[key]}: {exc}") from exc
        records.append(dict(paths, id=i, split=split, seed=scenario_seed(seed, i),
                            clipped=report.clipped))
    manifest = {
        "format": "pogrid-dataset",
        "version": 1,
        "seed": seed,
        "n_total": n_total,
        "n_train": n_train,
        "n_validation": n_total - n_train,
        "train_fraction": train_fraction,
        "grid": config.to_dict(),
        "layout": template.to_dict(),
        "t_pred": t_pred,
        "s_count": s_count,
        "horizon": horizon,
        "dt": dt,
        "prior": prior,
        "footprints": {k: list(v) for k, v in sorted(fp.items())},
        "records": records,
    }
    manifest["config_hash"] = dataset_config_hash(manifest)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def dataset_config_hash(manifest: dict) -> str:
    """Hash of the settings that determine grid shapes and targets."""
    keys = {k: manifest[k] for k in ("grid", "layout", "t_pred", "s_count", "horizon", "dt",
                                     "prior", "footprints")}
    return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def load_dataset(path, split: str | None = None) -> Dataset:
    """Load a dataset from its directory or manifest path; ``split`` filters records."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read dataset manifest {path}: {exc}") from exc
    root = path.parent
    config = GridConfig.from_dict(manifest["grid"]).with_attributes(5)
    t_pred = float(manifest["t_pred"])
    recs = [r for r in manifest["records"] if split is None or r["split"] == split]
    aogs, pogs, qpogs = [], [], []
    for r in recs:
        aogs.append(_grid.decode_grid((root / r["aog"]).read_bytes())[0])
        pogs.append(np.clip(_grid.decode_grid((root / r["pog"]).read_bytes())[0][..., 0], 0, 1))
        qpogs.append(_grid.decode_grid((root / r["qpog"]).read_bytes())[0][..., 0])
    shape = (len(recs), config.rows, config.cols)
    qpogs = np.array(qpogs).reshape(shape)
    return Dataset(config, t_pred, np.array([r["id"] for r in recs], dtype=np.int64),
                   np.array(aogs).reshape(shape + (5,)), np.array(pogs).reshape(shape),
                   _grid.LEVELS[_grid.level_index(qpogs)], manifest)


def with_split(ds: Dataset, split: str) -> Dataset:
    """Records of ``ds`` belonging to ``split`` according to its manifest."""
    wanted = {r["id"] for r in ds.manifest.get("records", []) if r["split"] == split}
    return ds.subset([k for k, i in enumerate(ds.ids) if int(i) in wanted])


__all__ = [
    "RoadLayout", "TrafficParticipant", "TrajectoryHypothesis", "Scenario", "Dataset",
    "build_aog", "build_aog_with_report", "generate_hypotheses", "rasterize_hypothesis",
    "compute_ground_truth_pog", "sample_scenario", "generate_dataset", "load_dataset",
    "make_scenario", "load_scenario", "save_scenario", "scenario_from_dict", "scenario_to_dict",
    "footprint_mask", "sample_participants", "scenario_seed", "with_split",
]
