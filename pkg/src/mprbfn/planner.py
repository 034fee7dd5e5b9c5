"""Receding-horizon sampling planner on a straight multi-lane road.

Candidates are lattice endpoints (lateral offset, advance, heading) expressed in
the ego frame, turned into trajectories by a generator (any callable mapping a
``(B, 5)`` query batch to ``(B, n_points, 5)`` trajectories, symmetrized by
default, see ``symmetrized``), moved back to the world frame and scored. The cheapest candidate is executed for one step.

Scenario files are JSON objects::

    {
      "lane_width_m": 3.5, "n_lanes": 2, "desired_speed_m_s": 20.0,
      "ego": {"x_m": 0, "y_m": 0, "speed_m_s": 20, "yaw_rad": 0, "steer_rad": 0},
      "obstacles": [{"x_m": 30, "y_m": 0, "yaw_rad": 0, "speed_m_s": 10,
                     "length_m": 4.5, "width_m": 1.8}],
      "sampling": {"offsets_m": [...], "advances_m": [...], "headings_rad": [...]},
      "weights": {"velocity": 0.1, "offset": 0.02, "collision": 10.0, "safety_distance_m": 2.0}
    }

Lane centres sit at ``y = k * lane_width`` for ``k = 0 .. n_lanes - 1`` (the
ego lane is the reference line ``y = 0``); a negative ``n_lanes`` puts the
extra lanes on the right.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import reachable_range, speed_envelope
from .ocp import TimeGrid
from .vehicle import State, VehicleParams


class ScenarioError(ValueError):
    pass


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    x_m: float
    y_m: float
    yaw_rad: float = 0.0
    speed_m_s: float = 0.0
    length_m: float = 4.5
    width_m: float = 1.8

    def pose_at(self, t) -> tuple[np.ndarray, np.ndarray, float]:
        """Centre position at times ``t`` under constant velocity."""
        t = np.asarray(t, dtype=np.float64)
        c, s = math.cos(self.yaw_rad), math.sin(self.yaw_rad)
        return self.x_m + self.speed_m_s * c * t, self.y_m + self.speed_m_s * s * t, self.yaw_rad


@dataclass(frozen=True)
class SamplingSpec:
    offsets_m: tuple[float, ...] = (-3.5, 0.0, 3.5)
    advances_m: tuple[float, ...] = (40.0, 50.0, 60.0, 70.0)
    headings_rad: tuple[float, ...] = (0.0,)


@dataclass(frozen=True)
class CostWeights:
    velocity: float = 0.1
    offset: float = 0.2
    collision: float = 10.0
    safety_distance_m: float = 2.0

    def __post_init__(self):
        if min(self.velocity, self.offset, self.collision) < 0 or self.safety_distance_m <= 0:
            raise ValueError("cost weights must be non-negative and the safety distance positive")


@dataclass(frozen=True)
class Scenario:
    desired_speed_m_s: float = 20.0
    ego: State = State(speed_m_s=20.0)
    obstacles: tuple[Obstacle, ...] = ()
    lane_width_m: float = 3.5
    n_lanes: int = 2
    ego_length_m: float = 4.5
    ego_width_m: float = 1.8
    # footprints are grown by this margin on every side before clearance checks
    footprint_margin_m: float = 0.1
    sampling: SamplingSpec = SamplingSpec()
    weights: CostWeights = CostWeights()
    params: VehicleParams = VehicleParams()

    def __post_init__(self):
        if not 0 <= self.desired_speed_m_s <= self.params.max_speed_m_s:
            raise ValueError("desired speed must lie in [0, v_max]")
        if self.n_lanes == 0 or self.lane_width_m <= 0:
            raise ValueError("road needs at least one lane of positive width")

    def lane_centres(self) -> np.ndarray:
        sign = 1 if self.n_lanes > 0 else -1
        return sign * self.lane_width_m * np.arange(abs(self.n_lanes))

    def road_bounds(self) -> tuple[float, float]:
        c = self.lane_centres()
        half = 0.5 * self.lane_width_m
        return float(c.min() - half), float(c.max() + half)

    def mirrored(self) -> "Scenario":
        """Left-right mirror about the reference line."""
        e = self.ego
        return replace(
            self,
            ego=State(e.x_m, -e.y_m, -e.steer_rad, e.speed_m_s, e.accel_m_s2, -e.yaw_rad),
            obstacles=tuple(replace(o, y_m=-o.y_m, yaw_rad=-o.yaw_rad) for o in self.obstacles),
            n_lanes=-self.n_lanes,
            sampling=replace(self.sampling, offsets_m=tuple(-o for o in self.sampling.offsets_m),
                             headings_rad=tuple(-h for h in self.sampling.headings_rad)),
        )

    def to_dict(self) -> dict:
        e = self.ego
        return {
            "lane_width_m": self.lane_width_m,
            "n_lanes": self.n_lanes,
            "desired_speed_m_s": self.desired_speed_m_s,
            "ego": {"x_m": e.x_m, "y_m": e.y_m, "speed_m_s": e.speed_m_s, "yaw_rad": e.yaw_rad,
                    "steer_rad": e.steer_rad, "accel_m_s2": e.accel_m_s2},
            "ego_length_m": self.ego_length_m,
            "ego_width_m": self.ego_width_m,
            "footprint_margin_m": self.footprint_margin_m,
            "obstacles": [asdict(o) for o in self.obstacles],
            "sampling": {k: list(v) for k, v in asdict(self.sampling).items()},
            "weights": asdict(self.weights),
        }

    @classmethod
    def from_dict(cls, d: dict, params: VehicleParams | None = None) -> "Scenario":
        d = dict(d)
        ego = d.pop("ego", {})
        kw = {}
        if "obstacles" in d:
            kw["obstacles"] = tuple(Obstacle(**o) for o in d.pop("obstacles"))
        if "sampling" in d:
            kw["sampling"] = SamplingSpec(**{k: tuple(float(x) for x in v) for k, v in d.pop("sampling").items()})
        if "weights" in d:
            kw["weights"] = CostWeights(**d.pop("weights"))
        kw["ego"] = State(
            x_m=ego.get("x_m", 0.0), y_m=ego.get("y_m", 0.0), steer_rad=ego.get("steer_rad", 0.0),
            speed_m_s=ego.get("speed_m_s", 0.0), accel_m_s2=ego.get("accel_m_s2", 0.0), yaw_rad=ego.get("yaw_rad", 0.0),
        )
        return cls(params=params or VehicleParams(), **kw, **d)


def load_scenario(path, params: VehicleParams | None = None) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: line 1: scenario must be a JSON object")
    try:
        return Scenario.from_dict(data, params)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{path}: {e}") from None


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# frames


def to_local(points_xy, pose) -> np.ndarray:
    x0, y0, th = pose
    c, s = math.cos(th), math.sin(th)
    p = np.asarray(points_xy, dtype=np.float64)
    dx, dy = p[..., 0] - x0, p[..., 1] - y0
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def to_world(traj, pose) -> np.ndarray:
    """Rigid transform of ``(..., 5)`` local trajectories into the world frame."""
    x0, y0, th = pose
    c, s = math.cos(th), math.sin(th)
    t = np.array(traj, dtype=np.float64)
    x, y = t[..., 0].copy(), t[..., 1].copy()
    t[..., 0] = x0 + c * x - s * y
    t[..., 1] = y0 + s * x + c * y
    t[..., 4] = t[..., 4] + th
    return t


def sample_endpoints(ego: State, scenario: Scenario, grid: TimeGrid | None = None):
    """Candidate queries in the ego frame plus their world endpoints.

    Returns ``(queries (B, 5), world_endpoints (B, 3))``; candidates outside
    the reachable annulus are dropped.
    """
    grid = grid or TimeGrid()
    r_min, r_max = reachable_range(ego.speed_m_s, scenario.params, grid.horizon_s)
    pose = (ego.x_m, ego.y_m, ego.yaw_rad)
    queries, world = [], []
    for off in scenario.sampling.offsets_m:
        for adv in scenario.sampling.advances_m:
            for head in scenario.sampling.headings_rad:
                X, Y = ego.x_m + adv, off
                xf, yf = to_local([X, Y], pose)
                if not r_min - 1e-9 <= math.hypot(xf, yf) <= r_max + 1e-9:
                    continue
                queries.append((ego.speed_m_s, ego.steer_rad, xf, yf, head - ego.yaw_rad))
                world.append((X, Y, head))
    if not queries:
        raise PlannerError("no candidate endpoint inside the reachable range")
    return np.array(queries), np.array(world)


# ---------------------------------------------------------------------------
# geometry


def rectangle(cx, cy, yaw, length, width) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + (cx, cy)


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(a + t * ab - p))


def rect_clearance(A: np.ndarray, B: np.ndarray) -> float:
    """Signed clearance between two convex quadrilaterals.

    Positive: Euclidean gap. Non-positive: the overlap along the separating
    axis with the least penetration (negated).
    """
    best = -math.inf
    for poly in (A, B):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]]) / math.hypot(*edge)
            pa, pb = A @ axis, B @ axis
            best = max(best, pb.min() - pa.max(), pa.min() - pb.max())
    if best <= 0:
        return best
    gap = math.inf
    for P, Q in ((A, B), (B, A)):
        for p in P:
            for i in range(4):
                gap = min(gap, _point_segment_distance(p, Q[i], Q[(i + 1) % 4]))
    return gap


def ego_footprint(x, y, yaw, scenario: Scenario) -> np.ndarray:
    # the state tracks the rear axle; the body is centred half a wheelbase ahead
    off = 0.5 * scenario.params.wheelbase_m
    m = scenario.footprint_margin_m
    return rectangle(x + off * math.cos(yaw), y + off * math.sin(yaw), yaw,
                     scenario.ego_length_m + 2 * m, scenario.ego_width_m + 2 * m)


def obstacle_footprint(ob: Obstacle, t: float, scenario: Scenario) -> np.ndarray:
    x, y, yaw = ob.pose_at(t)
    m = scenario.footprint_margin_m
    return rectangle(float(x), float(y), yaw, ob.length_m + 2 * m, ob.width_m + 2 * m)


def min_clearance(ego: State, obstacles, t: float, scenario: Scenario) -> float:
    if not obstacles:
        return math.inf
    E = ego_footprint(ego.x_m, ego.y_m, ego.yaw_rad, scenario)
    return min(rect_clearance(E, obstacle_footprint(o, t, scenario)) for o in obstacles)


# ---------------------------------------------------------------------------
# cost


def trajectory_constraint_violation(traj, params: VehicleParams, dt: float) -> float:
    """Largest path-constraint value along a sampled trajectory.

    Acceleration and steering rate are recovered by finite differences.
    """
    v, d = traj[:, 2], traj[:, 3]
    if np.any(np.abs(d) >= math.pi / 2):
        return math.inf
    a = np.gradient(v, dt)
    vd = np.gradient(d, dt)
    amax, vs = params.max_long_accel_m_s2, params.switching_speed_m_s
    abar = np.where(v > vs, amax * vs / np.maximum(v, 1e-12), amax)
    gg = (a / abar) ** 2 + (v * v * np.tan(d) / (params.wheelbase_m * params.max_lat_accel_m_s2)) ** 2 - 1.0
    cons = np.concatenate([
        np.abs(d) - params.max_steer_rad,
        v - params.max_speed_m_s,
        -v - params.min_speed_m_s,
        np.abs(vd) - params.max_steer_rate_rad_s,
        gg,
    ])
    return float(cons.max())


@dataclass
class CostBreakdown:
    total: float
    velocity: float
    offset: float
    collision: float
    min_clearance: float
    rejected: bool = False
    reason: str = ""


def evaluate_cost(traj, scenario: Scenario, t0: float = 0.0, weights: CostWeights | None = None,
                  grid: TimeGrid | None = None, feas_tol: float = 1e-3) -> CostBreakdown:
    """Score one world-frame trajectory; ``t0`` is the absolute time of node 0."""
    grid = grid or TimeGrid()
    w = weights or scenario.weights
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape != (grid.n_points, 5) or not np.all(np.isfinite(traj)):
        return CostBreakdown(math.inf, math.inf, math.inf, math.inf, -math.inf, True, "malformed")
    vel = float(np.sum((traj[:, 2] - scenario.desired_speed_m_s) ** 2))
    off = float(np.sum(traj[:, 1] ** 2))
    col, clear = 0.0, math.inf
    for k, t in enumerate(grid.times):
        if not scenario.obstacles:
            break
        E = ego_footprint(traj[k, 0], traj[k, 1], traj[k, 4], scenario)
        for ob in scenario.obstacles:
            d = rect_clearance(E, obstacle_footprint(ob, t0 + t, scenario))
            clear = min(clear, d)
            col += math.exp(-max(d, 0.0) / w.safety_distance_m)
    total = w.velocity * vel + w.offset * off + w.collision * col
    out = CostBreakdown(total, vel, off, col, clear)
    if clear <= 0:
        out.rejected, out.reason = True, "collision"
    elif trajectory_constraint_violation(traj, scenario.params, grid.step_s) > feas_tol:
        out.rejected, out.reason = True, "constraint"
    lo, hi = scenario.road_bounds()
    if not out.rejected and (traj[:, 1].min() < lo or traj[:, 1].max() > hi):
        out.rejected, out.reason = True, "off-road"
    if not math.isfinite(total):
        out.rejected, out.reason = True, "non-finite"
    return out


# ---------------------------------------------------------------------------
# planning loop


def anchor(traj, start, grid: TimeGrid) -> np.ndarray:
    """Blend out the node-0 mismatch between a predicted trajectory and the ego state.

    The correction fades linearly to zero at the horizon, so the endpoint is
    left untouched.
    """
    t = np.array(traj, dtype=np.float64)
    err = t[..., :1, :] - start
    fade = (1.0 - grid.times / grid.horizon_s)[:, None]
    return t - err * fade


def emergency_trajectory(ego: State, params: VehicleParams, grid: TimeGrid) -> np.ndarray:
    """Straight maximum-deceleration stop along the current heading, steering held."""
    t = grid.times
    vlo, _ = speed_envelope(ego.speed_m_s, params, t)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (vlo[1:] + vlo[:-1]) * np.diff(t))])
    local = np.zeros((len(t), 5))
    local[:, 0] = s
    local[:, 2] = vlo
    local[:, 3] = ego.steer_rad
    return to_world(local, (ego.x_m, ego.y_m, ego.yaw_rad))


@dataclass
class StepResult:
    trajectory: np.ndarray  # world frame
    queries: np.ndarray
    costs: list[CostBreakdown]
    chosen: int  # -1 for the emergency trajectory
    emergency: bool


# sign flips of a left-right mirror: query (v0, delta0, xf, yf, thetaf) and
# trajectory channels (x, y, v, delta, theta)
MIRROR_QUERY = np.array([1.0, -1.0, 1.0, -1.0, -1.0])
MIRROR_TRAJ = np.array([1.0, -1.0, 1.0, -1.0, -1.0])


def symmetrized(generator, queries) -> np.ndarray:
    """Average of ``generator(q)`` and the mirror image of ``generator(mirror(q))``.

    The driving problem is left-right symmetric but a trained network is not.
    Averaging the mirrored pair removes its odd-symmetric error, so a straight
    query yields an exactly straight trajectory. Both halves are separate calls
    with identical batch shapes, so a mirrored scenario gives bit-identical
    mirrored output.
    """
    queries = np.asarray(queries, dtype=np.float64)
    a = np.asarray(generator(queries), dtype=np.float64)
    b = np.asarray(generator(queries * MIRROR_QUERY), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[-1] != 5:
        raise ValueError(f"generator returned shapes {a.shape} and {b.shape}")
    return 0.5 * (a + b * MIRROR_TRAJ)


def plan_step(ego: State, scenario: Scenario, generator, t0: float = 0.0,
              grid: TimeGrid | None = None, symmetrize: bool = True) -> StepResult:
    grid = grid or TimeGrid()
    queries, _ = sample_endpoints(ego, scenario, grid)
    pose = (ego.x_m, ego.y_m, ego.yaw_rad)
    start = np.array([0.0, 0.0, ego.speed_m_s, ego.steer_rad, 0.0])
    try:
        raw = symmetrized(generator, queries) if symmetrize else generator(queries)
        local = np.asarray(raw, dtype=np.float64)
        ok_shape = local.shape == (len(queries), grid.n_points, 5)
    except (ValueError, IndexError):
        ok_shape = False
    costs = []
    if ok_shape:
        world = to_world(anchor(local, start, grid), pose)
        costs = [evaluate_cost(w, scenario, t0, grid=grid) for w in world]
    else:
        world = None
        costs = [CostBreakdown(math.inf, math.inf, math.inf, math.inf, -math.inf, True, "malformed")
                 for _ in queries]
    best = -1
    for i, c in enumerate(costs):
        # strict comparison keeps the first candidate on ties
        if not c.rejected and (best < 0 or c.total < costs[best].total):
            best = i
    if best < 0:
        return StepResult(emergency_trajectory(ego, scenario.params, grid), queries, costs, -1, True)
    return StepResult(world[best], queries, costs, best, False)


@dataclass
class PlanLog:
    times: list[float] = field(default_factory=list)
    ego_states: list[np.ndarray] = field(default_factory=list)  # (x, y, delta, v, a, theta)
    obstacle_states: list[np.ndarray] = field(default_factory=list)  # (n_obs, 3): x, y, yaw
    chosen: list[int] = field(default_factory=list)
    trajectories: list[np.ndarray] = field(default_factory=list)
    candidate_queries: list[np.ndarray] = field(default_factory=list)
    candidate_costs: list[list[CostBreakdown]] = field(default_factory=list)
    emergency: list[bool] = field(default_factory=list)
    clearances: list[float] = field(default_factory=list)

    @property
    def min_clearance(self) -> float:
        return min(self.clearances) if self.clearances else math.inf

    @property
    def any_emergency(self) -> bool:
        return any(self.emergency)

    def ego_array(self) -> np.ndarray:
        return np.array(self.ego_states)


def _advance(ego: State, traj: np.ndarray, dt: float, grid: TimeGrid) -> State:
    """Ego state after following ``traj`` for ``dt`` seconds."""
    t = grid.times
    x, y, v, d, th = (float(np.interp(dt, t, traj[:, i])) for i in range(5))
    return State(x_m=x, y_m=y, steer_rad=d, speed_m_s=v, accel_m_s2=(v - ego.speed_m_s) / dt, yaw_rad=th)


def run_receding_horizon(scenario: Scenario, generator, n_steps: int = 60, dt: float = 0.1,
                         grid: TimeGrid | None = None, symmetrize: bool = True) -> PlanLog:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 < dt <= (grid or TimeGrid()).horizon_s:
        raise ValueError("dt must lie in (0, T]")
    grid = grid or TimeGrid()
    log = PlanLog()
    ego = scenario.ego
    for k in range(n_steps + 1):
        t = k * dt
        log.times.append(t)
        log.ego_states.append(ego.as_array())
        log.obstacle_states.append(np.array([[*map(float, o.pose_at(t)[:2]), o.yaw_rad] for o in scenario.obstacles]).reshape(-1, 3))
        log.clearances.append(min_clearance(ego, scenario.obstacles, t, scenario))
        if k == n_steps:
            break
        res = plan_step(ego, scenario, generator, t, grid, symmetrize)
        log.chosen.append(res.chosen)
        log.trajectories.append(res.trajectory)
        log.candidate_queries.append(res.queries)
        log.candidate_costs.append(res.costs)
        log.emergency.append(res.emergency)
        ego = _advance(ego, res.trajectory, dt, grid)
    return log


# ---------------------------------------------------------------------------
# output

LOG_COLUMNS = (
    "step", "t", "candidate", "v0", "delta0", "xf", "yf", "thetaf", "cost", "rejected", "reason",
    "chosen", "emergency", "ego_x", "ego_y", "ego_v", "ego_theta",
)


def export_log_csv(log: PlanLog, path) -> None:
    """One row per step and candidate; columns as in ``LOG_COLUMNS``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for k, costs in enumerate(log.candidate_costs):
            e = log.ego_states[k]
            for i, c in enumerate(costs):
                q = log.candidate_queries[k][i]
                w.writerow([
                    k, f"{log.times[k]:.3f}", i, *(f"{v:.6g}" for v in q), f"{c.total:.6g}", int(c.rejected),
                    c.reason, int(i == log.chosen[k]), int(log.emergency[k]),
                    f"{e[0]:.6g}", f"{e[1]:.6g}", f"{e[3]:.6g}", f"{e[5]:.6g}",
                ])


def export_trace_svg(log: PlanLog, scenario: Scenario, path, width: int = 900, height: int = 220) -> None:
    ego = log.ego_array()
    obs = np.concatenate([o[:, :2] for o in log.obstacle_states if len(o)] or [np.zeros((0, 2))])
    xs = np.concatenate([ego[:, 0], obs[:, 0]]) if len(obs) else ego[:, 0]
    lo, hi = scenario.road_bounds()
    x_min, x_max = float(xs.min()) - 5, float(xs.max()) + 5
    sx = (width - 20) / max(x_max - x_min, 1e-9)
    sy = (height - 20) / (hi - lo)

    def px(x, y):
        return 10 + (x - x_min) * sx, 10 + (hi - y) * sy

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for yb in np.unique(np.r_[scenario.lane_centres() - 0.5 * scenario.lane_width_m, hi]):
        x1, y1 = px(x_min, yb)
        x2, _ = px(x_max, yb)
        parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y1:.1f}" stroke="#888" stroke-dasharray="6,4"/>')

    def polyline(pts, colour):
        s = " ".join("{:.1f},{:.1f}".format(*px(x, y)) for x, y in pts)
        return f'<polyline points="{s}" fill="none" stroke="{colour}" stroke-width="2"/>'

    parts.append(polyline(ego[:, :2], "#1f77b4"))
    for j in range(len(log.obstacle_states[0])):
        parts.append(polyline([o[j, :2] for o in log.obstacle_states], "#d62728"))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")

