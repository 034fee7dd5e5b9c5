"""Jerk-minimal fixed-horizon OCP for the kinematic single-track model.

Transcription is direct single shooting: the decision vector holds the free
initial acceleration followed by the longitudinal jerks and steering rates of
the first ``n - 1`` control intervals (the last interval is pinned to zero).
States come from an RK4 rollout, gradients from a hand-written adjoint sweep
through that rollout. Constraints are handled with an augmented Lagrangian
whose inner problem is solved by L-BFGS-B; steering-rate limits are box
bounds of the inner solver.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize

from .vehicle import CONTROL_DIM, STATE_DIM, VehicleParams

# indices into VehicleParams.as_array()
_LWB, _DMAX, _VDMAX, _VMAX, _VMIN, _AMAX, _ALAT, _VS = range(8)
N_INEQ = 5
N_EQ = 5


@dataclass(frozen=True)
class TimeGrid:
    horizon_s: float = 3.0
    step_s: float = 0.1

    def __post_init__(self):
        if self.horizon_s <= 0 or self.step_s <= 0:
            raise ValueError("horizon and step must be positive")
        n = self.horizon_s / self.step_s
        if abs(n - round(n)) > 1e-9:
            raise ValueError("horizon must be an integer multiple of the step")

    @property
    def n_intervals(self) -> int:
        return int(round(self.horizon_s / self.step_s))

    @property
    def n_points(self) -> int:
        return self.n_intervals + 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.step_s


@dataclass(frozen=True)
class Query:
    v0_m_s: float
    delta0_rad: float
    xf_m: float
    yf_m: float
    thetaf_rad: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v0_m_s, self.delta0_rad, self.xf_m, self.yf_m, self.thetaf_rad])

    @classmethod
    def from_array(cls, arr) -> "Query":
        return cls(*(float(v) for v in arr))

    def mirrored(self) -> "Query":
        return Query(self.v0_m_s, -self.delta0_rad, self.xf_m, -self.yf_m, -self.thetaf_rad)

    def validate(self, params: VehicleParams) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"non-finite query {self}")
        if not 0 <= self.v0_m_s <= params.max_speed_m_s:
            raise ValueError(f"v0 {self.v0_m_s} outside [0, {params.max_speed_m_s}]")
        if abs(self.delta0_rad) > params.max_steer_rad:
            raise ValueError(f"delta0 {self.delta0_rad} exceeds steering limit")
        if abs(self.thetaf_rad) > math.pi:
            raise ValueError(f"thetaf {self.thetaf_rad} outside [-pi, pi]")


@dataclass(frozen=True)
class OcpConfig:
    # None -> normalise by a_max_long / 1 s and a_max_lat / 1 s
    jerk_weights: tuple[float, float] | None = None
    smoothing_eps: float = 0.0
    penalty_init: float = 10.0
    penalty_growth: float = 5.0
    penalty_max: float = 1e9
    inner_tol: float = 1e-6
    inner_maxiter: int = 400
    max_outer: int = 25
    feas_tol: float = 1e-4
    # give up early when the violation stops shrinking
    stall_window: int = 4
    stall_ratio: float = 0.7
    stall_min_outer: int = 8
    # reject once the violation after outer iteration k exceeds entry k;
    # feasible problems sit well below these levels in practice
    reject_schedule: tuple[float, ...] | None = (1.0, 0.4, 0.25, 0.12, 0.06, 0.04)

    def __post_init__(self):
        if self.jerk_weights is not None and min(self.jerk_weights) <= 0:
            raise ValueError("jerk weights must be positive")
        if self.inner_tol <= 0 or self.feas_tol <= 0:
            raise ValueError("tolerances must be positive")

    def weights(self, params: VehicleParams) -> tuple[float, float]:
        if self.jerk_weights is not None:
            return tuple(float(w) for w in self.jerk_weights)
        return 1.0 / params.max_long_accel_m_s2**2, 1.0 / params.max_lat_accel_m_s2**2

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("jerk_weights", "reject_schedule"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OcpConfig":
        d = dict(d)
        for k in ("jerk_weights", "reject_schedule"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class OcpSolution:
    states: np.ndarray  # (n_points, 6)
    controls: np.ndarray  # (n_intervals, 2)
    objective: float
    max_constraint_violation: float
    converged: bool
    outer_iterations: int = 0
    stationarity: float = float("nan")
    violation_history: list[float] = field(default_factory=list)

    def trajectory(self) -> np.ndarray:
        """Columns (x, y, v, delta, theta) as stored in datasets."""
        return states_to_trajectory(self.states)


class Infeasible(Exception):
    """The augmented-Lagrangian loop did not reach the feasibility tolerance."""

    def __init__(self, message: str, solution: OcpSolution | None = None):
        super().__init__(message)
        self.solution = solution


def states_to_trajectory(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states)
    return states[..., [0, 1, 3, 2, 5]].copy()


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _f(d, v, a, th, j, vd, lwb):
    # state order: x, y, delta, v, a, theta
    return v * math.cos(th), v * math.sin(th), vd, a, j, v / lwb * math.tan(d)


@njit(cache=True)
def _stages(s, j, vd, h, lwb):
    """Stage states (delta, v, a, theta) and slopes of one RK4 step."""
    d1, v1, a1, t1 = s[2], s[3], s[4], s[5]
    k1 = _f(d1, v1, a1, t1, j, vd, lwb)
    d2, v2, a2, t2 = d1 + 0.5 * h * k1[2], v1 + 0.5 * h * k1[3], a1 + 0.5 * h * k1[4], t1 + 0.5 * h * k1[5]
    k2 = _f(d2, v2, a2, t2, j, vd, lwb)
    d3, v3, a3, t3 = d1 + 0.5 * h * k2[2], v1 + 0.5 * h * k2[3], a1 + 0.5 * h * k2[4], t1 + 0.5 * h * k2[5]
    k3 = _f(d3, v3, a3, t3, j, vd, lwb)
    d4, v4, a4, t4 = d1 + h * k3[2], v1 + h * k3[3], a1 + h * k3[4], t1 + h * k3[5]
    k4 = _f(d4, v4, a4, t4, j, vd, lwb)
    return (d1, v1, t1), (d2, v2, t2), (d3, v3, t3), (d4, v4, t4), k1, k2, k3, k4


@njit(cache=True)
def _rk4(s, j, vd, h, lwb, out):
    _, _, _, _, k1, k2, k3, k4 = _stages(s, j, vd, h, lwb)
    for i in range(6):
        out[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _f_vjp(st, g, lwb):
    """(df/d(delta, v, a, theta))^T g and (df/du)^T g for stage state ``st``."""
    d, v, th = st
    c = math.cos(th)
    sn = math.sin(th)
    cd = math.cos(d)
    gd = v / (lwb * cd * cd) * g[5]
    gv = c * g[0] + sn * g[1] + math.tan(d) / lwb * g[5]
    gth = -v * sn * g[0] + v * c * g[1]
    return gd, gv, g[3], gth, g[4], g[2]


@njit(cache=True)
def _rk4_vjp(s, j, vd, h, lwb, lam, gs):
    """Reverse sweep of one RK4 step: gs += d(out)/ds^T lam; returns control grads."""
    st1, st2, st3, st4, _, _, _, _ = _stages(s, j, vd, h, lwb)
    w = (h / 6.0, h / 3.0, h / 3.0, h / 6.0)
    # slope adjoints start from the output combination weights
    g4 = (w[3] * lam[0], w[3] * lam[1], w[3] * lam[2], w[3] * lam[3], w[3] * lam[4], w[3] * lam[5])
    for i in range(6):
        gs[i] += lam[i]
    gj = 0.0
    gvd = 0.0
    # stage 4 input is s + h k3
    gd, gv, ga, gth, a_, b_ = _f_vjp(st4, g4, lwb)
    gj += a_
    gvd += b_
    gs[2] += gd
    gs[3] += gv
    gs[4] += ga
    gs[5] += gth
    g3 = (w[2] * lam[0], w[2] * lam[1], w[2] * lam[2] + h * gd, w[2] * lam[3] + h * gv,
          w[2] * lam[4] + h * ga, w[2] * lam[5] + h * gth)
    gd, gv, ga, gth, a_, b_ = _f_vjp(st3, g3, lwb)
    gj += a_
    gvd += b_
    gs[2] += gd
    gs[3] += gv
    gs[4] += ga
    gs[5] += gth
    g2 = (w[1] * lam[0], w[1] * lam[1], w[1] * lam[2] + 0.5 * h * gd, w[1] * lam[3] + 0.5 * h * gv,
          w[1] * lam[4] + 0.5 * h * ga, w[1] * lam[5] + 0.5 * h * gth)
    gd, gv, ga, gth, a_, b_ = _f_vjp(st2, g2, lwb)
    gj += a_
    gvd += b_
    gs[2] += gd
    gs[3] += gv
    gs[4] += ga
    gs[5] += gth
    g1 = (w[0] * lam[0], w[0] * lam[1], w[0] * lam[2] + 0.5 * h * gd, w[0] * lam[3] + 0.5 * h * gv,
          w[0] * lam[4] + 0.5 * h * ga, w[0] * lam[5] + 0.5 * h * gth)
    gd, gv, ga, gth, a_, b_ = _f_vjp(st1, g1, lwb)
    gj += a_
    gvd += b_
    gs[2] += gd
    gs[3] += gv
    gs[4] += ga
    gs[5] += gth
    return gj, gvd


@njit(cache=True)
def _controls_from_z(z, n):
    U = np.zeros((n, 2))
    m = n - 1
    for k in range(m):
        U[k, 0] = z[1 + k]
        U[k, 1] = z[1 + m + k]
    return U


@njit(cache=True)
def _rollout(z, v0, d0, h, n, p):
    U = _controls_from_z(z, n)
    S = np.zeros((n + 1, 6))
    S[0, 2] = d0
    S[0, 3] = v0
    S[0, 4] = z[0]
    for k in range(n):
        _rk4(S[k], U[k, 0], U[k, 1], h, p[_LWB], S[k + 1])
    return S, U


@njit(cache=True)
def _lat_jerk(s, vd, lwb):
    cd = math.cos(s[2])
    return 2.0 * s[3] * s[4] / lwb * math.tan(s[2]) + s[3] * s[3] / (lwb * cd * cd) * vd


@njit(cache=True)
def _lat_jerk_grad(s, vd, lwb, scale, gs):
    """gs += scale * d(j_lat)/ds; returns scale * d(j_lat)/d(vd)."""
    v = s[3]
    a = s[4]
    t = math.tan(s[2])
    cd = math.cos(s[2])
    sec2 = 1.0 / (cd * cd)
    gs[3] += scale * (2.0 * a * t / lwb + 2.0 * v * vd * sec2 / lwb)
    gs[4] += scale * (2.0 * v * t / lwb)
    gs[2] += scale * (2.0 * v * a * sec2 / lwb + v * v * vd * 2.0 * sec2 * t / lwb)
    return scale * v * v * sec2 / lwb


@njit(cache=True)
def _objective(S, U, h, w1, w2, lwb, G, GU, want_grad):
    n = U.shape[0]
    J = 0.0
    for k in range(n):
        j = U[k, 0]
        vd = U[k, 1]
        jl0 = _lat_jerk(S[k], vd, lwb)
        jl1 = _lat_jerk(S[k + 1], vd, lwb)
        J += h * w1 * j * j + 0.5 * h * w2 * (jl0 * jl0 + jl1 * jl1)
        if want_grad:
            GU[k, 0] += 2.0 * h * w1 * j
            GU[k, 1] += _lat_jerk_grad(S[k], vd, lwb, h * w2 * jl0, G[k])
            GU[k, 1] += _lat_jerk_grad(S[k + 1], vd, lwb, h * w2 * jl1, G[k + 1])
    return J


@njit(cache=True)
def _node_constraints(s, p, g, dg):
    """Signed path inequalities at one node and their state Jacobian (5 x 6)."""
    delta = s[2]
    v = s[3]
    a = s[4]
    lwb = p[_LWB]
    for i in range(5):
        for m in range(6):
            dg[i, m] = 0.0
    g[0] = delta - p[_DMAX]
    dg[0, 2] = 1.0
    g[1] = -delta - p[_DMAX]
    dg[1, 2] = -1.0
    g[2] = v - p[_VMAX]
    dg[2, 3] = 1.0
    g[3] = -v - p[_VMIN]
    dg[3, 3] = -1.0
    amax = p[_AMAX]
    vs = p[_VS]
    if v > vs:
        r = a * v / (amax * vs)
        lon = r * r
        dg[4, 4] = 2.0 * r * v / (amax * vs)
        dg[4, 3] = 2.0 * r * a / (amax * vs)
    else:
        r = a / amax
        lon = r * r
        dg[4, 4] = 2.0 * r / amax
    t = math.tan(delta)
    cd = math.cos(delta)
    q = v * v * t / (lwb * p[_ALAT])
    g[4] = lon + q * q - 1.0
    dg[4, 3] += 2.0 * q * 2.0 * v * t / (lwb * p[_ALAT])
    dg[4, 2] += 2.0 * q * v * v / (cd * cd * lwb * p[_ALAT])


@njit(cache=True)
def _eval_constraints(S, target, p):
    n1 = S.shape[0]
    ineq = np.empty((n1, 5))
    dg = np.empty((5, 6))
    g = np.empty(5)
    for k in range(n1):
        _node_constraints(S[k], p, g, dg)
        for i in range(5):
            ineq[k, i] = g[i]
    s = S[n1 - 1]
    eq = np.empty(5)
    eq[0] = s[0] - target[0]
    eq[1] = s[1] - target[1]
    eq[2] = s[2]
    eq[3] = s[4]
    eq[4] = s[5] - target[2]
    return eq, ineq


@njit(cache=True)
def _al_value_grad(z, v0, d0, target, p, w1, w2, h, n, lam_eq, lam_in, mu):
    S, U = _rollout(z, v0, d0, h, n, p)
    G = np.zeros((n + 1, 6))
    GU = np.zeros((n, 2))
    val = _objective(S, U, h, w1, w2, p[_LWB], G, GU, True)

    g = np.empty(5)
    dg = np.empty((5, 6))
    inv2mu = 0.5 / mu
    for k in range(n + 1):
        _node_constraints(S[k], p, g, dg)
        for i in range(5):
            lam = lam_in[k, i]
            t = lam + mu * g[i]
            if t > 0.0:
                val += (t * t - lam * lam) * inv2mu
                for m in range(6):
                    G[k, m] += t * dg[i, m]
            else:
                val -= lam * lam * inv2mu

    s = S[n]
    eq = np.empty(5)
    eq[0] = s[0] - target[0]
    eq[1] = s[1] - target[1]
    eq[2] = s[2]
    eq[3] = s[4]
    eq[4] = s[5] - target[2]
    idx = (0, 1, 2, 4, 5)
    for i in range(5):
        val += lam_eq[i] * eq[i] + 0.5 * mu * eq[i] * eq[i]
        G[n, idx[i]] += lam_eq[i] + mu * eq[i]

    # adjoint sweep
    lam_s = G[n].copy()
    for k in range(n - 1, -1, -1):
        gs = G[k].copy()
        gj, gvd = _rk4_vjp(S[k], U[k, 0], U[k, 1], h, p[_LWB], lam_s, gs)
        GU[k, 0] += gj
        GU[k, 1] += gvd
        lam_s = gs

    grad = np.empty(z.shape[0])
    grad[0] = lam_s[4]
    m = n - 1
    for k in range(m):
        grad[1 + k] = GU[k, 0]
        grad[1 + m + k] = GU[k, 1]
    return val, grad


# ---------------------------------------------------------------------------
# python surface


def objective(states, controls, grid: TimeGrid, config: OcpConfig, params: VehicleParams | None = None) -> float:
    """Weighted jerk cost; per-interval trapezoid with zero-order-hold controls."""
    params = params or VehicleParams()
    states = np.ascontiguousarray(states, dtype=np.float64)
    controls = np.ascontiguousarray(controls, dtype=np.float64)
    if states.shape != (grid.n_points, STATE_DIM) or controls.shape != (grid.n_intervals, CONTROL_DIM):
        raise ValueError(f"shape mismatch: states {states.shape}, controls {controls.shape}")
    w1, w2 = config.weights(params)
    G = np.zeros((grid.n_points, STATE_DIM))
    GU = np.zeros((grid.n_intervals, CONTROL_DIM))
    return float(_objective(states, controls, grid.step_s, w1, w2, params.wheelbase_m, G, GU, False))


def n_decision(grid: TimeGrid) -> int:
    return 1 + 2 * (grid.n_intervals - 1)


def pack_decision(a0: float, controls: np.ndarray) -> np.ndarray:
    controls = np.asarray(controls, dtype=np.float64)
    m = controls.shape[0] - 1
    return np.concatenate([[a0], controls[:m, 0], controls[:m, 1]])


def rollout_decision(z, q: Query, grid: TimeGrid, params: VehicleParams):
    """States (n_points, 6) and controls (n_intervals, 2) for decision vector ``z``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    return _rollout(z, q.v0_m_s, q.delta0_rad, grid.step_s, grid.n_intervals, params.as_array())


class AugmentedLagrangian:
    """Inner-problem value/gradient for fixed multipliers and penalty."""

    def __init__(self, q: Query, params: VehicleParams, grid: TimeGrid, config: OcpConfig):
        self.q = q
        self.params = params
        self.grid = grid
        self.p = params.as_array()
        self.w1, self.w2 = config.weights(params)
        self.target = np.array([q.xf_m, q.yf_m, q.thetaf_rad])
        self.lam_eq = np.zeros(N_EQ)
        self.lam_in = np.zeros((grid.n_points, N_INEQ))
        self.mu = config.penalty_init

    def __call__(self, z):
        z = np.ascontiguousarray(z, dtype=np.float64)
        val, grad = _al_value_grad(
            z, self.q.v0_m_s, self.q.delta0_rad, self.target, self.p, self.w1, self.w2,
            self.grid.step_s, self.grid.n_intervals, self.lam_eq, self.lam_in, self.mu,
        )
        return float(val), grad

    def constraints(self, z):
        S, _ = rollout_decision(z, self.q, self.grid, self.params)
        return _eval_constraints(S, self.target, self.p)

    def bounds(self):
        m = self.grid.n_intervals - 1
        vd = self.params.max_steer_rate_rad_s
        return [(None, None)] * (1 + m) + [(-vd, vd)] * m


def initial_guess(q: Query, grid: TimeGrid, params: VehicleParams | None = None) -> np.ndarray:
    """Controls obtained by finite-differencing the linear-interpolation trajectory."""
    params = params or VehicleParams()
    m = grid.n_intervals - 1
    vd = np.clip(-q.delta0_rad / grid.horizon_s, -params.max_steer_rate_rad_s, params.max_steer_rate_rad_s)
    return np.concatenate([[0.0], np.zeros(m), np.full(m, vd)])


def max_violation(eq, ineq) -> float:
    return float(max(np.max(np.abs(eq)), np.max(ineq, initial=-np.inf), 0.0))


def _projected_grad_norm(z, grad, bounds) -> float:
    pg = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and z[i] <= lo + 1e-12 and pg[i] > 0:
            pg[i] = 0.0
        if hi is not None and z[i] >= hi - 1e-12 and pg[i] < 0:
            pg[i] = 0.0
    return float(np.max(np.abs(pg)))


def solve(
    q: Query,
    params: VehicleParams | None = None,
    grid: TimeGrid | None = None,
    config: OcpConfig | None = None,
    z0=None,
) -> OcpSolution:
    """Solve one boundary-value OCP; raises :class:`Infeasible` on failure."""
    params = params or VehicleParams()
    grid = grid or TimeGrid()
    config = config or OcpConfig()
    q.validate(params)

    lat0 = q.v0_m_s**2 * math.tan(q.delta0_rad) / (params.wheelbase_m * params.max_lat_accel_m_s2)
    if lat0 * lat0 - 1.0 > config.feas_tol:
        # the fixed initial node already violates the g-g envelope
        raise Infeasible(f"initial state of {q} violates the acceleration envelope")

    al = AugmentedLagrangian(q, params, grid, config)
    bounds = al.bounds()
    z = initial_guess(q, grid, params) if z0 is None else np.array(z0, dtype=np.float64)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    z = np.clip(z, lo, hi)

    history: list[float] = []
    stationarity = float("nan")
    converged = False
    for it in range(config.max_outer):
        res = minimize(
            al, z, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": config.inner_maxiter, "gtol": config.inner_tol, "ftol": 1e-15, "maxcor": 20},
        )
        z = res.x
        eq, ineq = al.constraints(z)
        viol = max_violation(eq, ineq)
        history.append(viol)
        stationarity = _projected_grad_norm(z, al(z)[1], bounds)
        if viol <= config.feas_tol:
            converged = True
            break
        sched = config.reject_schedule
        if sched is not None and it < len(sched) and viol > sched[it]:
            break
        if (
            it + 1 >= config.stall_min_outer
            and len(history) > config.stall_window
            and viol > config.stall_ratio * history[-1 - config.stall_window]
        ):
            break
        al.lam_eq = al.lam_eq + al.mu * eq
        al.lam_in = np.maximum(0.0, al.lam_in + al.mu * ineq)
        if len(history) < 2 or viol > 0.25 * history[-2]:
            al.mu = min(al.mu * config.penalty_growth, config.penalty_max)

    S, U = rollout_decision(z, q, grid, params)
    sol = OcpSolution(
        states=S,
        controls=U,
        objective=objective(S, U, grid, config, params),
        max_constraint_violation=history[-1],
        converged=converged,
        outer_iterations=len(history),
        stationarity=stationarity,
        violation_history=history,
    )
    if not converged:
        raise Infeasible(f"no feasible solution for {q} (violation {history[-1]:.3g})", sol)
    return sol


def boundary_residual(solution, q: Query, grid: TimeGrid | None = None) -> np.ndarray:
    """Initial block followed by the final block of the boundary conditions."""
    states = solution.states if isinstance(solution, OcpSolution) else np.asarray(solution)
    s0, sf = states[0], states[-1]
    return np.array(
        [
            s0[0], s0[1], s0[2] - q.delta0_rad, s0[3] - q.v0_m_s, s0[5],
            sf[0] - q.xf_m, sf[1] - q.yf_m, sf[2], sf[4], sf[5] - q.thetaf_rad,
        ]
    )
