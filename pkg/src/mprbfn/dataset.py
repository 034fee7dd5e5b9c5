"""Boundary-condition grids, OCP dataset generation and the ``.mpds`` format.

``.mpds`` layout (all integers little-endian)::

    b"MPDS1"                       magic
    u32  version                   (1)
    u64  header length H
    H    UTF-8 JSON header         grid, vehicle params, metadata, counts
    u64  n_samples                 repeated from the header as a cross-check
    u64  row length                (161)
    n_samples * 161 float64 LE     rows: query(5) | trajectory(31 x 5, node-major) | objective
    u32  CRC32 of every preceding byte

CSV export columns: ``v0,delta0,xf,yf,thetaf,objective`` followed by
``x_0,y_0,v_0,delta_0,theta_0,...`` for each node.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ocp
from .ocp import Infeasible, OcpConfig, Query, TimeGrid
from .vehicle import VehicleParams, accel_bound, constraint_values

MAGIC = b"MPDS1"
VERSION = 1
TRAJ_STATES = ("x", "y", "v", "delta", "theta")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GridSpec:
    v0_max: float = 28.0
    v0_step: float = 1.0
    x_step: float = 3.0
    y_step: float = 1.0
    thetaf_max: float = 1.6
    thetaf_step: float = 0.16
    # open interval (-delta0_max, delta0_max)
    delta0_max: float = 1.0
    delta0_step: float = 0.1
    horizon_s: float = 3.0
    step_s: float = 0.1
    # stride multipliers per axis: v0, x, y, thetaf, delta0
    strides: tuple[int, int, int, int, int] = (1, 1, 1, 1, 1)
    # skip queries outside the kinematic envelope (see within_envelope);
    # None disables the check
    envelope_slack: float | None = 0.1

    def __post_init__(self):
        steps = (self.v0_step, self.x_step, self.y_step, self.thetaf_step, self.delta0_step)
        if min(steps) <= 0 or min(self.strides) < 1:
            raise ValueError("grid steps and strides must be positive")
        if self.v0_max < 0 or self.thetaf_max < 0 or self.delta0_max <= 0:
            raise ValueError("grid ranges must be well ordered")

    @classmethod
    def paper(cls) -> "GridSpec":
        return cls()

    @classmethod
    def desk(cls) -> "GridSpec":
        return cls(**DESK_GRID)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.horizon_s, self.step_s)

    def axes(self) -> dict[str, np.ndarray]:
        sv, _, _, st, sd = self.strides
        return {
            "v0": _ray(self.v0_step * sv, self.v0_max),
            "delta0": _symmetric(self.delta0_step * sd, self.delta0_max, open_end=True),
            "thetaf": _symmetric(self.thetaf_step * st, self.thetaf_max),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        if "strides" in d:
            d["strides"] = tuple(int(s) for s in d["strides"])
        return cls(**d)


DESK_STRIDES = (4, 2, 2, 1, 1)
# small steering slices around zero; |delta0| = 0.02 stays inside the lateral
# acceleration limit up to about 26 m/s, which the closed-loop planner needs
DESK_GRID = {"strides": DESK_STRIDES, "delta0_max": 0.03, "delta0_step": 0.02}


def _ray(step: float, stop: float) -> np.ndarray:
    n = int(math.floor(stop / step + 1e-9))
    return np.round(np.arange(n + 1) * step, 10)


def _symmetric(step: float, limit: float, open_end: bool = False) -> np.ndarray:
    n = int(math.floor(limit / step + 1e-9))
    if open_end and abs(n * step - limit) < 1e-9:
        n -= 1
    return np.round(np.arange(-n, n + 1) * step, 10)


def reachable_range(v0: float, params: VehicleParams, horizon_s: float = 3.0) -> tuple[float, float]:
    """Annulus of final positions reachable from speed ``v0``.

    The braking distance uses ``a_max_long`` as deceleration; the far edge
    evaluates the acceleration bound for positive acceleration at ``v0``.
    """
    if v0 < 0:
        raise ValueError("v0 must be non-negative")
    a_min = params.max_long_accel_m_s2
    r_min = v0 * v0 / (2.0 * a_min)
    r_max = 0.5 * accel_bound(1.0, v0, params) * horizon_s**2 + v0 * horizon_s
    return r_min, r_max


def enumerate_queries(grid: GridSpec, params: VehicleParams) -> Iterator[Query]:
    """Grid queries in lexicographic (v0, delta0, xf, yf, thetaf) order.

    Final positions are restricted to the forward half plane ``xf >= 0``.
    """
    axes = grid.axes()
    _, sx, sy, _, _ = grid.strides
    dx = grid.x_step * sx
    dy = grid.y_step * sy
    for v0 in axes["v0"]:
        r_min, r_max = reachable_range(float(v0), params, grid.horizon_s)
        xs = _ray(dx, r_max)
        ys = _symmetric(dy, r_max)
        pts = [(x, y) for x in xs for y in ys if r_min - 1e-9 <= math.hypot(x, y) <= r_max + 1e-9]
        for d0 in axes["delta0"]:
            for x, y in pts:
                for th in axes["thetaf"]:
                    yield Query(float(v0), float(d0), float(x), float(y), float(th))


def speed_envelope(v0: float, params: VehicleParams, t) -> tuple[np.ndarray, np.ndarray]:
    """Lowest and highest speed reachable at times ``t`` under the acceleration bound.

    Above the switching speed the bound gives ``d(v^2)/dt = +-2 a_max v_s``,
    below it ``dv/dt = +-a_max``.
    """
    t = np.asarray(t, dtype=np.float64)
    amax, vs = params.max_long_accel_m_s2, params.switching_speed_m_s

    if v0 > vs:
        t_sw = (v0 * v0 - vs * vs) / (2.0 * amax * vs)
        lo = np.where(t <= t_sw, np.sqrt(np.maximum(v0 * v0 - 2.0 * amax * vs * t, 0.0)), vs - amax * (t - t_sw))
        hi = np.sqrt(v0 * v0 + 2.0 * amax * vs * t)
    else:
        t_sw = (vs - v0) / amax
        lo = v0 - amax * t
        hi = np.where(t <= t_sw, v0 + amax * t, np.sqrt(vs * vs + 2.0 * amax * vs * np.maximum(t - t_sw, 0.0)))
    return np.maximum(lo, params.min_speed_m_s), np.minimum(hi, params.max_speed_m_s)


def within_envelope(q: Query, params: VehicleParams, horizon_s: float = 3.0, slack: float = 0.1,
                    n: int = 301) -> bool:
    """Necessary condition for a feasible OCP solution, cheap to evaluate.

    The yaw rate is bounded by the lateral-acceleration limit and by the
    steering angle reachable under the rate limit (starting from ``delta0`` and
    returning to zero at ``T``); the speed stays in :func:`speed_envelope`. This
    bounds the heading at every instant, and from that the reachable final
    heading and lateral/longitudinal displacement. ``slack`` inflates the yaw
    bound and the displacement windows because the OCP only enforces its path
    constraints at the grid nodes.
    """
    t = np.linspace(0.0, horizon_s, n)
    dt = t[1] - t[0]
    vlo, vhi = speed_envelope(q.v0_m_s, params, t)
    rate = params.max_steer_rate_rad_s
    dmax = np.minimum(np.minimum(abs(q.delta0_rad) + rate * t, rate * (horizon_s - t)), params.max_steer_rad)
    k = np.tan(np.maximum(dmax, 0.0)) / params.wheelbase_m
    alat = params.max_lat_accel_m_s2
    # min(alat / v, v k) peaks at v = sqrt(alat / k)
    v = np.clip(np.sqrt(alat / np.maximum(k, 1e-12)), vlo, vhi)
    yaw = np.minimum(alat / np.maximum(v, 1e-12), v * k) * (1.0 + slack)

    def upper(f):
        return float(np.sum(np.maximum(f[1:], f[:-1])) * dt)

    def lower(f):
        return float(np.sum(np.minimum(f[1:], f[:-1])) * dt)

    cum = np.concatenate([[0.0], np.cumsum(np.maximum(yaw[1:], yaw[:-1]) * dt)])
    th = q.thetaf_rad
    if abs(th) > cum[-1]:
        return False
    rev = cum[-1] - cum
    psi_hi = np.minimum(cum, th + rev)
    psi_lo = np.maximum(-cum, th - rev)
    half = np.pi / 2
    s_hi = np.where(psi_hi >= half, 1.0, np.sin(np.clip(psi_hi, -half, half)))
    s_lo = np.where(psi_lo <= -half, -1.0, np.sin(np.clip(psi_lo, -half, half)))
    y_hi = upper(np.where(s_hi > 0, vhi, vlo) * s_hi)
    y_lo = lower(np.where(s_lo < 0, vhi, vlo) * s_lo)
    pad = 0.5 + 0.5 * slack * (abs(y_hi) + abs(y_lo))
    if not y_lo - pad <= q.yf_m <= y_hi + pad:
        return False
    c = np.cos(np.minimum(np.maximum(np.abs(psi_hi), np.abs(psi_lo)), np.pi))
    x_lo = lower(np.where(c > 0, vlo, vhi) * c)
    x_hi = upper(vhi)
    return x_lo - 0.5 - slack * abs(x_lo) <= q.xf_m <= x_hi + 0.5


def count_queries(grid: GridSpec, params: VehicleParams) -> int:
    axes = grid.axes()
    _, sx, sy, _, _ = grid.strides
    total = 0
    for v0 in axes["v0"]:
        r_min, r_max = reachable_range(float(v0), params, grid.horizon_s)
        xs = _ray(grid.x_step * sx, r_max)
        ys = _symmetric(grid.y_step * sy, r_max)
        r = np.hypot(xs[:, None], ys[None, :])
        n_pts = int(np.count_nonzero((r >= r_min - 1e-9) & (r <= r_max + 1e-9)))
        total += n_pts * len(axes["delta0"]) * len(axes["thetaf"])
    return total


@dataclass
class Sample:
    query: Query
    trajectory: np.ndarray  # (n_points, 5): x, y, v, delta, theta
    ocp_objective: float


@dataclass
class Dataset:
    queries: np.ndarray  # (n, 5)
    trajectories: np.ndarray  # (n, n_points, 5)
    objectives: np.ndarray  # (n,)
    grid: GridSpec = field(default_factory=GridSpec.desk)
    params: VehicleParams = field(default_factory=VehicleParams)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 5)
        n = len(self.queries)
        traj = np.asarray(self.trajectories, dtype=np.float64)
        self.trajectories = traj.reshape(n, -1, 5) if n else traj.reshape(0, traj.shape[1] if traj.ndim == 3 else 0, 5)
        self.objectives = np.asarray(self.objectives, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.queries)

    def __getitem__(self, i: int) -> Sample:
        return Sample(Query.from_array(self.queries[i]), self.trajectories[i], float(self.objectives[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.queries[idx], self.trajectories[idx], self.objectives[idx],
            self.grid, self.params, dict(self.metadata),
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.queries, other.queries)
            and np.array_equal(self.trajectories, other.trajectories)
            and np.array_equal(self.objectives, other.objectives)
            and self.grid == other.grid
            and self.params == other.params
            and self.metadata == other.metadata
        )


def _solve_one(args):
    q, params, grid, config = args
    try:
        sol = ocp.solve(q, params, grid, config)
    except Infeasible:
        return None
    # re-check path constraints on the exact vehicle model at every node
    for k, s in enumerate(sol.states):
        u = sol.controls[k] if k < len(sol.controls) else np.zeros(2)
        if np.max(constraint_values(s, u, params)) > config.feas_tol:
            return None
    if np.max(np.abs(ocp.boundary_residual(sol, q, grid))) > config.feas_tol:
        return None
    return sol.trajectory(), sol.objective


def build_dataset(
    grid: GridSpec,
    params: VehicleParams | None = None,
    ocp_config: OcpConfig | None = None,
    queries=None,
    jobs: int = 1,
    seed: int = 0,
    progress=None,
) -> Dataset:
    """Solve every query, dropping the ones without a feasible solution.

    Results are written in enumeration order whatever ``jobs`` is.
    """
    params = params or VehicleParams()
    ocp_config = ocp_config or OcpConfig()
    tgrid = grid.time_grid
    if queries is None:
        queries = enumerate_queries(grid, params)
    queries = list(dict.fromkeys(queries))
    n_total = len(queries)
    if grid.envelope_slack is not None:
        queries = [q for q in queries if within_envelope(q, params, grid.horizon_s, grid.envelope_slack)]
    n_pruned = n_total - len(queries)

    work = ((q, params, tgrid, ocp_config) for q in queries)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, work, chunksize=16))
    else:
        results = []
        for i, item in enumerate(work):
            results.append(_solve_one(item))
            if progress is not None:
                progress(i + 1, len(queries))

    keep = [i for i, r in enumerate(results) if r is not None]
    n_points = tgrid.n_points
    qs = np.array([queries[i].as_array() for i in keep]).reshape(-1, 5)
    trajs = np.array([results[i][0] for i in keep]).reshape(-1, n_points, 5)
    objs = np.array([results[i][1] for i in keep], dtype=np.float64)
    meta = {
        "seed": int(seed),
        "solver_config_hash": ocp_config.digest(),
        "ocp_config": ocp_config.to_dict(),
        "candidates": n_total,
        "pruned": n_pruned,
        "accepted": len(keep),
        "rejected": n_total - len(keep),
    }
    return Dataset(qs, trajs, objs, grid, params, meta)


def split(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# persistence


def to_bytes(dataset: Dataset) -> bytes:
    n = len(dataset)
    header = {
        "grid": dataset.grid.to_dict(),
        "params": dataset.params.to_dict(),
        "metadata": dataset.metadata,
        "n_samples": n,
        "n_points": int(dataset.trajectories.shape[1]) if n else dataset.grid.time_grid.n_points,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    rows = np.concatenate(
        [dataset.queries, dataset.trajectories.reshape(n, -1), dataset.objectives[:, None]], axis=1
    )
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<QQ", n, rows.shape[1]))
    buf.write(rows.astype("<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Dataset:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic", 0)
    off = len(MAGIC)
    if len(data) < off + 12:
        raise DatasetFormatError("truncated header", off)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", off)
    off += 12
    if len(data) < off + hlen + 16:
        raise DatasetFormatError("truncated header", off)
    try:
        header = json.loads(data[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"corrupt header: {e}", off) from None
    off += hlen
    n, row_len = struct.unpack_from("<QQ", data, off)
    if n != header.get("n_samples"):
        raise DatasetFormatError(f"sample count {n} disagrees with header {header.get('n_samples')}", off)
    n_points = header["n_points"]
    if row_len != 5 + 5 * n_points + 1:
        raise DatasetFormatError(f"unexpected row length {row_len}", off + 8)
    off += 16
    body_len = n * row_len * 8
    if len(data) != off + body_len + 4:
        raise DatasetFormatError(f"expected {off + body_len + 4} bytes, found {len(data)}", min(len(data), off + body_len))
    (crc,) = struct.unpack_from("<I", data, off + body_len)
    if crc != zlib.crc32(data[: off + body_len]):
        raise DatasetFormatError("checksum mismatch", off + body_len)
    rows = np.frombuffer(data, dtype="<f8", count=n * row_len, offset=off).reshape(n, row_len)
    rows = rows.astype(np.float64)
    return Dataset(
        rows[:, :5],
        rows[:, 5:-1].reshape(n, n_points, 5),
        rows[:, -1],
        GridSpec.from_dict(header["grid"]),
        VehicleParams.from_dict(header["params"]),
        header["metadata"],
    )


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def export_csv(dataset: Dataset, path) -> None:
    n_points = dataset.trajectories.shape[1]
    cols = ["v0", "delta0", "xf", "yf", "thetaf", "objective"]
    cols += [f"{s}_{k}" for k in range(n_points) for s in TRAJ_STATES]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for q, traj, obj in zip(dataset.queries, dataset.trajectories, dataset.objectives):
            w.writerow([repr(float(v)) for v in (*q, obj, *traj.ravel())])


def with_strides(grid: GridSpec, strides) -> GridSpec:
    return replace(grid, strides=tuple(int(s) for s in strides))
