"""Learned motion-primitive generators and the analytic quintic baseline.

Every generator maps a batch of queries ``(B, 5)`` ordered
``(v0, delta0, xf, yf, thetaf)`` to trajectories ``(B, n_points, 5)`` ordered
``(x, y, v, delta, theta)``. Flat network outputs are node-major, i.e. output
index ``k * 5 + s`` is state ``s`` at node ``k``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import net
from .ocp import TimeGrid
from .vehicle import VehicleParams

MODEL_KINDS = ("mp_rbfn", "mp_rbfn_no_interp", "basic_rbfn", "mlp_tanh", "mlp_sigmoid")
N_STATES = 5


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def interp_branch(queries, grid: TimeGrid | None = None) -> np.ndarray:
    """Linear-in-time blend between the known initial and final boundary values."""
    grid = grid or TimeGrid()
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    M = _interp_matrix(grid.horizon_s, grid.step_s)
    return (q @ M).reshape(q.shape[0], grid.n_points, N_STATES)


@lru_cache(maxsize=8)
def _interp_matrix(horizon_s: float, step_s: float) -> np.ndarray:
    """Linear map from a query to the flat node-major blend (coefficients are 0, 1 or s)."""
    grid = TimeGrid(horizon_s, step_s)
    s = grid.times / grid.horizon_s
    M = np.zeros((5, grid.n_points, N_STATES))
    M[2, :, 0] = s
    M[3, :, 1] = s
    M[0, :, 2] = 1.0
    M[1, :, 3] = 1.0 - s
    M[4, :, 4] = s
    M = M.reshape(5, -1)
    M.flags.writeable = False
    return M


class Model:
    """Base class: a layer stack plus a fixed input standardisation."""

    kind = "base"

    def __init__(self, grid: TimeGrid | None = None):
        self.grid = grid or TimeGrid()
        self.layers: list = []
        self.input_shift = np.zeros(5)
        self.input_scale = np.ones(5)
        self.interpolation = False

    @property
    def n_outputs(self) -> int:
        return self.grid.n_points * N_STATES

    def fit_input_normalization(self, queries) -> None:
        q = np.asarray(queries, dtype=np.float64)
        self.input_shift = q.mean(axis=0)
        std = q.std(axis=0)
        self.input_scale = np.where(std > 0, std, 1.0)

    def _features(self, q):
        return (q - self.input_shift) / self.input_scale

    # rows per inference block; keeps the temporaries cache-resident
    infer_block = 512

    def forward(self, queries, return_cache: bool = False):
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != 5:
            raise ValueError(f"queries must have 5 columns, got {q.shape}")
        if not return_cache:
            return self._infer(q)
        flat, caches = net.forward(self.layers, self._features(q))
        out = flat.reshape(q.shape[0], self.grid.n_points, N_STATES)
        if self.interpolation:
            out = out + interp_branch(q, self.grid)
        return out, caches

    def _infer(self, q):
        out = np.empty((q.shape[0], self.n_outputs))
        M = _interp_matrix(self.grid.horizon_s, self.grid.step_s) if self.interpolation else None
        for i in range(0, q.shape[0], self.infer_block):
            blk = q[i:i + self.infer_block]
            out[i:i + len(blk)] = net.infer(self.layers, self._features(blk))
            if M is not None:
                out[i:i + len(blk)] += blk @ M
        return out.reshape(q.shape[0], self.grid.n_points, N_STATES)

    __call__ = forward

    def loss_and_grads(self, queries, targets, weights):
        pred, caches = self.forward(queries, return_cache=True)
        loss, g = net.weighted_mse(pred, targets, weights, return_grad=True)
        grads, _ = net.backward(self.layers, caches, g.reshape(g.shape[0], -1))
        return loss, grads

    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("input_shift", self.input_shift), ("input_scale", self.input_scale)]
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out.append((f"{i}.{name}", arr))
        return out

    def set_arrays(self, arrays: dict) -> None:
        self.input_shift = arrays["input_shift"]
        self.input_scale = arrays["input_scale"]
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                key = f"{i}.{name}"
                if arrays[key].shape != layer.params[name].shape:
                    raise ModelFormatError(f"array {key} has shape {arrays[key].shape}, expected {layer.params[name].shape}")
                layer.params[name] = arrays[key]

    def descriptor(self) -> dict:
        return {"kind": self.kind, "horizon_s": self.grid.horizon_s, "step_s": self.grid.step_s}

    def copy(self) -> "Model":
        clone = build_model(self.descriptor())
        clone.set_arrays({k: v.copy() for k, v in self.named_arrays()})
        return clone


class MpRbfn(Model):
    """Latent linear map, scalar radial units per latent coordinate, linear read-out.

    ``interpolation`` adds the boundary blend of :func:`interp_branch`.
    """

    kind = "mp_rbfn"

    def __init__(self, n_latent: int = 1024, kernel: str = "gaussian", interpolation: bool = True,
                 grid: TimeGrid | None = None, shared_eps: bool = True, bias: bool = False, seed: int = 0):
        super().__init__(grid)
        rng = np.random.default_rng(seed)
        self.n_latent = n_latent
        self.kernel = kernel
        self.interpolation = interpolation
        self.shared_eps = shared_eps
        self.bias = bias
        self.layers = [
            net.DenseLayer(5, n_latent, bias=bias, rng=rng, scale=1.0),
            net.RbfLayer(n_latent, kernel=kernel, shared_eps=shared_eps, rng=rng),
            net.DenseLayer(n_latent, self.n_outputs, bias=bias, rng=rng, scale=0.1 / np.sqrt(n_latent)),
        ]
        if not interpolation:
            self.kind = "mp_rbfn_no_interp"

    def descriptor(self) -> dict:
        return {
            **super().descriptor(), "n_latent": self.n_latent, "kernel": self.kernel,
            "interpolation": self.interpolation, "shared_eps": self.shared_eps, "bias": self.bias,
        }


class BasicRbfn(Model):
    kind = "basic_rbfn"

    def __init__(self, n_centers: int = 1024, kernel: str = "gaussian", grid: TimeGrid | None = None, seed: int = 0):
        super().__init__(grid)
        rng = np.random.default_rng(seed)
        self.n_centers = n_centers
        self.kernel = kernel
        self.layers = [
            net.VectorRbfLayer(5, n_centers, kernel=kernel, rng=rng),
            net.DenseLayer(n_centers, self.n_outputs, rng=rng, scale=0.1 / np.sqrt(n_centers)),
        ]

    def descriptor(self) -> dict:
        return {**super().descriptor(), "n_centers": self.n_centers, "kernel": self.kernel}


class Mlp(Model):
    """One hidden layer, no biases."""

    def __init__(self, hidden: int = 1024, activation: str = "tanh", grid: TimeGrid | None = None,
                 bias: bool = False, seed: int = 0):
        super().__init__(grid)
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.activation = activation
        self.bias = bias
        self.kind = "mlp_tanh" if activation == "tanh" else "mlp_sigmoid"
        self.layers = [
            net.DenseLayer(5, hidden, bias=bias, rng=rng),
            net.Activation(activation),
            net.DenseLayer(hidden, self.n_outputs, bias=bias, rng=rng),
        ]

    def descriptor(self) -> dict:
        return {**super().descriptor(), "hidden": self.hidden, "activation": self.activation, "bias": self.bias}


def build_model(desc: dict) -> Model:
    """Instantiate an untrained model from a descriptor (or ``{"kind": ..., **options}``)."""
    desc = dict(desc)
    kind = desc.pop("kind")
    grid = TimeGrid(desc.pop("horizon_s", 3.0), desc.pop("step_s", 0.1))
    size = desc.pop("size", None)
    if kind in ("mp_rbfn", "mp_rbfn_no_interp"):
        desc.setdefault("interpolation", kind == "mp_rbfn")
        if size is not None:
            desc["n_latent"] = size
        return MpRbfn(grid=grid, **desc)
    if kind == "basic_rbfn":
        if size is not None:
            desc["n_centers"] = size
        return BasicRbfn(grid=grid, **desc)
    if kind in ("mlp_tanh", "mlp_sigmoid"):
        desc.setdefault("activation", "tanh" if kind == "mlp_tanh" else "sigmoid")
        if size is not None:
            desc["hidden"] = size
        return Mlp(grid=grid, **desc)
    raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")


# ---------------------------------------------------------------------------
# training


def _batch_loss(model: Model, q, y, weights, batch: int = 4096) -> float:
    total = 0.0
    for i in range(0, len(q), batch):
        pred = model.forward(q[i : i + batch])
        total += net.weighted_mse(pred, y[i : i + batch], weights) * len(pred)
    return total / len(q)


def train_model(model: Model, train, test, config: net.TrainConfig | None = None, log=None):
    """Mini-batch Adam on the weighted MSE; returns the best-on-test copy and the loss history.

    ``train`` and ``test`` are datasets (anything with ``queries`` and
    ``trajectories`` arrays).
    """
    config = config or net.TrainConfig()
    if len(train.queries) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    qtr, ytr = train.queries, train.trajectories
    qte, yte = (test.queries, test.trajectories) if test is not None and len(test.queries) else (qtr, ytr)
    weights = config.loss_weights or net.group_weights_from_data(ytr, config.include_steering)
    model.fit_input_normalization(qtr)
    opt = net.Adam(model.layers, config)

    history = {"epoch": [], "train_loss": [], "test_loss": [], "loss_weights": weights}
    best, best_loss = model.copy(), math.inf
    n = len(qtr)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        running = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            loss, grads = model.loss_and_grads(qtr[idx], ytr[idx], weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(grads)
            running += loss * len(idx)
        test_loss = _batch_loss(model, qte, yte, weights)
        if not math.isfinite(test_loss):
            raise TrainingDiverged(epoch)
        history["epoch"].append(epoch)
        history["train_loss"].append(running / n)
        history["test_loss"].append(test_loss)
        if test_loss < best_loss:
            best_loss = test_loss
            best = model.copy()
        if log is not None:
            log(epoch, running / n, test_loss)
    history["best_test_loss"] = best_loss
    return best, history


# ---------------------------------------------------------------------------
# checkpoints
#
# .mpnet layout: b"MPNET1" | u64 header length | JSON header | float64 LE arrays
# in header["arrays"] order (input_shift, input_scale, then per layer: Z row-major,
# centres, eps, W row-major for the MP-RBFN).

NET_MAGIC = b"MPNET1"


def model_to_bytes(model: Model) -> bytes:
    arrays = model.named_arrays()
    header = {
        "version": 1,
        "architecture": model.descriptor(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(NET_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes, expected_kind: str | None = None) -> Model:
    if data[: len(NET_MAGIC)] != NET_MAGIC:
        raise ModelFormatError("not an .mpnet checkpoint")
    off = len(NET_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"corrupt checkpoint header: {e}") from None
    off += hlen
    arch = header["architecture"]
    if expected_kind is not None and arch["kind"] != expected_kind:
        raise ModelFormatError(f"checkpoint holds a {arch['kind']!r} model, expected {expected_kind!r}")
    model = build_model(arch)
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(data):
            raise ModelFormatError(f"truncated checkpoint while reading {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise ModelFormatError("trailing bytes after last array")
    model.set_arrays(arrays)
    return model


def save_model(model: Model, path) -> str:
    """Write the checkpoint and return its sha256."""
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path, expected_kind: str | None = None) -> Model:
    return model_from_bytes(Path(path).read_bytes(), expected_kind)


def model_hash(model: Model) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


# ---------------------------------------------------------------------------
# analytic quintic baseline


def quintic_coefficients(p0, v0, a0, p1, v1, a1, T):
    """Coefficients ``c0..c5`` of the quintic meeting position/velocity/acceleration at 0 and T.

    All boundary arguments may be arrays of equal shape; the result has a
    trailing axis of length 6.
    """
    p0, v0, a0, p1, v1, a1 = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (p0, v0, a0, p1, v1, a1)))
    c0, c1, c2 = p0, v0, 0.5 * a0
    A = np.array([[T**3, T**4, T**5], [3 * T**2, 4 * T**3, 5 * T**4], [6 * T, 12 * T**2, 20 * T**3]])
    rhs = np.stack(
        [p1 - (c0 + c1 * T + c2 * T**2), v1 - (c1 + 2 * c2 * T), a1 - 2 * c2], axis=-1
    )
    hi = np.linalg.solve(A, rhs[..., None])[..., 0] if rhs.ndim > 1 else np.linalg.solve(A, rhs)
    return np.concatenate([np.stack([c0, c1, c2], axis=-1), hi], axis=-1)


def _poly_derivs(c, t):
    """Value and first three derivatives of quintics ``c`` (B, 6) at times ``t`` (M,)."""
    powers = t[None, :, None] ** np.arange(6)[None, None, :]
    p = (c[:, None, :] * powers).sum(-1)
    d1 = sum(k * c[:, None, k] * t[None, :] ** (k - 1) for k in range(1, 6))
    d2 = sum(k * (k - 1) * c[:, None, k] * t[None, :] ** (k - 2) for k in range(2, 6))
    d3 = sum(k * (k - 1) * (k - 2) * c[:, None, k] * t[None, :] ** (k - 3) for k in range(3, 6))
    return p, d1, d2, d3


def analytic_mp(queries, params: VehicleParams | None = None, grid: TimeGrid | None = None,
                feas_tol: float = 1e-4, min_speed: float = 0.1):
    """Decoupled longitudinal/lateral quintics.

    Returns trajectories ``(B, n_points, 5)`` and a boolean validity mask. The
    free terminal speed is closed with ``v_f = 2 xf / T - v0`` and the initial
    acceleration is zero.
    """
    params = params or VehicleParams()
    grid = grid or TimeGrid()
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    T = grid.horizon_s
    v0, xf, yf, thf = q[:, 0], q[:, 2], q[:, 3], q[:, 4]
    vf = 2.0 * xf / T - v0
    zero = np.zeros_like(v0)
    cx = quintic_coefficients(zero, v0, zero, xf, vf, zero, T)
    cy = quintic_coefficients(zero, zero, zero, yf, vf * np.tan(thf), zero, T)
    t = grid.times
    x, xd, xdd, xddd = _poly_derivs(cx, t)
    y, yd, ydd, yddd = _poly_derivs(cy, t)

    speed = np.hypot(xd, yd)
    needs_curvature = (yf != 0) | (thf != 0)
    degenerate = speed < min_speed
    safe = np.where(degenerate, 1.0, speed)
    num = xd * ydd - yd * xdd
    kappa = np.where(degenerate, 0.0, num / safe**3)
    accel = np.where(degenerate, xdd, (xd * xdd + yd * ydd) / safe)
    dnum = xd * yddd - yd * xddd
    dkappa = np.where(degenerate, 0.0, dnum / safe**3 - 3.0 * num * accel / safe**4)
    lwb = params.wheelbase_m
    delta = np.arctan(lwb * kappa)
    delta_rate = lwb * dkappa / (1.0 + (lwb * kappa) ** 2)
    theta = np.arctan2(yd, xd)

    traj = np.stack([x, y, speed, delta, theta], axis=-1)

    yaw_rate = kappa * speed
    amax = params.max_long_accel_m_s2
    abar = np.where(speed > params.switching_speed_m_s, amax * params.switching_speed_m_s / safe,
                    np.where(accel < 0, -amax, amax))
    gg = (accel / abar) ** 2 + (yaw_rate * speed / params.max_lat_accel_m_s2) ** 2 - 1.0
    cons = np.stack(
        [
            np.abs(delta) - params.max_steer_rad,
            speed - params.max_speed_m_s,
            -speed - params.min_speed_m_s,
            np.abs(delta_rate) - params.max_steer_rate_rad_s,
            gg,
        ],
        axis=-1,
    )
    valid = np.all(cons <= feas_tol, axis=(1, 2))
    valid &= np.abs(theta[:, 0]) <= 1e-6
    valid &= vf > 0
    valid &= ~(needs_curvature & degenerate.any(axis=1))
    return traj, valid


class AnalyticGenerator:
    """Callable wrapper so the quintic baseline can stand in for a network."""

    kind = "analytic"

    def __init__(self, params: VehicleParams | None = None, grid: TimeGrid | None = None):
        self.params = params or VehicleParams()
        self.grid = grid or TimeGrid()

    def __call__(self, queries):
        traj, _ = analytic_mp(queries, self.params, self.grid)
        return traj

    def with_validity(self, queries):
        return analytic_mp(queries, self.params, self.grid)

