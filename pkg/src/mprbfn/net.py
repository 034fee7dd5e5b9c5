"""Small numpy network core with hand-written reverse-mode gradients.

Layers keep their trainable arrays in ``layer.params`` (a dict of arrays) and
are stateless otherwise: ``forward`` returns the output together with a cache
that ``backward`` consumes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KERNELS = ("gaussian", "inv_quadratic", "inv_multiquadratic")


def _phi(kernel: str, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kernel as a function of ``u = (eps * r)**2`` and its derivative in ``u``.

    Writing the kernels in ``r**2`` keeps them smooth at ``r = 0``.
    """
    if kernel == "gaussian":
        val = np.exp(-u)
        return val, -val
    if kernel == "inv_quadratic":
        val = 1.0 / (1.0 + u)
        return val, -val * val
    if kernel == "inv_multiquadratic":
        val = 1.0 / np.sqrt(1.0 + u)
        return val, -0.5 * val**3
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def kernel_eval(kernel: str, eps: float, r):
    if eps <= 0:
        raise ValueError("shape parameter must be positive")
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("radius must be non-negative")
    val, _ = _phi(kernel, (eps * r) ** 2)
    return val if val.ndim else float(val)


class DenseLayer:
    """``y = x W^T (+ b)``."""

    def __init__(self, n_in: int, n_out: int, bias: bool = False, rng=None, scale: float | None = None):
        rng = np.random.default_rng(rng)
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.params = {"weight": rng.normal(0.0, scale, size=(n_out, n_in))}
        if bias:
            self.params["bias"] = np.zeros(n_out)

    @property
    def n_in(self) -> int:
        return self.params["weight"].shape[1]

    def forward(self, x):
        W = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != W.shape[1]:
            raise ValueError(f"dense layer expects (batch, {W.shape[1]}), got {x.shape}")
        y = x @ W.T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, x

    def infer(self, x):
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y += self.params["bias"]
        return y

    def backward(self, x, gy):
        grads = {"weight": gy.T @ x}
        if "bias" in self.params:
            grads["bias"] = gy.sum(axis=0)
        return grads, gy @ self.params["weight"]


class RbfLayer:
    """One scalar-centre radial unit per input coordinate: ``rho(eps_k * |z_k - c_k|)``."""

    def __init__(self, n: int, kernel: str = "gaussian", shared_eps: bool = True, rng=None,
                 center_range: float = 2.0, eps: float = 1.0):
        if kernel not in KERNELS:
            raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
        rng = np.random.default_rng(rng)
        self.kernel = kernel
        self.params = {
            "centers": rng.uniform(-center_range, center_range, size=n),
            "eps": np.full(1 if shared_eps else n, float(eps)),
        }

    def forward(self, z):
        c = self.params["centers"]
        if z.ndim != 2 or z.shape[1] != c.shape[0]:
            raise ValueError(f"rbf layer expects (batch, {c.shape[0]}), got {z.shape}")
        eps = self.params["eps"]
        d = z - c
        u = (eps * d) ** 2
        val, dphi = _phi(self.kernel, u)
        return val, (d, dphi)

    def infer(self, z):
        """Forward pass without the gradient cache, computed in place."""
        u = z - self.params["centers"]
        u *= self.params["eps"]
        np.square(u, out=u)
        if self.kernel == "gaussian":
            np.negative(u, out=u)
            return np.exp(u, out=u)
        u += 1.0
        if self.kernel == "inv_multiquadratic":
            np.sqrt(u, out=u)
        return np.reciprocal(u, out=u)

    def backward(self, cache, gy):
        d, dphi = cache
        eps = self.params["eps"]
        g_u = gy * dphi
        g_d = g_u * 2.0 * eps**2 * d
        g_eps = (g_u * 2.0 * eps * d * d).sum(axis=0)
        if eps.shape[0] == 1:
            g_eps = np.array([g_eps.sum()])
        return {"centers": -g_d.sum(axis=0), "eps": g_eps}, g_d


class VectorRbfLayer:
    """Classic RBF layer with vector centres in input space."""

    def __init__(self, n_in: int, n_centers: int, kernel: str = "gaussian", rng=None, eps: float = 1.0):
        if kernel not in KERNELS:
            raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
        rng = np.random.default_rng(rng)
        self.kernel = kernel
        self.params = {"centers": rng.normal(size=(n_centers, n_in)), "eps": np.array([float(eps)])}

    def forward(self, x):
        C = self.params["centers"]
        if x.ndim != 2 or x.shape[1] != C.shape[1]:
            raise ValueError(f"rbf layer expects (batch, {C.shape[1]}), got {x.shape}")
        eps = self.params["eps"][0]
        # |x - c|^2 expanded to avoid a (batch, K, n) temporary
        r2 = (x * x).sum(1)[:, None] - 2.0 * x @ C.T + (C * C).sum(1)[None, :]
        r2 = np.maximum(r2, 0.0)
        val, dphi = _phi(self.kernel, eps * eps * r2)
        return val, (x, r2, dphi)

    def backward(self, cache, gy):
        x, r2, dphi = cache
        C = self.params["centers"]
        eps = self.params["eps"][0]
        g_u = gy * dphi
        g_r2 = g_u * eps * eps
        # d r2 / d x = 2 (x - c), d r2 / d c = -2 (x - c)
        gx = 2.0 * (g_r2.sum(1)[:, None] * x - g_r2 @ C)
        gC = -2.0 * (g_r2.T @ x - g_r2.sum(0)[:, None] * C)
        g_eps = np.array([(g_u * 2.0 * eps * r2).sum()])
        return {"centers": gC, "eps": g_eps}, gx


class Activation:
    params: dict = {}

    def __init__(self, name: str):
        if name not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self.params = {}

    def forward(self, x):
        y = np.tanh(x) if self.name == "tanh" else 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, y, gy):
        if self.name == "tanh":
            return {}, gy * (1.0 - y * y)
        return {}, gy * y * (1.0 - y)


def forward(layers, x):
    x = np.asarray(x, dtype=np.float64)
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def infer(layers, x):
    """Forward pass that keeps no caches; layers may provide a leaner ``infer``."""
    x = np.asarray(x, dtype=np.float64)
    for layer in layers:
        x = layer.infer(x) if hasattr(layer, "infer") else layer.forward(x)[0]
    return x


def backward(layers, caches, gy):
    """Returns per-layer parameter gradients and the gradient w.r.t. the input."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads[i], gy = layers[i].backward(caches[i], gy)
    return grads, gy


# ---------------------------------------------------------------------------
# loss

# channel groups of a (batch, nodes, 5) trajectory tensor: x, y, v, delta, theta
GROUPS = {"position": (0, 1), "velocity": (2,), "steering": (3,), "orientation": (4,)}


def group_weights_from_data(trajectories, include_steering: bool = True) -> dict[str, float]:
    """Inverse squared range of each channel group."""
    trajectories = np.asarray(trajectories)
    out = {}
    for name, ch in GROUPS.items():
        if name == "steering" and not include_steering:
            out[name] = 0.0
            continue
        vals = trajectories[..., list(ch)]
        span = float(vals.max() - vals.min()) if vals.size else 0.0
        out[name] = 1.0 / span**2 if span > 0 else 1.0
    return out


def weighted_mse(pred, target, weights: dict[str, float] | None = None, return_grad: bool = False):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    weights = weights or {name: 1.0 for name in GROUPS}
    diff = pred - target
    # per-channel factor w_g / (entries in group g)
    n_rows = diff.size // diff.shape[-1] if diff.size else 0
    scale = np.zeros(diff.shape[-1])
    for name, ch in GROUPS.items():
        scale[list(ch)] = weights.get(name, 0.0) / (len(ch) * max(n_rows, 1))
    sq = (diff * diff).reshape(-1, diff.shape[-1]).sum(axis=0)
    loss = float(sq @ scale)
    if return_grad:
        return loss, 2.0 * diff * scale
    return loss


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    epochs: int = 300
    batch_size: int = 256
    # None -> inverse squared range per group, from the training split
    loss_weights: dict | None = None
    include_steering: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(params: dict, grads: dict, moments: dict, t: int, config: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, moments)`` without mutating inputs."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    new_params, new_moments = {}, {}
    for k, p in params.items():
        g = grads[k]
        m, v = moments.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[k] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps_hat)
        new_moments[k] = (m, v)
    return new_params, new_moments


class Adam:
    """Stateful wrapper over :func:`adam_step` for a list of layers."""

    def __init__(self, layers, config: TrainConfig):
        self.layers = layers
        self.config = config
        self.t = 0
        self.moments = [dict() for _ in layers]

    def step(self, grads) -> None:
        self.t += 1
        for i, layer in enumerate(self.layers):
            if not layer.params:
                continue
            layer.params, self.moments[i] = adam_step(layer.params, grads[i], self.moments[i], self.t, self.config)
