"""Minimal dense-network toolkit with explicit forward/backward passes.

Matrices are plain 2-D float64 numpy arrays (rows = samples or points).
Parameters of a model are kept in a flat ``dict[str, ndarray]`` so the
optimizer, the finite-difference checker and the checkpoint format can
all treat them uniformly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

ACTIVATIONS = ("relu", "tanh", "none")


@dataclass(eq=False)
class DenseLayer:
    """``activation(x @ weights.T + bias)``; weights are ``(out, in)``."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"inconsistent layer shapes {self.weights.shape}, {self.bias.shape}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim, out_dim, activation="relu", rng=None):
        """He-style uniform fan-in initialization (zero bias)."""
        rng = np.random.default_rng(rng)
        gain = 2.0 if activation == "relu" else 1.0
        bound = np.sqrt(3.0 * gain / in_dim)
        return cls(rng.uniform(-bound, bound, (out_dim, in_dim)), np.zeros(out_dim), activation)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def dense_forward(layer: DenseLayer, x, return_pre=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"expected (n, {layer.in_dim}) input, got {x.shape}")
    z = x @ layer.weights.T + layer.bias
    y = _activate(z, layer.activation)
    return (y, z) if return_pre else y


def dense_backward(layer: DenseLayer, x, upstream_grad, pre=None):
    """Return ``(grad_x, grad_W, grad_b)`` for ``dense_forward(layer, x)``.

    ``pre`` (the cached pre-activation) avoids recomputing the product.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim or g.shape != (x.shape[0], layer.out_dim):
        raise ShapeError(f"shape mismatch: x {x.shape}, upstream {g.shape}, "
                         f"layer {layer.weights.shape}")
    if layer.activation != "none":
        z = x @ layer.weights.T + layer.bias if pre is None else pre
        if layer.activation == "relu":
            g = g * (z > 0)
        else:
            g = g * (1.0 - np.tanh(z) ** 2)
    return g @ layer.weights, g.T @ x, g.sum(axis=0)


def maxpool_points(features):
    """Column-wise max over rows; returns ``(vector, argmax_rows)``.

    Ties resolve to the lowest row index.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ShapeError(f"maxpool needs a non-empty (rows, cols) array, got {f.shape}")
    arg = f.argmax(axis=0)
    return f[arg, np.arange(f.shape[1])], arg


def maxpool_backward(grad, argmax, rows):
    out = np.zeros((rows, len(grad)))
    out[argmax, np.arange(len(grad))] = grad
    return out


def maxpool_batch(features):
    """``(B, N, F)`` -> ``(B, F)`` pooled values and ``(B, F)`` argmax rows."""
    arg = features.argmax(axis=1)
    return np.take_along_axis(features, arg[:, None, :], axis=1)[:, 0, :], arg


def maxpool_batch_backward(grad, argmax, n_points):
    b, f = grad.shape
    out = np.zeros((b, n_points, f))
    np.put_along_axis(out, argmax[:, None, :], grad[:, None, :], axis=1)
    return out


# -- layer stacks ------------------------------------------------------------

class MLP:
    """Sequential dense stack stored under ``{prefix}{i}.W`` / ``.b`` keys."""

    def __init__(self, prefix, dims, activations):
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        self.prefix = prefix
        self.dims = tuple(dims)
        self.activations = tuple(activations)

    def keys(self):
        for i in range(len(self.activations)):
            yield f"{self.prefix}{i}.W"
            yield f"{self.prefix}{i}.b"

    def init(self, rng):
        params = {}
        for i, act in enumerate(self.activations):
            layer = DenseLayer.init(self.dims[i], self.dims[i + 1], act, rng)
            params[f"{self.prefix}{i}.W"] = layer.weights
            params[f"{self.prefix}{i}.b"] = layer.bias
        return params

    def layers(self, params):
        return [DenseLayer(params[f"{self.prefix}{i}.W"], params[f"{self.prefix}{i}.b"], act)
                for i, act in enumerate(self.activations)]

    def forward(self, params, x):
        cache = []
        for layer in self.layers(params):
            y, z = dense_forward(layer, x, return_pre=True)
            cache.append((layer, x, z))
            x = y
        return x, cache

    def backward(self, cache, grad, grads):
        for i in reversed(range(len(cache))):
            layer, x, z = cache[i]
            grad, gw, gb = dense_backward(layer, x, grad, pre=z)
            grads[f"{self.prefix}{i}.W"] = grads.get(f"{self.prefix}{i}.W", 0) + gw
            grads[f"{self.prefix}{i}.b"] = grads.get(f"{self.prefix}{i}.b", 0) + gb
        return grad


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``;
    inputs are not modified."""
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient keys differ from parameter keys")
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = state.beta1 * state.m.get(k, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(k, 0.0) + (1 - state.beta2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(state.lr, state.beta1, state.beta2, state.eps, step,
                                 new_m, new_v)


# -- gradient checking ----------------------------------------------------------

@dataclass
class FDReport:
    max_rel_err: float
    checked: int
    tolerance: float
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def finite_diff_check(loss_fn, params: dict, grads: dict, h=1e-5, tolerance=1e-4,
                      n_coords=50, seed=0, floor=1e-6) -> FDReport:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    Checks a seeded random subset of ``n_coords`` coordinates (all of them
    if there are fewer). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    work = {k: v.astype(np.float64).copy() for k, v in params.items()}
    worst, worst_at = 0.0, ()
    for k, i in coords:
        flat = work[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(work)
        flat[i] = orig - h
        down = loss_fn(work)
        flat[i] = orig
        num = (up - down) / (2 * h)
        ana = float(np.asarray(grads[k]).reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if err > worst:
            worst, worst_at = err, (k, i, ana, num)
    return FDReport(worst, len(coords), tolerance, worst_at)


# -- checkpoints ----------------------------------------------------------------
#
# Layout (little-endian):
#   magic b"VPNN" | u16 version | u32 tensor count
#   per tensor: u16 name length | name utf-8 | u8 ndim | u32 dims[ndim]
#   then all tensor data as float32, in manifest order.

CKPT_MAGIC = b"VPNN"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict):
    buf = io.BytesIO()
    names = sorted(params)
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(names)))
    for n in names:
        arr = np.asarray(params[n])
        enc = n.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for n in names:
        buf.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a vidpoint checkpoint")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2: off + 2 + ln].decode("utf-8")
        off += 2 + ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
        off += 1 + 4 * ndim
        manifest.append((name, shape))
    params = {}
    for name, shape in manifest:
        n = int(np.prod(shape))
        if off + 4 * n > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(raw, "<f4", n, off).astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return params
