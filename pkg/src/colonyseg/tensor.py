"""Dense 4-d tensor engine with the layer set and reverse-mode gradients.

All activations are (batch, channel, height, width) arrays, float32 by
default. Layers are assembled into a small single-output DAG (`Graph`)
whose forward pass caches the activations that `Graph.backward` needs to
push gradients to every parameter and graph input.

`grad_check` re-runs a graph in float64 and compares the analytic
gradients against central finite differences, which is the reference
oracle for every layer kind here.

Tensors are never mutated by an operation; each op allocates its output.
A graph's parameters belong to a single training worker, but forward
passes in "infer" mode are read-only and safe to run concurrently on
distinct inputs.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Iterator, Optional

import numpy as np

LAYER_KINDS = (
    "conv3x3",
    "maxpool2",
    "upsample2",
    "relu",
    "batchnorm",
    "concat",
    "softmax_channels",
)

BATCHNORM_MOMENTUM = 0.9
BATCHNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shapes."""


class GraphError(RuntimeError):
    """Raised on invalid graph construction or out-of-order use."""


class Tensor:
    """Immutable-by-convention dense 4-d array of float32 (or float64).

    float32 is the working precision; float64 is accepted so verification
    harnesses (finite differences, metric sums) can run the same code at
    higher precision.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-d (n, c, h, w), got shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    @staticmethod
    def zeros(shape, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-d array, got shape {arr.shape}")
    return arr


class Parameter:
    """A learnable (or buffer) array with a gradient slot of the same shape."""

    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data, trainable: bool = True):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, trainable={self.trainable})"


# ---------------------------------------------------------------------------
# kernels
#
# Forward kernels take (inputs, params, mode) and return (output, cache).
# Backward kernels take (inputs, params, cache, grad_out) and return
# (per-input gradients, per-parameter gradients). Both sides preserve the
# dtype of their inputs.
# ---------------------------------------------------------------------------


# Reusable work buffers for the convolution kernels, keyed by role, shape,
# and dtype. Fresh multi-megabyte allocations per step are page-fault bound
# on small machines; training reuses the same shapes thousands of times.
# Thread-local so read-only parallel forward workers never share scratch.
_scratch_pools = __import__("threading").local()


def _scratch(tag: str, shape, dtype, zero: bool = False) -> np.ndarray:
    pool = getattr(_scratch_pools, "pool", None)
    if pool is None:
        pool = _scratch_pools.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.zeros(shape, dtype=dtype)
    elif zero:
        buf.fill(0)
    return buf


def _pad1(x: np.ndarray) -> np.ndarray:
    # Scratch borders stay zero: only the interior is ever written.
    n, c, h, w = x.shape
    xp = _scratch("pad", (n, c, h + 2, w + 2), x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    return xp


def _unfold3(x: np.ndarray, tag: str) -> np.ndarray:
    """Unfold 3x3 neighborhoods into (n, ci*9, h*w) without axis permutation."""
    n, ci, h, w = x.shape
    xp = _pad1(x)
    cols = _scratch(tag, (n, ci, 9, h, w), x.dtype)
    for t in range(9):
        dy, dx = divmod(t, 3)
        cols[:, :, t] = xp[:, :, dy : dy + h, dx : dx + w]
    return cols.reshape(n, ci * 9, h * w)


def conv3x3_raw(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    n, ci, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1:] != (ci, 3, 3):
        raise ShapeError(
            f"conv3x3 weight must have shape (co, {ci}, 3, 3) for input with "
            f"{ci} channels, got {weight.shape}"
        )
    co = weight.shape[0]
    bias = np.asarray(bias)
    if bias.size != co:
        raise ShapeError(f"conv3x3 bias must have length {co}, got {bias.size}")
    cols = _unfold3(x, "cols")
    out = np.empty((n, co, h, w), dtype=x.dtype)
    np.matmul(weight.reshape(co, ci * 9), cols, out=out.reshape(n, co, h * w))
    out += bias.reshape(1, co, 1, 1).astype(out.dtype)
    return out


def conv3x3_grads(x, weight, gy):
    """Input/weight/bias gradients of the zero-padded 3x3 convolution."""
    n, ci, h, w = x.shape
    co = weight.shape[0]
    cols = _unfold3(x, "cols")
    gy_m = gy.reshape(n, co, h * w)
    gw = np.matmul(gy_m, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, ci, 3, 3)
    gb = gy.sum(axis=(0, 2, 3))
    # cols is dead once gw is computed; reuse its buffer for the unfolded
    # input gradient.
    gcols = np.matmul(weight.reshape(co, ci * 9).T, gy_m, out=cols)
    v = gcols.reshape(n, ci, 3, 3, h, w)
    gxp = _scratch("gpad", (n, ci, h + 2, w + 2), gy.dtype, zero=True)
    for dy in range(3):
        for dx in range(3):
            gxp[:, :, dy : dy + h, dx : dx + w] += v[:, :, dy, dx]
    return gxp[:, :, 1 : h + 1, 1 : w + 1].copy(), gw, gb


def _fw_conv3x3(inputs, params, mode):
    (x,) = inputs
    y = conv3x3_raw(x, params["weight"].data, params["bias"].data)
    return y, None


def _bw_conv3x3(inputs, params, cache, gy):
    (x,) = inputs
    gx, gw, gb = conv3x3_grads(x, params["weight"].data, gy)
    return [gx], {"weight": gw, "bias": gb}


def maxpool2_raw(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even height and width, got ({h}, {w})")
    windows = np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=4).astype(np.int8)
    y = np.take_along_axis(windows, arg[..., None].astype(np.intp), axis=4)[..., 0]
    return y, arg


def maxpool2_scatter(gy: np.ndarray, arg: np.ndarray) -> np.ndarray:
    """Route pooled gradients back to the argmax position of each 2x2 window."""
    n, c, h2, w2 = gy.shape
    scat = np.zeros((n, c, h2, w2, 4), dtype=gy.dtype)
    np.put_along_axis(scat, arg[..., None].astype(np.intp), gy[..., None], axis=4)
    return np.ascontiguousarray(
        scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, 2 * h2, 2 * w2)


def _fw_maxpool2(inputs, params, mode):
    y, arg = maxpool2_raw(inputs[0])
    return y, arg


def _bw_maxpool2(inputs, params, cache, gy):
    return [maxpool2_scatter(gy, cache)], {}


def upsample2_raw(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _fw_upsample2(inputs, params, mode):
    return upsample2_raw(inputs[0]), None


def _bw_upsample2(inputs, params, cache, gy):
    n, c, h2, w2 = gy.shape
    gx = gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    return [gx], {}


def _fw_relu(inputs, params, mode):
    (x,) = inputs
    return np.maximum(x, 0), None


def _bw_relu(inputs, params, cache, gy):
    (x,) = inputs
    return [gy * (x > 0)], {}


def _fw_batchnorm(inputs, params, mode):
    (x,) = inputs
    gamma = params["gamma"].data
    beta = params["beta"].data
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        rm = params["running_mean"]
        rv = params["running_var"]
        rm.data[:] = BATCHNORM_MOMENTUM * rm.data + (1 - BATCHNORM_MOMENTUM) * mu
        rv.data[:] = BATCHNORM_MOMENTUM * rv.data + (1 - BATCHNORM_MOMENTUM) * var
    else:
        mu = params["running_mean"].data.astype(x.dtype)
        var = params["running_var"].data.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + BATCHNORM_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv, mode)


def _bw_batchnorm(inputs, params, cache, gy):
    xhat, inv, mode = cache
    gamma = params["gamma"].data
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma[None, :, None, None]
    if mode == "train":
        n, c, h, w = gy.shape
        m = n * h * w
        gx = (
            inv[None, :, None, None]
            / m
            * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        )
    else:
        gx = gxhat * inv[None, :, None, None]
    grads = {"gamma": ggamma, "beta": gbeta}
    return [gx.astype(gy.dtype, copy=False)], grads


def _fw_concat(inputs, params, mode):
    a, b = inputs
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat requires matching batch and spatial dims, got {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=1), a.shape[1]


def _bw_concat(inputs, params, cache, gy):
    ca = cache
    return [gy[:, :ca], gy[:, ca:]], {}


def softmax_channels_raw(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_vjp(p: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Pull a gradient on the probabilities back to the pre-softmax activations."""
    return p * (gy - (gy * p).sum(axis=1, keepdims=True))


def _fw_softmax(inputs, params, mode):
    p = softmax_channels_raw(inputs[0])
    return p, p


def _bw_softmax(inputs, params, cache, gy):
    return [softmax_channels_vjp(cache, gy)], {}


_FORWARD: dict[str, Callable] = {
    "conv3x3": _fw_conv3x3,
    "maxpool2": _fw_maxpool2,
    "upsample2": _fw_upsample2,
    "relu": _fw_relu,
    "batchnorm": _fw_batchnorm,
    "concat": _fw_concat,
    "softmax_channels": _fw_softmax,
}

_BACKWARD: dict[str, Callable] = {
    "conv3x3": _bw_conv3x3,
    "maxpool2": _bw_maxpool2,
    "upsample2": _bw_upsample2,
    "relu": _bw_relu,
    "batchnorm": _bw_batchnorm,
    "concat": _bw_concat,
    "softmax_channels": _bw_softmax,
}


# ---------------------------------------------------------------------------
# functional layer API (single ops on tensors, no graph needed)
# ---------------------------------------------------------------------------


def conv3x3(inp, weight, bias) -> Tensor:
    """Zero-padded 3x3 convolution keeping the spatial size ("same")."""
    w = weight.data if isinstance(weight, (Tensor, Parameter)) else np.asarray(weight)
    b = bias.data if isinstance(bias, (Tensor, Parameter)) else np.asarray(bias)
    return Tensor(conv3x3_raw(_as_array(inp), w, b.reshape(-1)))


def maxpool2(inp) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling; also returns the in-window argmax used for backward."""
    y, arg = maxpool2_raw(_as_array(inp))
    return Tensor(y), arg


def upsample2(inp) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    return Tensor(upsample2_raw(_as_array(inp)))


def relu(inp) -> Tensor:
    return Tensor(np.maximum(_as_array(inp), 0))


def batchnorm(inp, scale, shift, mode="train", running_mean=None, running_var=None) -> Tensor:
    """Per-channel batch normalization.

    In "train" mode the batch statistics normalize the input and, when the
    running buffers are given, update them in place with momentum 0.9. In
    "infer" mode the running buffers are required and used directly.
    """
    x = _as_array(inp)
    c = x.shape[1]
    scale = np.asarray(scale).reshape(c)
    shift = np.asarray(shift).reshape(c)
    params = {"gamma": Parameter(scale), "beta": Parameter(shift)}
    if running_mean is None:
        running_mean = np.zeros(c, dtype=x.dtype)
    if running_var is None:
        if mode != "train":
            raise ValueError("infer-mode batchnorm needs running statistics")
        running_var = np.ones(c, dtype=x.dtype)
    params["running_mean"] = Parameter(np.asarray(running_mean), trainable=False)
    params["running_var"] = Parameter(np.asarray(running_var), trainable=False)
    y, _ = _fw_batchnorm([x], params, mode)
    if mode == "train" and isinstance(running_mean, np.ndarray):
        running_mean[:] = params["running_mean"].data
        running_var[:] = params["running_var"].data
    return Tensor(y)


def concat(a, b) -> Tensor:
    y, _ = _fw_concat([_as_array(a), _as_array(b)], {}, "infer")
    return Tensor(y)


def softmax_channels(inp) -> Tensor:
    """Per-pixel softmax across the channel axis."""
    return Tensor(softmax_channels_raw(_as_array(inp)))


# ---------------------------------------------------------------------------
# layer graph
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...]
    params: dict[str, Parameter]


class Graph:
    """Single-output DAG of layer nodes.

    Nodes may only reference inputs that already exist (graph inputs or
    previously added nodes), so the graph is acyclic by construction and
    insertion order is a topological order.
    """

    def __init__(self, inputs=("images",)):
        self.input_names = tuple(inputs)
        self.nodes: dict[str, LayerNode] = {}
        self._ctx = None

    def add(self, name: str, kind: str, inputs, params: Optional[dict] = None) -> str:
        if kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {kind!r}")
        if name in self.nodes or name in self.input_names:
            raise GraphError(f"duplicate node name {name!r}")
        inputs = tuple(inputs)
        for ref in inputs:
            if ref not in self.nodes and ref not in self.input_names:
                raise GraphError(f"node {name!r} references unknown input {ref!r}")
        self.nodes[name] = LayerNode(name, kind, inputs, dict(params or {}))
        self._ctx = None
        return name

    @property
    def output_name(self) -> str:
        consumed = {ref for node in self.nodes.values() for ref in node.inputs}
        sinks = [n for n in self.nodes if n not in consumed]
        if len(sinks) != 1:
            raise GraphError(f"graph must have exactly one output node, found {sinks}")
        return sinks[0]

    def parameters(self) -> Iterator[tuple[str, Parameter]]:
        for node in self.nodes.values():
            for pname, param in node.params.items():
                yield f"{node.name}.{pname}", param

    def trainable_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, param in self.parameters():
            if param.trainable:
                yield name, param

    def zero_grads(self) -> None:
        for _, param in self.parameters():
            param.grad[...] = 0

    def forward(self, feed: dict, mode: str = "infer") -> Tensor:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        acts: dict[str, np.ndarray] = {}
        for name in self.input_names:
            if name not in feed:
                raise GraphError(f"missing graph input {name!r}")
            acts[name] = _as_array(feed[name])
        caches: dict[str, object] = {}
        out_name = self.output_name
        for node in self.nodes.values():
            ins = [acts[ref] for ref in node.inputs]
            y, cache = _FORWARD[node.kind](ins, node.params, mode)
            acts[node.name] = y
            caches[node.name] = cache
        self._ctx = (acts, caches)
        return Tensor(acts[out_name])

    def backward(self, upstream, at: Optional[str] = None) -> dict[str, np.ndarray]:
        """Reverse pass from `at` (default: the output node).

        Fills the .grad slot of every trainable parameter that contributed
        to the activation at `at` and returns the gradients with respect to
        the graph inputs.
        """
        if self._ctx is None:
            raise GraphError("backward requires a completed forward pass")
        acts, caches = self._ctx
        at = at if at is not None else self.output_name
        if at not in self.nodes:
            raise GraphError(f"unknown backward entry node {at!r}")
        up = _as_array(upstream)
        if up.shape != acts[at].shape:
            raise ShapeError(
                f"upstream gradient shape {up.shape} does not match activation "
                f"shape {acts[at].shape} at node {at!r}"
            )
        self.zero_grads()
        order = list(self.nodes.values())
        start = next(i for i, node in enumerate(order) if node.name == at)
        grads: dict[str, np.ndarray] = {at: up}
        for node in reversed(order[: start + 1]):
            gy = grads.pop(node.name, None)
            if gy is None:
                continue
            ins = [acts[ref] for ref in node.inputs]
            gins, gparams = _BACKWARD[node.kind](ins, node.params, caches[node.name], gy)
            for pname, gp in gparams.items():
                node.params[pname].grad += gp
            for ref, gi in zip(node.inputs, gins):
                if ref in grads:
                    grads[ref] = grads[ref] + gi
                else:
                    grads[ref] = gi
        return {name: grads.get(name) for name in self.input_names}

    def astype(self, dtype) -> "Graph":
        """Deep copy with every parameter cast to `dtype` (for verification runs)."""
        g = Graph(self.input_names)
        for node in self.nodes.values():
            params = {
                pname: Parameter(p.data.astype(dtype), trainable=p.trainable)
                for pname, p in node.params.items()
            }
            g.add(node.name, node.kind, node.inputs, params)
        return g

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if name not in state:
                raise KeyError(f"state is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeError(
                    f"state shape {state[name].shape} does not match parameter "
                    f"{name!r} of shape {p.data.shape}"
                )
            p.data[...] = state[name]


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    max_rel_error: float
    tolerance: float
    passed: bool

    def worst(self) -> tuple[str, float]:
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def _sum_of_squares(out: np.ndarray):
    return float((out.astype(np.float64) ** 2).sum()), (2.0 * out)


def grad_check(
    graph: Graph,
    feed: dict,
    loss_fn: Optional[Callable] = None,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    inject_at: Optional[str] = None,
    mode: str = "train",
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic parameter gradients against central finite differences.

    The graph is re-run in float64 so 32-bit rounding does not drown the
    comparison. `loss_fn` maps the graph's output array to
    (scalar loss, gradient at `inject_at`); the default is sum of squares
    at the output node. With `max_entries` set, at most that many entries
    per parameter are probed (chosen with a seeded RNG).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if loss_fn is None:
        loss_fn = _sum_of_squares
    g64 = graph.astype(np.float64)
    feed64 = {
        k: _as_array(v).astype(np.float64) for k, v in feed.items()
    }

    def loss_value() -> float:
        out = g64.forward(feed64, mode=mode)
        return loss_fn(out.data)[0]

    out = g64.forward(feed64, mode=mode)
    _, up = loss_fn(out.data)
    g64.backward(up, at=inject_at)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name, param in g64.trainable_parameters():
        flat = param.data.reshape(-1)
        gflat = param.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_value()
            flat[i] = orig - epsilon
            lm = loss_value()
            flat[i] = orig
            g_fd = (lp - lm) / (2.0 * epsilon)
            g_an = gflat[i]
            rel = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
            worst = max(worst, rel)
        per_param[name] = worst
    max_rel = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(per_param, max_rel, tolerance, max_rel < tolerance)
