"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Only the handful of operations the codecs need are supported: affine maps,
relu/softplus/sigmoid, elementwise arithmetic, concat/reshape, adaptive
average pooling and nearest upsampling over the last two axes, log-softmax,
reductions, and a few fused helpers (per-sample RMS normalisation, NLL
gather, complex gain on interleaved pairs).

Every operation reports to the active :class:`OpCounter` stack so the
benchmarks can measure compute without relying on wall clock.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# per thread: the deployment runs device, edge and user loops side by side
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _counters() -> list["OpCounter"]:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(RuntimeError):
    """A caller-side precondition was violated."""


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@dataclass
class OpCounter:
    """Deterministic operation tally (graph nodes and floating point ops)."""

    nodes: int = 0
    flops: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, name: str, flops: int) -> None:
        self.nodes += 1
        self.flops += int(flops)
        self.by_op[name] = self.by_op.get(name, 0) + 1


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def _count(name: str, flops: int) -> None:
    for c in _counters():
        c.add(name, flops)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, name: str, flops: int) -> Tensor:
    _count(name, flops)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add", out.size)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg", a.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul", out.size)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log", a.size)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu", a.size)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = _sigmoid(x)
    return _make(out, (a,), lambda g: (g * sig,), "softplus", a.size)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid", a.size)


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape", 0)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation of {a.ndim} dims")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose", 0)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, parts, backward, "concat", 0)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum", a.size)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------- dense layers

class ParamLayer:
    """Affine layer ``y = x @ W + b``; parameters carry their own gradients."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 name: str = "dense", zero: bool = False, bias_init: float = 0.0):
        self.name = name
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weights = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.full(n_out, bias_init), requires_grad=True, name=f"{name}.bias")

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    @property
    def grad_weights(self) -> np.ndarray:
        return np.zeros_like(self.weights.data) if self.weights.grad is None else self.weights.grad

    @property
    def grad_bias(self) -> np.ndarray:
        return np.zeros_like(self.bias.data) if self.bias.grad is None else self.bias.grad

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def zero_grad(self) -> None:
        self.weights.grad = None
        self.bias.grad = None


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input dim {x.shape[-1]} does not match weight dim {w.shape[0]}")
    rows = x.size // x.shape[-1]
    if _grad_enabled():
        out = x.data @ w.data + b.data
    else:
        # one BLAS call per row: a sample's output does not depend on what it is batched with
        x2 = x.data.reshape(rows, 1, x.shape[-1])
        out = (x2 @ w.data).reshape(x.shape[:-1] + (w.shape[1],)) + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), backward, "affine", 2 * rows * w.shape[0] * w.shape[1])


_ACTIVATIONS = {"linear": lambda t: t, "relu": relu, "softplus": softplus}


def dense_forward(x, layer: ParamLayer, activation: str = "linear") -> Tensor:
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    return _ACTIVATIONS[activation](affine(as_tensor(x), layer.weights, layer.bias))


# ---------------------------------------------------------------- grids

def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    # adaptive average pooling bins: [floor(i*n/k), ceil((i+1)*n/k))
    p = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def _upsample_matrix(n_in: int, n_out: int) -> np.ndarray:
    u = np.zeros((n_out, n_in))
    for j in range(n_out):
        u[j, (j * n_in) // n_out] = 1.0
    return u


def _grid_map(a: Tensor, rows: np.ndarray, cols: np.ndarray, name: str) -> Tensor:
    # out[..., i, j] = sum_{p,q} rows[i,p] a[..., p, q] cols[j,q]
    out = rows @ a.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)

    return _make(out, (a,), backward, name, a.size * (rows.shape[0] + cols.shape[0]))


def avg_pool2d(a: Tensor, out_size: int) -> Tensor:
    """Adaptive average pooling of the trailing square grid to ``out_size``."""
    h, w = a.shape[-2:]
    if not 1 <= out_size <= min(h, w):
        raise DimensionError(f"pool size {out_size} outside [1, {min(h, w)}]")
    return _grid_map(a, _pool_matrix(h, out_size), _pool_matrix(w, out_size), "avg_pool2d")


def upsample_nearest(a: Tensor, out_size: int) -> Tensor:
    h, w = a.shape[-2:]
    return _grid_map(a, _upsample_matrix(h, out_size), _upsample_matrix(w, out_size), "upsample")


def embed_grid(a: Tensor, out_size: int, row_off: int, col_off: int) -> Tensor:
    """Place the trailing grid inside a zero ``out_size`` square at the given offset."""
    h, w = a.shape[-2:]
    if row_off < 0 or col_off < 0 or row_off + h > out_size or col_off + w > out_size:
        raise DimensionError(f"{h}x{w} grid at ({row_off}, {col_off}) does not fit in {out_size}")
    rows = np.eye(out_size, h, -row_off)
    cols = np.eye(out_size, w, -col_off)
    return _grid_map(a, rows, cols, "embed_grid")


# ---------------------------------------------------------------- fused helpers

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax", 4 * a.size)


def gather_mean(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Mean over all positions of ``a`` picked along ``axis`` by integer ``index``.

    ``index`` has the shape of ``a`` with ``axis`` removed.
    """
    index = np.asarray(index)
    idx = np.expand_dims(index, axis)
    picked = np.take_along_axis(a.data, idx, axis=axis)
    n = picked.size

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, float(g) / n, axis=axis)
        return (ga,)

    return _make(np.asarray(picked.mean()), (a,), backward, "gather_mean", n)


def rms_normalize(a: Tensor, batch_axis: bool = False) -> Tensor:
    """Scale so the mean squared entry is one (per leading sample if ``batch_axis``)."""
    x = a.data
    axes = tuple(range(1, x.ndim)) if batch_axis else None
    ms = np.mean(x * x, axis=axes, keepdims=batch_axis)
    if np.any(ms == 0):
        raise ContractError("cannot power-normalise an all-zero tensor")
    r = np.sqrt(ms)
    y = x / r
    n = x[0].size if batch_axis else x.size

    def backward(g):
        dot = np.sum(g * y, axis=axes, keepdims=batch_axis)
        return ((g - y * dot / n) / r,)

    return _make(y, (a,), backward, "rms_normalize", 4 * x.size)


def complex_gain(a: Tensor, h_re, h_im) -> Tensor:
    """Multiply interleaved (re, im) pairs on the last axis by a complex gain.

    ``h_re``/``h_im`` broadcast against the leading axes (one gain per sample).
    """
    x = a.data.reshape(*a.shape[:-1], -1, 2)
    hr = np.asarray(h_re, dtype=DTYPE)[..., None]
    hi = np.asarray(h_im, dtype=DTYPE)[..., None]
    re = hr * x[..., 0] - hi * x[..., 1]
    im = hr * x[..., 1] + hi * x[..., 0]
    out = np.stack([re, im], axis=-1).reshape(a.shape)

    def backward(g):
        g2 = g.reshape(x.shape)
        gre = hr * g2[..., 0] + hi * g2[..., 1]
        gim = -hi * g2[..., 0] + hr * g2[..., 1]
        return (np.stack([gre, gim], axis=-1).reshape(a.shape),)

    return _make(out, (a,), backward, "complex_gain", 3 * a.size)


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)

    @property
    def n_params(self) -> int:
        return int(sum(m.size for m in self.first_moment))


def adam_step(params: Sequence[Tensor], state: AdamState | None) -> AdamState:
    """One Adam update with decoupled weight decay; parameters change in place."""
    if state is None or len(state.first_moment) != len(params):
        raise ContractError("Adam state is not initialised for these parameters")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = state.learning_rate
    step_size = lr / c1
    eps_hat = state.epsilon * np.sqrt(c2)
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.data.shape:
            raise ContractError("Adam moment shape mismatch")
        g = p.grad
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
        if lr == 0.0:
            continue
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        # m_hat / (sqrt(v_hat) + eps) == (m / c1) * sqrt(c2) / (sqrt(v) + eps * sqrt(c2))
        denom = np.sqrt(v)
        denom += eps_hat
        np.divide(m, denom, out=denom)
        denom *= step_size * np.sqrt(c2)
        p.data -= denom
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, learning_rate=lr, beta1=betas[0],
                                          beta2=betas[1], epsilon=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# ---------------------------------------------------------------- test oracle

def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[Tensor],
                     step: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), floor)
    return float(num / den)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MIBW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian f64 with a small typed header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = arr.astype(DTYPE)
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return out
