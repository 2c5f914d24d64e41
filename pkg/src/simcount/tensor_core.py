"""Dense double-precision tensors with reverse-mode differentiation.

Every differentiable operation builds a node holding its parents and a
closure that maps the output gradient to parent gradients. ``backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# Ops whose analytic backward is deliberately perturbed; used by the
# verification harness to prove that grad checks catch broken gradients.
_CORRUPTED_OPS: set[str] = set()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigurationError(ValueError):
    """An operation was configured with inconsistent sizes or settings."""


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for the common cases
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable tensor; ``decay_enabled`` opts into weight decay."""

    def __init__(self, data, name: str, decay_enabled: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay_enabled = decay_enabled

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    if op in _CORRUPTED_OPS:
        inner = backward_fn

        def backward_fn(g):
            return [None if r is None else 1.5 * r + 1e-3 for r in inner(g)]

    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


@contextlib.contextmanager
def corrupt_gradient(op: str):
    """Temporarily break the analytic backward of ``op`` (test hook)."""
    _CORRUPTED_OPS.add(op)
    try:
        yield
    finally:
        _CORRUPTED_OPS.discard(op)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad.

    ``seed`` is the upstream gradient of a non-scalar output (vector-Jacobian product).
    """
    if seed is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    elif np.shape(seed) != loss.shape:
        raise ShapeError(f"seed shape {np.shape(seed)} does not match output {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), bw, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, cuts, axis=axis)

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in xs])
    return _make(out, xs, lambda g: [g[i] for i in range(len(xs))], "stack")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), bw, "slice")


def broadcast_channels(v: Tensor, h: int, w: int) -> Tensor:
    """Tile a [c] vector into a [c, h, w] map."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_channels expects a vector, got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy()
    return _make(out, (v,), lambda g: (g.sum(axis=(1, 2)),), "broadcast")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-row bias ``b[k]`` to ``x[k, ...]``."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match leading axis of {x.shape}")
    extra = (1,) * (x.data.ndim - 1)
    axes = tuple(range(1, x.data.ndim))
    out = x.data + b.data.reshape(b.shape + extra)
    return _make(out, (x, b), lambda g: (g, g.sum(axis=axes) if axes else g), "add_bias")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),), "sum")


def mean_leading(x: Tensor) -> Tensor:
    """Mean over the leading axis."""
    n = x.shape[0]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    shape = x.shape
    return _make(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single learnable value in ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale_by expects a single-element factor, got {s.shape}")
    X, c = x.data, s.data.reshape(-1)[0]
    return _make(X * c, (x, s), lambda g: (g * c, np.array([np.sum(g * X)])), "scale_by")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def square(x: Tensor) -> Tensor:
    X = x.data
    return _make(X * X, (x,), lambda g: (2.0 * g * X,), "square")


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "add": add, "hadamard": hadamard, "scale": scale}


def elementwise(kind: str, *args):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis (a vector, or each row of a matrix)."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# spatial


def _resolve_padding(padding) -> tuple[int, int, int, int]:
    """Normalise to (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    pads = tuple(int(p) for p in padding)
    if len(pads) == 2:
        return pads[0], pads[1], pads[0], pads[1]
    if len(pads) == 4:
        return pads  # type: ignore[return-value]
    raise ConfigurationError(f"padding must be an int, (before, after) or 4-tuple, got {padding!r}")


def same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving an output of ceil(size / stride)."""
    out = -(-size // stride)
    total_pad = max((out - 1) * stride + k - size, 0)
    return total_pad // 2, total_pad - total_pad // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of a [c_in, h, w] input with a [c_out, c_in, k, k] kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects [c,h,w] input and [o,c,k,k] kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernel.shape
    if kc != c_in or k != k2:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    pt, pb, pl, pr = _resolve_padding(padding)
    if min(pt, pb, pl, pr) < 0:
        raise ConfigurationError("padding must be non-negative")
    span_h, span_w = h + pt + pb - k, w + pl + pr - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d output size not integral: input {h}x{w}, k={k}, stride={stride}, padding={padding}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # cols: [c_in*k*k, oh*ow]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, oh * ow)
    K = kernel.data.reshape(c_out, -1)
    out = K @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, oh, ow)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        d_kernel = (g2 @ cols.T).reshape(kernel.shape)
        d_bias = g2.sum(axis=1) if bias is not None else None
        d_input = None
        if x.requires_grad:
            dcols = (K.T @ g2).reshape(c_in, k, k, oh, ow)
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += dcols[:, di, dj]
            d_input = dxp[:, pt : pt + h, pl : pl + w]
        return (d_input, d_kernel, d_bias) if bias is not None else (d_input, d_kernel)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, bw, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool expects [c,h,w] with h,w >= 1, got {x.shape}")
    c, h, w = x.shape
    n = h * w
    return _make(x.data.mean(axis=(1, 2)), (x,), lambda g: (np.broadcast_to(g[:, None, None] / n, x.shape).copy(),), "pool")


def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """[n*factor, n] corner-aligned linear interpolation weights."""
    m = n * factor
    if n == 1:
        return np.ones((m, 1), dtype=DTYPE)
    pos = np.arange(m, dtype=DTYPE) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    W = np.zeros((m, n), dtype=DTYPE)
    W[np.arange(m), lo] = 1.0 - frac
    W[np.arange(m), lo + 1] += frac
    return W


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of a [c, h, w] map by an integer factor."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects [c,h,w], got {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    _, h, w = x.shape
    Wh, Ww = _interp_matrix(h, factor), _interp_matrix(w, factor)
    out = np.einsum("ph,chw,qw->cpq", Wh, x.data, Ww, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ph,cpq,qw->chw", Wh, g, Ww, optimize=True),), "upsample")


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[..., Tensor], inputs, epsilon: float = 1e-5, seed: int = 0) -> float | None:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensor(s) to an output tensor; non-scalar outputs are
    reduced with a fixed random projection. Returns ``None`` when no input
    requires grad (nothing to check). Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    targets = [t for t in inputs if t.requires_grad]
    if not targets:
        return None

    probe = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def objective() -> float:
        return float(np.sum(fn(*inputs).data * weights))

    for t in targets:
        t.grad = None
    out = fn(*inputs)
    backward(out, weights)

    worst = 0.0
    for t in targets:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective()
            flat[i] = orig - epsilon
            down = objective()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
        t.grad = None
    return worst


class ModelParams:
    """Ordered collection of uniquely named parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def new(self, name: str, data, decay_enabled: bool = True) -> Parameter:
        return self.add(Parameter(data, name, decay_enabled))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self._params[name]
            if p.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr
