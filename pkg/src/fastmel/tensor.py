"""Dense rank-<=3 float64 tensors with reverse-mode automatic differentiation.

Operations record backward closures on their outputs; ``backward`` replays
them in reverse topological order via a :class:`GradTape`. Gradient tracking
is suspended inside ``no_grad()`` (inference, finite-difference probes).
Broadcasting is limited to bias addition (matrix + row vector); everything
else requires exact shape agreement.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DataError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable gradient recording within the block."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array of rank <= 3, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the rank-3 cap (shape {arr.shape})")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """View of the same data, cut off from the graph."""
        return Tensor(self.data)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __add__(self, other):
        return add(self, _coerce(other))

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*parents: Tensor) -> bool:
    return grad_enabled() and any(p.requires_grad for p in parents)


def _attach(out: Tensor, parents: tuple, backward_fn) -> None:
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn


class GradTape:
    """Ordered record of the operations reachable from a scalar root.

    ``order`` lists every tensor in the graph with parents before children,
    so the backward sweep (reversed order) sees each node only after all of
    its consumers have contributed gradient.
    """

    def __init__(self, root: Tensor):
        if root.data.shape != ():
            raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.root = root
        self.order = order

    def backward(self) -> None:
        for node in self.order:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data)
        self.root.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.order):
            if node._backward is not None:
                node._backward()


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
    tape = GradTape(loss)
    tape.backward()
    return tape


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also matrix + row-vector bias broadcast."""
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if _track(a, b):
        def _bw():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad.sum(axis=0) if bias else out.grad
        _attach(out, (a, b), _bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    if _track(a, b):
        def _bw():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad -= out.grad
        _attach(out, (a, b), _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if _track(a, b):
        def _bw():
            if a.requires_grad:
                a.grad += out.grad * b.data
            if b.requires_grad:
                b.grad += out.grad * a.data
        _attach(out, (a, b), _bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    if _track(a):
        def _bw():
            a.grad += out.grad * s
        _attach(out, (a,), _bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _track(a, b):
        def _bw():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        _attach(out, (a, b), _bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data.T)
    if _track(a):
        def _bw():
            a.grad += out.grad.T
        _attach(out, (a,), _bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    out = Tensor(a.data.reshape(shape))
    if _track(a):
        def _bw():
            a.grad += out.grad.reshape(a.shape)
        _attach(out, (a,), _bw)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    if _track(a):
        def _bw():
            a.grad += out.grad * (a.data > 0.0)
        _attach(out, (a,), _bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    if _track(a):
        def _bw():
            a.grad += out.grad
        _attach(out, (a,), _bw)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    if _track(a):
        def _bw():
            a.grad += out.grad / n
        _attach(out, (a,), _bw)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    if _track(x):
        def _bw():
            g = out.grad
            x.grad += y * (g - (g * y).sum(axis=1, keepdims=True))
        _attach(out, (x,), _bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the feature axis (population variance)."""
    if eps < 0:
        raise ConfigError(f"layer_norm eps must be >= 0, got {eps}")
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a rank-2 input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm parameter shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    if _track(x, gamma, beta):
        def _bw():
            g = out.grad
            if beta.requires_grad:
                beta.grad += g.sum(axis=0)
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=0)
            if x.requires_grad:
                dxhat = g * gamma.data
                x.grad += inv * (
                    dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
                )
        _attach(out, (x, gamma, beta), _bw)
    return out


def _conv1d(x: Tensor, w: Tensor, b: Tensor, pad_left: int, pad_right: int) -> Tensor:
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d needs input LxC and kernel KxCxO, got {x.shape} / {w.shape}")
    k, c_in, c_out = w.shape
    length = x.shape[0]
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {b.shape} does not match {c_out} output channels")
    xp = np.zeros((length + pad_left + pad_right, c_in))
    xp[pad_left:pad_left + length] = x.data
    y = np.tile(b.data, (length, 1))
    for j in range(k):
        y += xp[j:j + length] @ w.data[j]
    out = Tensor(y)
    if _track(x, w, b):
        def _bw():
            g = out.grad
            if b.requires_grad:
                b.grad += g.sum(axis=0)
            if w.requires_grad:
                for j in range(k):
                    w.grad[j] += xp[j:j + length].T @ g
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for j in range(k):
                    dxp[j:j + length] += g @ w.data[j].T
                x.grad += dxp[pad_left:pad_left + length]
        _attach(out, (x, w, b), _bw)
    return out


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1D convolution with symmetric zero padding."""
    k = w.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel size, got {k}")
    pad = (k - 1) // 2
    return _conv1d(x, w, b, pad, pad)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1D convolution that only looks at past positions."""
    k = w.shape[0]
    return _conv1d(x, w, b, k - 1, 0)


def dropout(x: Tensor, rate: float, rng_seed: int, training: bool) -> Tensor:
    """Inverted dropout driven by a counter-based (Philox) generator.

    Identity when not training. The survivor scaling 1/(1-rate) keeps the
    expected value unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    gen = np.random.Generator(np.random.Philox(key=rng_seed & ((1 << 128) - 1)))
    keep = (gen.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)
    if _track(x):
        def _bw():
            x.grad += out.grad * keep
        _attach(out, (x,), _bw)
    return out


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows by index (embedding lookup, duration expansion).

    Backward scatter-adds, so a row selected several times accumulates the
    gradient of every copy.
    """
    if t.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 tensor, got {t.shape}")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise DataError(
            f"row index out of range: valid [0, {t.shape[0]}), got {idx.min()}..{idx.max()}"
        )
    out = Tensor(t.data[idx])
    if _track(t):
        def _bw():
            np.add.at(t.grad, idx, out.grad)
        _attach(out, (t,), _bw)
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ConfigError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row counts disagree: {[q.shape for q in parts]}")
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if _track(*parts):
        offsets = np.cumsum([0] + widths)
        def _bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.grad += out.grad[:, lo:hi]
        _attach(out, tuple(parts), _bw)
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    d = sub(pred, _coerce(target))
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# verification helpers


def grad_check(f, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` to central differences.

    ``f`` must read from the given tensors (it may close over structures that
    reference the same objects). Returns the max over all input elements of
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if h <= 0:
        raise ConfigError(f"grad_check step must be positive, got {h}")
    for t in inputs:
        if not t.requires_grad:
            raise ConfigError("grad_check inputs must have requires_grad=True")
    out = f(*inputs)
    if out.data.shape != ():
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    backward(out)
    analytic = [np.array(t.grad) for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(central), 1e-8)
            worst = max(worst, abs(aflat[i] - central) / denom)
    return worst


class DropoutRng:
    """Derives per-site dropout keys from (seed, step, site label).

    The same triple always yields the same mask, making training runs
    reproducible regardless of evaluation order.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def key(self, site: str) -> int:
        digest = hashlib.sha256(f"{self.seed}|{self.step}|{site}".encode()).digest()
        return int.from_bytes(digest[:16], "little")
