"""Dense float64 math with a per-batch reverse-mode tape.

Matrices are plain 2-D float64 ndarrays (row-major). A `Tape` records every
operation in execution order, which is automatically topological, so the
backward sweep is a single reverse pass that visits each node exactly once.
Tapes are rebuilt per batch; produced values are never mutated.

`finite_diff_grad` is the independent gradient oracle used by the gradcheck
harness and the test suite: central differences, default step 1e-5.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

NORM_EPS = 1e-12
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(ValueError):
    """A vector that must have positive norm is (numerically) zero."""


class LabelError(ValueError):
    """A class index lies outside the valid range."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite evaluation."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array; 1-D input becomes a single row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    return a


def _check_finite(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} produced non-finite values")
    return a


class Tensor:
    """A node on a tape: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "tape", "op")

    def __init__(self, tape, value, requires_grad, parents=(), backward_fn=None, op="leaf"):
        self.tape = tape
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


class Tape:
    """Ordered operation record; single-threaded within one instance."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        t = Tensor(self, as_matrix(value), requires_grad)
        self.nodes.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def record(self, value: np.ndarray, parents: tuple, backward_fn, op: str = "op") -> Tensor:
        req = any(p.requires_grad for p in parents)
        t = Tensor(self, value, req, parents, backward_fn if req else None, op)
        self.nodes.append(t)
        return t

    def backward(self, root: Tensor) -> None:
        """Reverse sweep from a scalar root; each node visited exactly once."""
        if root.tape is not self:
            raise ValueError("root tensor belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        root.accumulate(np.ones_like(root.value))
        for node in reversed(self.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.value.shape} x {b.value.shape}")
    out = _check_finite("matmul", a.value @ b.value)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)

    return _same_tape(a, b).record(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a (1, k) bias row against (n, k)."""
    av, bv = a.value, b.value
    if av.shape != bv.shape and not (bv.shape == (1, av.shape[1])):
        raise ShapeError(f"add: shapes {av.shape} and {bv.shape}")
    out = av + bv

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g if bv.shape == g.shape else g.sum(axis=0, keepdims=True))

    return _same_tape(a, b).record(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: shapes {a.value.shape} and {b.value.shape}")
    out = a.value - b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _same_tape(a, b).record(out, (a, b), backward, "sub")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.value * c

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return a.tape.record(out, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (a.value > 0.0))

    return a.tape.record(out, (a,), backward, "relu")


def l2_normalize(a: Tensor) -> Tensor:
    """Normalize each row to unit Euclidean norm.

    The backward pass applies the projection Jacobian (I - gg^T)/||v|| row
    by row. Rows with norm <= 1e-12 are rejected.
    """
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("l2_normalize: row with (near-)zero norm")
    gamma = a.value / norms

    def backward(g):
        if a.requires_grad:
            inner = (g * gamma).sum(axis=1, keepdims=True)
            a.accumulate((g - inner * gamma) / norms)

    return a.tape.record(gamma, (a,), backward, "l2_normalize")


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if not np.all(np.isfinite(a.value)):
        raise FloatingPointError("softmax: non-finite logits")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * probs).sum(axis=1, keepdims=True)
            a.accumulate(probs * (g - inner))

    return a.tape.record(probs, (a,), backward, "softmax")


def _validate_targets(targets, n_rows: int, n_cols: int) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if idx.shape != (n_rows,):
        raise LabelError(f"expected {n_rows} targets, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= n_cols:
        raise LabelError(f"target index out of range [0, {n_cols})")
    return idx


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Sum over rows of -log(probs[target]), probabilities clamped at 1e-12."""
    n, k = probs.value.shape
    idx = _validate_targets(targets, n, k)
    picked = probs.value[np.arange(n), idx]
    clamped = np.maximum(picked, LOG_EPS)
    out = np.array([[-np.log(clamped).sum()]])

    def backward(g):
        if probs.requires_grad:
            d = np.zeros_like(probs.value)
            live = picked > LOG_EPS  # clamped entries have zero slope
            d[np.arange(n), idx] = np.where(live, -1.0 / clamped, 0.0)
            probs.accumulate(g[0, 0] * d)

    return probs.tape.record(out, (probs,), backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Fused row softmax + cross-entropy, summed over rows.

    Gradient w.r.t. logits is probs - onehot(target), numerically stable for
    extreme logits.
    """
    n, k = logits.value.shape
    idx = _validate_targets(targets, n, k)
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    out = np.array([[-log_probs[np.arange(n), idx].sum()]])

    def backward(g):
        if logits.requires_grad:
            d = e / z
            d[np.arange(n), idx] -= 1.0
            logits.accumulate(g[0, 0] * d)

    return logits.tape.record(out, (logits,), backward, "softmax_cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mse: shapes {a.value.shape} and {b.value.shape}")
    diff = a.value - b.value
    out = np.array([[np.mean(diff * diff)]])
    n = diff.size

    def backward(g):
        d = g[0, 0] * 2.0 * diff / n
        if a.requires_grad:
            a.accumulate(d)
        if b.requires_grad:
            b.accumulate(-d)

    return _same_tape(a, b).record(out, (a, b), backward, "mse")


def sum_sq_diff(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared elementwise differences (no averaging)."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sum_sq_diff: shapes {a.value.shape} and {b.value.shape}")
    diff = a.value - b.value
    out = np.array([[np.sum(diff * diff)]])

    def backward(g):
        d = g[0, 0] * 2.0 * diff
        if a.requires_grad:
            a.accumulate(d)
        if b.requires_grad:
            b.accumulate(-d)

    return _same_tape(a, b).record(out, (a, b), backward, "sum_sq_diff")


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.value.sum()]])

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.value, g[0, 0]))

    return a.tape.record(out, (a,), backward, "sum")


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = a.value[idx]

    def backward(g):
        if a.requires_grad:
            d = np.zeros_like(a.value)
            np.add.at(d, idx, g)
            a.accumulate(d)

    return a.tape.record(out, (a,), backward, "take_rows")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    rows = {t.value.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(rows)}")
    out = np.concatenate([t.value for t in tensors], axis=1)
    splits = np.cumsum([t.value.shape[1] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            if t.requires_grad:
                t.accumulate(piece)

    return _same_tape(*tensors).record(out, tuple(tensors), backward, "concat_cols")


def reshape(a: Tensor, shape: tuple[int, int]) -> Tensor:
    out = a.value.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.value.shape))

    return a.tape.record(out, (a,), backward, "reshape")


def unfold_patches(a: Tensor, n: int, h: int, w: int, c: int, kh: int, kw: int) -> Tensor:
    """im2col as a linear tape op; backward scatter-adds via col2im."""
    hw = h * w * c
    if a.value.shape != (n, hw):
        raise ShapeError(f"unfold_patches: expected ({n}, {hw}), got {a.value.shape}")
    out = kernels.im2col(np.ascontiguousarray(a.value), n, h, w, c, kh, kw)

    def backward(g):
        if a.requires_grad:
            a.accumulate(kernels.col2im_add(np.ascontiguousarray(g), n, h, w, c, kh, kw))

    return a.tape.record(out, (a,), backward, "unfold_patches")


def mean_pool_2x2(a: Tensor, n: int, h: int, w: int) -> Tensor:
    """2x2 mean pooling over rows laid out as (n*h*w, f); odd edges dropped."""
    f = a.value.shape[1]
    if a.value.shape[0] != n * h * w:
        raise ShapeError(f"mean_pool_2x2: expected {n * h * w} rows, got {a.value.shape[0]}")
    ph, pw = h // 2, w // 2
    grid = a.value.reshape(n, h, w, f)[:, : 2 * ph, : 2 * pw, :]
    pooled = 0.25 * (grid[:, 0::2, 0::2] + grid[:, 0::2, 1::2] + grid[:, 1::2, 0::2] + grid[:, 1::2, 1::2])
    out = pooled.reshape(n * ph * pw, f)

    def backward(g):
        if a.requires_grad:
            gg = 0.25 * g.reshape(n, ph, pw, f)
            d = np.zeros((n, h, w, f))
            for dy in (0, 1):
                for dx in (0, 1):
                    d[:, dy : 2 * ph : 2, dx : 2 * pw : 2, :] = gg
            a.accumulate(d.reshape(n * h * w, f))

    return a.tape.record(out, (a,), backward, "mean_pool_2x2")


# ---------------------------------------------------------------------------
# Gradient oracle and optimizer
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, elementwise.

    Independent of the tape machinery by construction; used as the oracle
    against which every registered operation is checked.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f(x)
        flat_x[i] = orig - h
        fm = f(x)
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at element {i}")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-aware distance: ||a-b|| / max(||a||, ||b||, 1e-4)."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(na, nb, 1e-4))


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One momentum-SGD step: v <- momentum*v + g; p <- p - lr*v.

    Pure: returns fresh parameter and velocity dicts. Missing velocity
    entries start at zero.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    new_params = {}
    new_vel = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p.copy()
            new_vel[name] = velocities.get(name, np.zeros_like(p)).copy()
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        v = momentum * velocities.get(name, np.zeros_like(p)) + g
        new_params[name] = p - lr * v
        new_vel[name] = v
    return new_params, new_vel


class SGD:
    """Momentum SGD with an optional step-decay learning-rate schedule."""

    def __init__(self, lr: float, momentum: float = 0.9, decay_every: int = 0, decay_factor: float = 0.1):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.base_lr = lr
        self.momentum = momentum
        self.decay_every = decay_every
        self.decay_factor = decay_factor
        self.velocities: dict[str, np.ndarray] = {}

    def lr_at(self, epoch: int) -> float:
        if self.decay_every and self.decay_every > 0:
            return self.base_lr * self.decay_factor ** (epoch // self.decay_every)
        return self.base_lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], epoch: int = 0):
        new_params, self.velocities = sgd_step(params, grads, self.velocities, self.lr_at(epoch), self.momentum)
        return new_params
