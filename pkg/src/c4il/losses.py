"""The four training objectives and their phase-dependent combination.

All losses are tape ops, so one backward pass yields gradients for the
encoder and every head. Sum/mean conventions: classification and both
distillation losses sum over the batch; the concentration loss averages
over anchors (and over positives within an anchor), so its magnitude is
batch-size independent. Skipped terms (zero weight, or phase 1) are never
evaluated, which keeps e.g. the fine-tune configuration bitwise equal to
the plain classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx
from .model import ClassifierHeads, EncoderModel, ModelSnapshot, ProtocolError


class ConfigurationError(ValueError):
    """Loss invoked in a configuration where it is undefined."""


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of the l2-normalized vectors; in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= nx.NORM_EPS or nb <= nx.NORM_EPS:
        raise nx.DegenerateVectorError("cosine_similarity: zero-norm input")
    return float(a @ b / (na * nb))


def positive_mask(labels: np.ndarray, twin_of: np.ndarray, label_guided: bool = True) -> np.ndarray:
    """Positive-pair mask over an augmented batch.

    labels  (n,): class ids for all batch elements (twins carry the label of
    their source). twin_of (n,): index of element i's augmented twin, or -1.
    With label guidance the positives of i are its twin plus every other
    same-class element; without it (the label-guidance ablation) only the
    twin counts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    twin_of = np.asarray(twin_of, dtype=np.int64)
    if twin_of.shape != (n,):
        raise ValueError(f"twin_of must have shape ({n},), got {twin_of.shape}")
    mask = np.zeros((n, n), dtype=np.uint8)
    if label_guided:
        mask = (labels[:, None] == labels[None, :]).astype(np.uint8)
        np.fill_diagonal(mask, 0)
    has_twin = twin_of >= 0
    rows = np.arange(n)[has_twin]
    mask[rows, twin_of[has_twin]] = 1
    np.fill_diagonal(mask, 0)
    return mask


def positive_set(anchor: int, labels: np.ndarray, twin_of: np.ndarray,
                 label_guided: bool = True) -> np.ndarray:
    """Indices of the anchor's positives; may be empty."""
    return np.flatnonzero(positive_mask(labels, twin_of, label_guided)[anchor])


def _concentration_op(gamma: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    loss, dgamma = kernels.concentration_loss_grad(np.ascontiguousarray(gamma.value), mask)
    out = np.array([[loss]])

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate(g[0, 0] * dgamma)

    return gamma.tape.record(out, (gamma,), backward, "class_concentration")


def concentration_loss(reps: nx.Tensor, labels: np.ndarray, twin_of: np.ndarray,
                       label_guided: bool = True) -> nx.Tensor:
    """Class-concentration contrastive loss over an augmented batch.

    Per anchor: mean over its positives of -log(exp(s(i,p)) / mean over the
    other batch elements of exp(s(i,d))), averaged over anchors that have
    positives. Because the denominator is a mean rather than a sum, negative
    values are legal and no clamping is applied.
    """
    n = reps.value.shape[0]
    if n < 4:
        raise ConfigurationError(f"concentration loss needs an augmented batch of >= 4, got {n}")
    mask = positive_mask(labels, twin_of, label_guided)
    if mask.sum() == 0:
        raise ConfigurationError("every positive set is empty; contrastive loss undefined")
    return _concentration_op(nx.l2_normalize(reps), mask)


def representation_distillation(cur_reps: nx.Tensor, prev_gamma: np.ndarray) -> nx.Tensor:
    """Sum of squared distances between current and previous unit-normalized
    representations of the same inputs; gradient flows into cur_reps only."""
    prev = nx.as_matrix(prev_gamma)
    if cur_reps.value.shape != prev.shape:
        raise nx.ShapeError(f"shape mismatch {cur_reps.value.shape} vs {prev.shape}")
    return nx.sum_sq_diff(nx.l2_normalize(cur_reps), cur_reps.tape.constant(prev))


def soft_label_distillation(cur_reps: nx.Tensor, old_head_tensors: list[nx.Tensor],
                            prev_soft_labels: np.ndarray) -> nx.Tensor:
    """Summed per-sample MSE between current and previous soft labels.

    Both distributions are softmaxes over the old heads only (the previous
    model has no columns for new classes). The snapshot side enters as a
    constant; gradient reaches the encoder and the old heads of the current
    model.
    """
    if not old_head_tensors:
        raise ProtocolError("distillation requires at least one old head")
    probs = nx.softmax(nx.matmul(cur_reps, nx.concat_cols(old_head_tensors)))
    target = cur_reps.tape.constant(prev_soft_labels)
    if probs.value.shape != target.value.shape:
        raise nx.ShapeError(f"soft-label shapes differ: {probs.value.shape} vs {target.value.shape}")
    n = probs.value.shape[0]
    return nx.scale(nx.mse(probs, target), float(n))


def classification_loss(logits: nx.Tensor, target_cols: np.ndarray) -> nx.Tensor:
    """Cross-entropy summed over the batch, fused with the softmax."""
    return nx.softmax_cross_entropy(logits, target_cols)


# ---------------------------------------------------------------------------
# Phase-dependent combination
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Base loss weights and their phase schedules.

    beta grows with the phase index: beta_t = beta_{t-1} + lam*(t-1). kappa
    scales with the fraction of old classes among all seen classes. eta is
    constant. All must be nonnegative.
    """

    beta1: float = 1.0
    lam: float = 0.1
    kappa1: float = 1.0
    eta1: float = 1.0

    def __post_init__(self):
        for name in ("beta1", "lam", "kappa1", "eta1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def beta_at(self, t: int) -> float:
        return self.beta1 + self.lam * (t * (t - 1)) / 2.0

    def kappa_at(self, t: int, n_old_classes: int, n_seen_classes: int) -> float:
        if t <= 1:
            return 0.0
        return self.kappa1 * n_old_classes / n_seen_classes

    def eta_at(self, t: int) -> float:
        return 0.0 if t <= 1 else self.eta1

    def at_phase(self, t: int, n_old_classes: int, n_seen_classes: int) -> tuple[float, float, float]:
        return (self.beta_at(t), self.kappa_at(t, n_old_classes, n_seen_classes), self.eta_at(t))


@dataclass
class PhaseContext:
    """Everything the objective needs at phase t (1-based)."""

    t: int
    model: EncoderModel
    heads: ClassifierHeads
    snapshot: ModelSnapshot | None
    beta: float
    kappa: float
    eta: float
    label_guided: bool = True

    def __post_init__(self):
        if self.t >= 2 and self.snapshot is None and (self.kappa > 0 or self.eta > 0):
            raise ProtocolError(f"phase {self.t} with distillation weights needs a snapshot")
        if self.t == 1 and self.snapshot is not None:
            raise ProtocolError("phase 1 cannot have a previous-model snapshot")


def combined_objective(
    tape: nx.Tape,
    ctx: PhaseContext,
    x: np.ndarray,
    labels: np.ndarray,
    x_twin: np.ndarray | None,
) -> tuple[nx.Tensor, dict[str, float], dict[str, nx.Tensor]]:
    """Total objective L_ce + beta*L_con + kappa*L_kd + eta*L_rld on a batch.

    x (B, d) is the drawn batch, x_twin (B, d) the augmented views (required
    when beta > 0). Distillation terms exist only for t >= 2; at phase 1 the
    objective reduces to L_ce + beta*L_con regardless of kappa/eta. Returns
    the scalar loss tensor, per-component float values, and the parameter
    bindings whose .grad fields are populated after tape.backward().
    """
    b = x.shape[0]
    bind = ctx.model.bind(tape)
    bind.update(ctx.heads.bind(tape))

    use_con = ctx.beta > 0
    use_kd = ctx.t >= 2 and ctx.kappa > 0
    use_rld = ctx.t >= 2 and ctx.eta > 0

    if use_con:
        if x_twin is None or x_twin.shape != x.shape:
            raise ConfigurationError("concentration loss needs one augmented twin per sample")
        reps_all = ctx.model.forward(tape, np.vstack([x, x_twin]), bind)
        reps = nx.take_rows(reps_all, np.arange(b))
    else:
        reps_all = None
        reps = ctx.model.forward(tape, x, bind)

    head_tensors = [bind[f"head.{i}"] for i in range(ctx.heads.n_heads)]
    logits = nx.matmul(reps, nx.concat_cols(head_tensors))
    ce = classification_loss(logits, ctx.heads.columns_for(labels))

    total = ce
    parts = {"l_ce": float(ce.value[0, 0]), "l_con": 0.0, "l_kd": 0.0, "l_rld": 0.0}

    if use_con:
        labels_all = np.concatenate([labels, labels])
        twin_of = np.concatenate([np.arange(b) + b, np.arange(b)])
        con = concentration_loss(reps_all, labels_all, twin_of, ctx.label_guided)
        parts["l_con"] = float(con.value[0, 0])
        total = nx.add(total, nx.scale(con, ctx.beta))

    if use_kd:
        old_heads = head_tensors[: ctx.t - 1]
        kd = soft_label_distillation(reps, old_heads, ctx.snapshot.soft_labels(x))
        parts["l_kd"] = float(kd.value[0, 0])
        total = nx.add(total, nx.scale(kd, ctx.kappa))

    if use_rld:
        rld = representation_distillation(reps, ctx.snapshot.normalized_reps(x))
        parts["l_rld"] = float(rld.value[0, 0])
        total = nx.add(total, nx.scale(rld, ctx.eta))

    parts["total"] = float(total.value[0, 0])
    return total, parts, bind
