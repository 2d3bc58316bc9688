"""Linear-probe evaluation and the three-way forgetting decomposition.

The probe retrains a multinomial-logistic head on frozen representations:
80/20 seeded stratified split, features scaled by a single RMS factor, an
intercept column, full-batch gradient descent at the inverse-Lipschitz step
with weight decay 1e-4, stopping at gradient norm 1e-5 or 2000 iterations.
Everything here is read-only over frozen models and deterministic given the
seed, so separability numbers are comparable across methods.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Sample, feature_matrix, labels_of
from .memory import MemoryBank
from .model import ClassifierHeads, EncoderModel

PROBE_WEIGHT_DECAY = 1e-4
PROBE_GRAD_TOL = 1e-5
PROBE_MAX_ITER = 2000


class ProbeUndefinedError(ValueError):
    """The probe has no valid task (single class, or too few samples)."""


@dataclass
class ProbeResult:
    scope: str
    accuracy: float
    weights: np.ndarray
    final_loss: float
    iterations: int
    grad_norm: float


def _stratified_split(labels: np.ndarray, rng: np.random.Generator,
                      test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ProbeUndefinedError(f"class {c} has {idx.size} sample(s); need >= 2 to split")
        idx = idx[rng.permutation(idx.size)]
        n_test = max(1, int(round(test_fraction * idx.size)))
        if n_test >= idx.size:
            n_test = idx.size - 1
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return np.concatenate(train_idx), np.concatenate(test_idx)


def _fit_logistic(x: np.ndarray, y_idx: np.ndarray, k: int) -> tuple[np.ndarray, float, int, float]:
    """Full-batch GD on mean cross-entropy + 0.5*wd*||V||^2."""
    n, d = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y_idx] = 1.0

    # fixed step from a power-iteration bound on the curvature
    a = x.T @ x / n
    v = np.full(d, 1.0 / np.sqrt(d))
    for _ in range(50):
        w = a @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    lam_max = float(v @ (a @ v))
    lr = 1.0 / (0.5 * lam_max + PROBE_WEIGHT_DECAY)

    weights = np.zeros((d, k))
    loss = np.inf
    grad_norm = np.inf
    it = 0
    for it in range(1, PROBE_MAX_ITER + 1):
        logits = x @ weights
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        grad = x.T @ (probs - onehot) / n + PROBE_WEIGHT_DECAY * weights
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= PROBE_GRAD_TOL:
            break
        weights -= lr * grad
    log_z = np.log(e.sum(axis=1)) - shifted[np.arange(n), y_idx]
    loss = float(log_z.mean() + 0.5 * PROBE_WEIGHT_DECAY * np.sum(weights * weights))
    return weights, loss, it, grad_norm


def linear_probe(reps: np.ndarray, labels: np.ndarray, seed: int,
                 scope: str = "full") -> ProbeResult:
    """Retrain a linear classifier on frozen representations.

    The reported accuracy is on the held-out 20% stratified split. Feature
    scaling is a single scalar (1/RMS of the train split), so the probe is
    invariant to global rescaling of the representation space.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ProbeUndefinedError(f"probe needs >= 2 classes, got {classes.size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9806]))
    train_idx, test_idx = _stratified_split(labels, rng)

    lut = {int(c): i for i, c in enumerate(classes)}
    y = np.array([lut[int(v)] for v in labels], dtype=np.int64)

    rms = float(np.sqrt(np.mean(reps[train_idx] ** 2)))
    scale = 1.0 / rms if rms > 1e-12 else 1.0

    def design(idx):
        z = reps[idx] * scale
        return np.concatenate([z, np.ones((idx.size, 1))], axis=1)

    weights, loss, iters, grad_norm = _fit_logistic(design(train_idx), y[train_idx], classes.size)
    pred = np.argmax(design(test_idx) @ weights, axis=1)
    acc = float(np.mean(pred == y[test_idx]))
    return ProbeResult(scope, acc, weights, loss, iters, grad_norm)


def probe_accuracy(encoder: EncoderModel, samples: list[Sample], seed: int,
                   scope: str = "full") -> float:
    return linear_probe(encoder.encode(feature_matrix(samples)), labels_of(samples), seed, scope).accuracy


# ---------------------------------------------------------------------------
# Forgetting decomposition
# ---------------------------------------------------------------------------

def intra_phase_curve(encoders: list[EncoderModel], phase_pools: list[list[Sample]],
                      seed: int) -> np.ndarray:
    """Separability matrix: entry (k, t) probes phase-k data under the
    phase-t encoder, defined for t >= k; earlier entries are NaN."""
    n = len(encoders)
    if len(phase_pools) != n:
        raise ValueError(f"{len(encoders)} checkpoints but {len(phase_pools)} phase pools")
    out = np.full((n, n), np.nan)
    for k, pool in enumerate(phase_pools):
        for t in range(k, n):
            out[k, t] = probe_accuracy(encoders[t], pool, seed, scope=f"phase{k + 1}")
    return out


def confusion_delta(encoder: EncoderModel, phase_pools: list[list[Sample]], seed: int) -> float:
    """Mean single-phase separability minus full-data separability, in
    percentage points, under one (final) encoder."""
    per_phase = [probe_accuracy(encoder, pool, seed, scope=f"phase{k + 1}")
                 for k, pool in enumerate(phase_pools)]
    full_pool = [s for pool in phase_pools for s in pool]
    full = probe_accuracy(encoder, full_pool, seed, scope="full")
    return 100.0 * (float(np.mean(per_phase)) - full)


def deployed_accuracy(model: EncoderModel, heads: ClassifierHeads, samples: list[Sample]) -> float:
    """Accuracy of the heads as left by CIL training (no retraining)."""
    probs, classes = heads.classify(model.encode(feature_matrix(samples)), scope="all-seen")
    pred = np.array(classes)[np.argmax(probs, axis=1)]
    return float(np.mean(pred == labels_of(samples)))


def deviation_gap(model: EncoderModel, heads: ClassifierHeads, samples: list[Sample],
                  seed: int) -> float:
    """probe(full data) minus deployed-classifier accuracy, in points."""
    return 100.0 * (probe_accuracy(model, samples, seed) - deployed_accuracy(model, heads, samples))


def cil_accuracies(checkpoints: list[tuple[EncoderModel, ClassifierHeads]],
                   phase_pools: list[list[Sample]]) -> tuple[float, float, list[float]]:
    """Deployed accuracy over all seen classes after each phase.

    Returns (final accuracy, average excluding phase 1, per-phase curve).
    With a single phase the average is that phase's accuracy.
    """
    if len(checkpoints) != len(phase_pools):
        raise ValueError("checkpoints and phase pools differ in length")
    curve = []
    seen: list[Sample] = []
    for (model, heads), pool in zip(checkpoints, phase_pools):
        seen = seen + list(pool)
        curve.append(deployed_accuracy(model, heads, seen))
    final = curve[-1]
    avg_rest = float(np.mean(curve[1:])) if len(curve) > 1 else final
    return final, avg_rest, curve


def nme_classify(encoder: EncoderModel, bank: MemoryBank, samples: list[Sample]) -> np.ndarray:
    """Nearest-class-mean prediction in cosine space over memory exemplars.

    Class means are the renormalized averages of unit-normalized exemplar
    representations. Ties resolve to the lowest class id.
    """
    classes = bank.classes
    if not classes:
        raise ValueError("memory bank is empty")
    means = []
    for c in classes:
        ex = bank.exemplars(c)
        if not ex:
            raise ValueError(f"class {c} has no exemplars")
        g = encoder.encode(feature_matrix(ex))
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        mu = g.mean(axis=0)
        means.append(mu / np.linalg.norm(mu))
    m = np.stack(means)
    q = encoder.encode(feature_matrix(samples))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    sims = q @ m.T
    return np.array(classes, dtype=np.int64)[np.argmax(sims, axis=1)]


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

@dataclass
class ForgettingReport:
    """Everything the diagnostics produce for one experiment run."""

    final_acc: float
    avg_acc_except_first: float
    accuracy_curve: list[float]
    separability: np.ndarray  # (phase, time), NaN where undefined
    confusion_delta: float
    deviation_gap: float
    nme_final_acc: float | None
    audit_violations: int
    n_phases: int
    config_hash: str
    seed: int
    preset: str

    def to_dict(self) -> dict:
        sep = [[None if np.isnan(v) else float(v) for v in row] for row in self.separability]
        return {
            "final_acc": self.final_acc,
            "avg_acc_except_first": self.avg_acc_except_first,
            "accuracy_curve": [float(v) for v in self.accuracy_curve],
            "separability": sep,
            "confusion_delta": self.confusion_delta,
            "deviation_gap": self.deviation_gap,
            "nme_final_acc": self.nme_final_acc,
            "audit_violations": self.audit_violations,
            "n_phases": self.n_phases,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "preset": self.preset,
        }


def write_report_json(report_dict: dict, path, timestamp: str) -> None:
    payload = dict(report_dict)
    payload["timestamp"] = timestamp
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_rows(report_dict: dict) -> list[tuple[str, int, int, float]]:
    """Flatten a report into (metric, phase, time, value) rows for CSV."""
    rows = []
    for t, v in enumerate(report_dict["accuracy_curve"], start=1):
        rows.append(("deployed_acc", t, t, v))
    for k, row in enumerate(report_dict["separability"], start=1):
        for t, v in enumerate(row, start=1):
            if v is not None:
                rows.append(("separability", k, t, v))
    n = report_dict["n_phases"]
    rows.append(("final_acc", n, n, report_dict["final_acc"]))
    rows.append(("avg_acc_except_first", n, n, report_dict["avg_acc_except_first"]))
    rows.append(("confusion_delta", n, n, report_dict["confusion_delta"]))
    rows.append(("deviation_gap", n, n, report_dict["deviation_gap"]))
    if report_dict.get("nme_final_acc") is not None:
        rows.append(("nme_final_acc", n, n, report_dict["nme_final_acc"]))
    return rows


def write_report_csv(report_dict: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,phase,time,value\n")
        for metric, phase, time, value in report_rows(report_dict):
            fh.write(f"{metric},{phase},{time},{value!r}\n")


def write_representations_csv(encoder: EncoderModel, samples: list[Sample], path) -> None:
    """Dump final representations with labels for external visualization."""
    reps = encoder.encode(feature_matrix(samples))
    labels = labels_of(samples)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,label," + ",".join(f"r{i}" for i in range(reps.shape[1])) + "\n")
        for s, y, row in zip(samples, labels, reps):
            fh.write(f"{s.sample_id},{y}," + ",".join(repr(float(v)) for v in row) + "\n")
