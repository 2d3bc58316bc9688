"""Encoder network and per-phase linear classifier heads.

The encoder is shared across phases; classification heads are appended one
per phase and never resized. `ModelSnapshot` deep-copies both at a phase
boundary and is the frozen teacher for the two distillation losses.
"""

from __future__ import annotations

import copy
import json

import numpy as np

from . import numerics as nx

CHECKPOINT_VERSION = 1


class ProtocolError(RuntimeError):
    """An operation was called outside the phase protocol that permits it."""


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderModel:
    """MLP encoder for vector data, or a tiny two-conv CNN for rasters.

    Parameters live in a name -> array dict so the optimizer and the tape
    can address them uniformly. Forward always runs through the tape; the
    inference path just uses non-differentiable leaves, so both paths are
    bit-identical.
    """

    def __init__(self, kind: str, params: dict[str, np.ndarray], meta: dict):
        self.kind = kind
        self.params = params
        self.meta = meta

    # -- constructors -------------------------------------------------------

    @classmethod
    def mlp(cls, input_dim: int, hidden: tuple[int, ...], rep_dim: int, rng: np.random.Generator) -> "EncoderModel":
        dims = [input_dim, *hidden, rep_dim]
        params = {}
        for i in range(len(dims) - 1):
            params[f"enc.W{i}"] = _kaiming_uniform(rng, dims[i], (dims[i], dims[i + 1]))
            params[f"enc.b{i}"] = np.zeros((1, dims[i + 1]))
        return cls("mlp", params, {"dims": dims})

    @classmethod
    def cnn(cls, raster_shape: tuple[int, int, int], channels: tuple[int, int], rep_dim: int,
            rng: np.random.Generator, kernel: int = 3) -> "EncoderModel":
        h, w, c = raster_shape
        f1, f2 = channels
        stages = []
        ch_in = c
        hh, ww = h, w
        for f_out in (f1, f2):
            if hh < kernel or ww < kernel:
                raise ValueError(f"raster {h}x{w} too small for two {kernel}x{kernel} convolutions")
            hh, ww = hh - kernel + 1, ww - kernel + 1
            pooled = hh >= 2 and ww >= 2
            stages.append({"in": ch_in, "out": f_out, "pool": pooled})
            if pooled:
                hh, ww = hh // 2, ww // 2
            ch_in = f_out
        params = {}
        for i, st in enumerate(stages):
            fan_in = kernel * kernel * st["in"]
            params[f"enc.convW{i}"] = _kaiming_uniform(rng, fan_in, (fan_in, st["out"]))
            params[f"enc.convb{i}"] = np.zeros((1, st["out"]))
        flat = hh * ww * f2
        params["enc.W_out"] = _kaiming_uniform(rng, flat, (flat, rep_dim))
        params["enc.b_out"] = np.zeros((1, rep_dim))
        meta = {"raster_shape": list(raster_shape), "channels": [f1, f2], "kernel": kernel,
                "stages": stages, "flat": flat, "rep_dim": rep_dim}
        return cls("cnn", params, meta)

    # -- dimensions ---------------------------------------------------------

    @property
    def input_dim(self) -> int:
        if self.kind == "mlp":
            return self.meta["dims"][0]
        h, w, c = self.meta["raster_shape"]
        return h * w * c

    @property
    def rep_dim(self) -> int:
        if self.kind == "mlp":
            return self.meta["dims"][-1]
        return self.meta["rep_dim"]

    # -- forward ------------------------------------------------------------

    def bind(self, tape: nx.Tape, trainable: bool = True) -> dict[str, nx.Tensor]:
        return {name: tape.leaf(arr, requires_grad=trainable) for name, arr in self.params.items()}

    def forward(self, tape: nx.Tape, x: np.ndarray, bind: dict[str, nx.Tensor]) -> nx.Tensor:
        x = nx.as_matrix(x)
        if x.shape[1] != self.input_dim:
            raise nx.ShapeError(f"encoder expects width {self.input_dim}, got {x.shape[1]}")
        t = tape.constant(x)
        if self.kind == "mlp":
            n_layers = len(self.meta["dims"]) - 1
            for i in range(n_layers):
                t = nx.add(nx.matmul(t, bind[f"enc.W{i}"]), bind[f"enc.b{i}"])
                if i < n_layers - 1:
                    t = nx.relu(t)
            return t
        return self._forward_cnn(tape, t, x.shape[0], bind)

    def _forward_cnn(self, tape: nx.Tape, t: nx.Tensor, n: int, bind: dict[str, nx.Tensor]) -> nx.Tensor:
        h, w, c = self.meta["raster_shape"]
        k = self.meta["kernel"]
        hh, ww, ch = h, w, c
        for i, st in enumerate(self.meta["stages"]):
            t = nx.unfold_patches(t, n, hh, ww, ch, k, k)
            t = nx.relu(nx.add(nx.matmul(t, bind[f"enc.convW{i}"]), bind[f"enc.convb{i}"]))
            hh, ww, ch = hh - k + 1, ww - k + 1, st["out"]
            if st["pool"]:
                t = nx.mean_pool_2x2(t, n, hh, ww)
                hh, ww = hh // 2, ww // 2
            t = nx.reshape(t, (n, hh * ww * ch))
        return nx.add(nx.matmul(t, bind["enc.W_out"]), bind["enc.b_out"])

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Inference-only representations (no gradient bookkeeping kept)."""
        tape = nx.Tape()
        return self.forward(tape, x, self.bind(tape, trainable=False)).value

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.kind, {k: v.copy() for k, v in self.params.items()},
                            copy.deepcopy(self.meta))


class ClassifierHeads:
    """Ordered per-phase linear heads; concatenation covers all seen classes."""

    def __init__(self, rep_dim: int):
        self.rep_dim = rep_dim
        self.heads: list[np.ndarray] = []
        self.head_classes: list[list[int]] = []

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def all_classes(self) -> list[int]:
        return [c for cs in self.head_classes for c in cs]

    @property
    def n_classes(self) -> int:
        return sum(len(cs) for cs in self.head_classes)

    def column_of(self, class_id: int) -> int:
        col = 0
        for cs in self.head_classes:
            for c in cs:
                if c == class_id:
                    return col
                col += 1
        raise nx.LabelError(f"class {class_id} not seen by any head")

    def columns_for(self, labels) -> np.ndarray:
        lut = {c: i for i, c in enumerate(self.all_classes)}
        try:
            return np.array([lut[int(y)] for y in np.atleast_1d(labels)], dtype=np.int64)
        except KeyError as exc:
            raise nx.LabelError(f"label {exc.args[0]} outside seen classes") from None

    def extend(self, new_classes: list[int], rng: np.random.Generator) -> None:
        """Append one head for a new phase; old heads are untouched."""
        if len(new_classes) == 0:
            raise ValueError("extend_heads: zero new classes")
        seen = set(self.all_classes)
        dup = seen.intersection(new_classes)
        if dup:
            raise ValueError(f"classes already have heads: {sorted(dup)}")
        bound = 1.0 / np.sqrt(self.rep_dim)
        self.heads.append(rng.uniform(-bound, bound, size=(self.rep_dim, len(new_classes))))
        self.head_classes.append([int(c) for c in new_classes])

    def weight_matrix(self, upto: int | None = None) -> np.ndarray:
        """Concatenated head weights for heads[0:upto] (all by default)."""
        take = self.heads[:upto] if upto is not None else self.heads
        if not take:
            raise ProtocolError("no classifier heads exist yet")
        return np.concatenate(take, axis=1)

    def bind(self, tape: nx.Tape, trainable: bool = True) -> dict[str, nx.Tensor]:
        return {f"head.{i}": tape.leaf(h, requires_grad=trainable) for i, h in enumerate(self.heads)}

    def classify(self, reps: np.ndarray, scope: str = "all-seen") -> tuple[np.ndarray, list[int]]:
        """Row-stochastic probabilities over the scoped class set.

        scope "current-phase" uses only the newest head; "all-seen" uses the
        concatenation of every head.
        """
        if not self.heads:
            raise ProtocolError("classify called before any head exists")
        if scope == "current-phase":
            w = self.heads[-1]
            classes = list(self.head_classes[-1])
        elif scope == "all-seen":
            w = self.weight_matrix()
            classes = self.all_classes
        else:
            raise ValueError(f"unknown scope {scope!r}")
        tape = nx.Tape()
        probs = nx.softmax(nx.matmul(tape.constant(reps), tape.constant(w))).value
        return probs, classes

    def copy(self) -> "ClassifierHeads":
        dup = ClassifierHeads(self.rep_dim)
        dup.heads = [h.copy() for h in self.heads]
        dup.head_classes = [list(cs) for cs in self.head_classes]
        return dup


class ModelSnapshot:
    """Frozen end-of-phase copy of encoder + heads; never trained again."""

    def __init__(self, model: EncoderModel, heads: ClassifierHeads):
        self.model = model.copy()
        self.heads = heads.copy()

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.model.encode(x)

    def normalized_reps(self, x: np.ndarray) -> np.ndarray:
        reps = self.encode(x)
        norms = np.linalg.norm(reps, axis=1, keepdims=True)
        if np.any(norms <= nx.NORM_EPS):
            raise nx.DegenerateVectorError("snapshot produced a zero representation")
        return reps / norms

    def soft_labels(self, x: np.ndarray) -> np.ndarray:
        """Probability distribution over this snapshot's own (old) classes."""
        probs, _ = self.heads.classify(self.encode(x), scope="all-seen")
        return probs


def snapshot(model: EncoderModel, heads: ClassifierHeads) -> ModelSnapshot:
    return ModelSnapshot(model, heads)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: EncoderModel, heads: ClassifierHeads, phase_count: int,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Versioned npz container; load(save(x)) round-trips bit-identically."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "model_meta": model.meta,
        "param_names": sorted(model.params),
        "head_classes": heads.head_classes,
        "rep_dim": heads.rep_dim,
        "phase_count": phase_count,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in model.params.items()}
    arrays.update({f"head:{i}": h for i, h in enumerate(heads.heads)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[EncoderModel, ClassifierHeads, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {k: data[f"param:{k}"] for k in meta["param_names"]}
        model = EncoderModel(meta["kind"], params, meta["model_meta"])
        heads = ClassifierHeads(meta["rep_dim"])
        heads.head_classes = [list(cs) for cs in meta["head_classes"]]
        heads.heads = [data[f"head:{i}"] for i in range(len(meta["head_classes"]))]
    return model, heads, meta
