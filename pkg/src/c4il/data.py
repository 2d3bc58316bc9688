"""Datasets, phase streams, augmentation, and audited sample access.

A stream is an ordered list of phase datasets with disjoint class sets and
disjoint sample ids. All randomness is driven by explicit seeds or
generators handed in by the caller; equal seeds give bit-identical streams,
batches and augmentations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class StreamError(ValueError):
    """Invalid phase-stream construction request."""


class DataFormatError(ValueError):
    """Malformed dataset file (bad magic, truncation, count mismatch)."""


class InfeasibleSeparationError(RuntimeError):
    """Class-mean placement failed within the attempt budget."""


class EmptyPoolError(ValueError):
    """A batch was requested from an empty sample pool."""


@dataclass(frozen=True)
class Sample:
    """One labeled example; features are a (d,) vector or (H, W, C) raster."""

    sample_id: int
    label: int
    features: np.ndarray

    @property
    def is_raster(self) -> bool:
        return self.features.ndim == 3

    def flat(self) -> np.ndarray:
        return self.features.reshape(-1)


def feature_matrix(samples) -> np.ndarray:
    """Stack samples into an (n, d) float64 matrix, flattening rasters."""
    return np.stack([s.flat() for s in samples]).astype(np.float64)


def labels_of(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


@dataclass
class CILStream:
    """Ordered phase datasets with disjoint labels and sample ids."""

    phases: list[list[Sample]]
    class_sets: list[list[int]]

    def __post_init__(self):
        seen_classes: set[int] = set()
        seen_ids: set[int] = set()
        for t, (phase, classes) in enumerate(zip(self.phases, self.class_sets)):
            cset = set(classes)
            if cset & seen_classes:
                raise StreamError(f"phase {t}: class sets overlap")
            seen_classes |= cset
            for s in phase:
                if s.sample_id in seen_ids:
                    raise StreamError(f"duplicate sample id {s.sample_id}")
                seen_ids.add(s.sample_id)
                if s.label not in cset:
                    raise StreamError(f"sample {s.sample_id} labeled {s.label} outside phase classes")

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    def classes_through(self, t: int) -> list[int]:
        """All class ids introduced in phases 0..t, in phase order."""
        out: list[int] = []
        for cs in self.class_sets[: t + 1]:
            out.extend(cs)
        return out


def split_stream(samples: list[Sample], n_phases: int, seed: int) -> CILStream:
    """Partition whole classes into n_phases seeded, evenly sized phases."""
    if n_phases < 2:
        raise StreamError("a CIL stream needs at least 2 phases")
    classes = sorted({s.label for s in samples})
    if len(classes) < n_phases:
        raise StreamError(f"{len(classes)} classes cannot fill {n_phases} phases")
    if len(classes) % n_phases != 0:
        raise StreamError(f"{len(classes)} classes not divisible into {n_phases} phases")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5714]))
    order = [classes[i] for i in rng.permutation(len(classes))]
    per = len(classes) // n_phases
    by_class: dict[int, list[Sample]] = {c: [] for c in classes}
    for s in samples:
        by_class[s.label].append(s)
    phases, class_sets = [], []
    for t in range(n_phases):
        chunk = order[t * per : (t + 1) * per]
        pool = [s for c in chunk for s in by_class[c]]
        idx = rng.permutation(len(pool))
        phases.append([pool[i] for i in idx])
        class_sets.append(chunk)
    return CILStream(phases, class_sets)


def single_phase_stream(samples: list[Sample]) -> CILStream:
    """Degenerate one-phase container used by the joint-training baseline."""
    classes = sorted({s.label for s in samples})
    return CILStream([list(samples)], [classes])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Positive-pair augmentation recipe for one data modality.

    Raster path (in order): random resized crop, horizontal flip, color
    jitter (brightness/contrast/saturation/hue), random grayscale. Vector
    path: additive Gaussian noise then random coordinate masking. Sub-steps
    with zero strength/probability are skipped entirely, so an all-zero
    policy is a bitwise identity.
    """

    mode: str = "vector"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    noise_sigma: float = 0.1
    mask_prob: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must lie inside (0, 1], got {self.crop_scale}")
        for name in ("flip_prob", "grayscale_prob", "mask_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")

    @classmethod
    def identity(cls, mode: str) -> "AugmentationPolicy":
        return cls(mode=mode, crop_scale=(1.0, 1.0), flip_prob=0.0, brightness=0.0,
                   contrast=0.0, saturation=0.0, hue=0.0, grayscale_prob=0.0,
                   noise_sigma=0.0, mask_prob=0.0)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _augment_raster(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w, c = img.shape
    lo, hi = policy.crop_scale
    if (lo, hi) != (1.0, 1.0):
        side = np.sqrt(rng.uniform(lo, hi))
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = kernels.bilinear_resize(np.ascontiguousarray(img[y0 : y0 + ch, x0 : x0 + cw]), h, w)
    else:
        img = img.copy()
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        img = img[:, ::-1].copy()
    if policy.brightness > 0:
        img = img * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    if policy.contrast > 0:
        mean = img.mean()
        img = mean + rng.uniform(1 - policy.contrast, 1 + policy.contrast) * (img - mean)
    # saturation/hue act on the color plane; no-ops on single-channel input
    if policy.saturation > 0 and c == 3:
        gray = (img * np.array([0.299, 0.587, 0.114])).sum(axis=-1, keepdims=True)
        img = gray + rng.uniform(1 - policy.saturation, 1 + policy.saturation) * (img - gray)
    if policy.hue > 0 and c == 3:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-policy.hue, policy.hue)) % 1.0
        img = _hsv_to_rgb(hsv)
    if policy.grayscale_prob > 0 and rng.random() < policy.grayscale_prob:
        weights = np.array([0.299, 0.587, 0.114]) if c == 3 else np.full(c, 1.0 / c)
        img = np.repeat((img * weights).sum(axis=-1, keepdims=True), c, axis=-1)
    if policy.brightness > 0 or policy.contrast > 0 or policy.saturation > 0 or policy.hue > 0:
        img = np.clip(img, 0.0, 1.0)
    return img


def _augment_vector(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    out = x.copy()
    if policy.noise_sigma > 0:
        out = out + rng.normal(0.0, policy.noise_sigma, size=out.shape)
    if policy.mask_prob > 0:
        out = np.where(rng.random(out.shape) < policy.mask_prob, 0.0, out)
    return out


def augment(sample: Sample, policy: AugmentationPolicy, rng: np.random.Generator) -> Sample:
    """One random view of a sample; the label is always preserved."""
    if policy.mode == "raster":
        if not sample.is_raster:
            raise ValueError("raster policy applied to vector sample")
        return replace(sample, features=_augment_raster(sample.features, policy, rng))
    if policy.mode == "vector":
        if sample.is_raster:
            raise ValueError("vector policy applied to raster sample")
        return replace(sample, features=_augment_vector(sample.features, policy, rng))
    raise ValueError(f"unknown augmentation mode {policy.mode!r}")


# ---------------------------------------------------------------------------
# Audited sample access
# ---------------------------------------------------------------------------

class AccessAudit:
    """Records every training-time sample read, tagged with its phase."""

    def __init__(self):
        self.reads: list[tuple[int, int]] = []
        self.allowed: dict[int, set[int]] = {}

    def register_phase(self, phase: int, allowed_ids) -> None:
        self.allowed[phase] = set(allowed_ids)

    def record(self, phase: int, sample_id: int) -> None:
        self.reads.append((phase, sample_id))

    def violations(self) -> list[tuple[int, int]]:
        return [(p, sid) for p, sid in self.reads if sid not in self.allowed.get(p, set())]


class AuditedPool:
    """Access-audited view of one phase's training pool D^(t) plus memory."""

    def __init__(self, samples: list[Sample], phase: int, audit: AccessAudit):
        self._samples = list(samples)
        self._phase = phase
        self._audit = audit
        audit.register_phase(phase, [s.sample_id for s in self._samples])

    def __len__(self) -> int:
        return len(self._samples)

    def get(self, i: int) -> Sample:
        s = self._samples[i]
        self._audit.record(self._phase, s.sample_id)
        return s

    def all_samples(self) -> list[Sample]:
        return [self.get(i) for i in range(len(self))]

    @property
    def labels(self) -> np.ndarray:
        return labels_of(self._samples)


def build_training_batch(pool, batch_size: int, policy: AugmentationPolicy | None,
                         rng: np.random.Generator) -> tuple[list[Sample], list[Sample]]:
    """Uniformly draw a batch (with replacement) plus one augmented twin each.

    `pool` is an AuditedPool or any indexable with get()/__len__. With
    policy=None the twin list is empty (plain-classification training).
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if len(pool) == 0:
        raise EmptyPoolError("cannot draw a batch from an empty pool")
    idx = rng.integers(0, len(pool), size=batch_size)
    originals = [pool.get(int(i)) for i in idx]
    if policy is None:
        return originals, []
    twins = [augment(s, policy, rng) for s in originals]
    return originals, twins


# ---------------------------------------------------------------------------
# Dataset generation and I/O
# ---------------------------------------------------------------------------

def gen_gaussian_mixture(classes: int, dim: int, per_class: int, separation: float,
                         seed: int) -> list[Sample]:
    """Isotropic Gaussian blobs with pairwise mean distance >= separation.

    Within-class sigma is 1, so `separation` is in units of sigma. Mean
    placement is rejection sampling in a cube scaled with the class count;
    more than 1000 draws raises InfeasibleSeparationError.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6d17]))
    half = separation * max(1.0, classes ** (1.0 / dim))
    means: list[np.ndarray] = []
    attempts = 0
    while len(means) < classes:
        attempts += 1
        if attempts > 1000:
            raise InfeasibleSeparationError(
                f"could not place {classes} means {separation} sigma apart in dim {dim}")
        cand = rng.uniform(-half, half, size=dim)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
    samples: list[Sample] = []
    sid = 0
    for c, mu in enumerate(means):
        pts = rng.normal(0.0, 1.0, size=(per_class, dim)) + mu
        for row in pts:
            samples.append(Sample(sid, c, row))
            sid += 1
    return samples


def save_csv(samples: list[Sample], path) -> None:
    """Write vector samples as `sample_id,label,f0..f{d-1}` rows."""
    if not samples:
        raise ValueError("no samples to write")
    if samples[0].is_raster:
        raise ValueError("CSV export is defined for vector samples only")
    d = samples[0].features.size
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for s in samples:
            fh.write(f"{s.sample_id},{s.label}," + ",".join(repr(float(v)) for v in s.features) + "\n")


def load_csv(path) -> list[Sample]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["sample_id", "label"]:
            raise DataFormatError(f"{path}: unexpected CSV header")
        samples = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise DataFormatError(f"{path}: row width {len(parts)} != header width {len(header)}")
            samples.append(Sample(int(parts[0]), int(parts[1]),
                                  np.array([float(v) for v in parts[2:]])))
    return samples


def _read_be_u32(buf: bytes, off: int) -> int:
    return int.from_bytes(buf[off : off + 4], "big")


def load_idx(images_path, labels_path) -> list[Sample]:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    if len(ibuf) < 16:
        raise DataFormatError(f"{images_path}: truncated header")
    if _read_be_u32(ibuf, 0) != IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic {_read_be_u32(ibuf, 0):#010x}")
    n, h, w = (_read_be_u32(ibuf, o) for o in (4, 8, 12))
    if len(ibuf) != 16 + n * h * w:
        raise DataFormatError(f"{images_path}: expected {16 + n * h * w} bytes, got {len(ibuf)}")
    if len(lbuf) < 8:
        raise DataFormatError(f"{labels_path}: truncated header")
    if _read_be_u32(lbuf, 0) != LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic {_read_be_u32(lbuf, 0):#010x}")
    n_labels = _read_be_u32(lbuf, 4)
    if len(lbuf) != 8 + n_labels:
        raise DataFormatError(f"{labels_path}: expected {8 + n_labels} bytes, got {len(lbuf)}")
    if n != n_labels:
        raise DataFormatError(f"image count {n} != label count {n_labels}")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, h, w, 1)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8)
    return [Sample(i, int(labels[i]), pixels[i].astype(np.float64) / 255.0) for i in range(n)]
