"""Experiment configuration: flat `section.key = value` text files.

The format is deliberately diff-friendly: one dotted key per line, `#`
comments, no nesting. Unknown keys and type errors are reported with the
offending line number. A config's identity is the sha256 over its fully
defaulted canonical form (output directory excluded), which every artifact
embeds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

PRESETS = ("finetune", "lwf", "c4il-nomem", "c4il-mem", "joint")
ABLATIONS = ("none", "da", "rld", "lg")


class ConfigError(ValueError):
    """Invalid configuration; message carries file/line context."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully determined together with its seed."""

    dataset_kind: str = "gaussian"          # gaussian | csv | idx
    dataset_classes: int = 10
    dataset_dim: int = 8
    dataset_train_per_class: int = 120
    dataset_eval_per_class: int = 60
    dataset_separation: float = 4.0
    dataset_csv_path: str = ""
    dataset_images_path: str = ""
    dataset_labels_path: str = ""
    dataset_eval_fraction: float = 0.25     # file-based datasets only

    stream_phases: int = 5

    method_preset: str = "c4il-mem"
    method_ablate: str = "none"

    loss_beta1: float = 1.0
    loss_lambda: float = 0.1
    loss_kappa1: float = 1.0
    loss_eta1: float = 1.0

    memory_capacity: int = 2000

    model_hidden: tuple[int, ...] = (64, 64)
    model_rep_dim: int = 16
    model_cnn_channels: tuple[int, ...] = (8, 16)

    optim_lr: float = 0.01
    optim_momentum: float = 0.9
    optim_decay_every: int = 0
    optim_decay_factor: float = 0.1

    train_epochs: int = 30
    train_batch_size: int = 32

    augment_noise_sigma: float = 0.0        # 0 -> 0.1 * feature std
    augment_mask_prob: float = 0.1

    eval_nme: bool = True

    seed: int = 42
    out_dir: str = ""

    def validate(self) -> None:
        if self.method_preset not in PRESETS:
            raise ConfigError(f"method.preset must be one of {PRESETS}, got {self.method_preset!r}")
        if self.method_ablate not in ABLATIONS:
            raise ConfigError(f"method.ablate must be one of {ABLATIONS}, got {self.method_ablate!r}")
        if self.dataset_kind not in ("gaussian", "csv", "idx"):
            raise ConfigError(f"dataset.kind must be gaussian, csv or idx, got {self.dataset_kind!r}")
        if self.method_ablate != "none" and "c4il" not in self.method_preset:
            raise ConfigError("ablations apply to the c4il presets only")
        if self.train_batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.stream_phases < 1:
            raise ConfigError("stream.phases must be >= 1")


# key in the file -> (dataclass field, parser)
_SCHEMA: dict[str, tuple[str, callable]] = {
    "dataset.kind": ("dataset_kind", str),
    "dataset.classes": ("dataset_classes", int),
    "dataset.dim": ("dataset_dim", int),
    "dataset.train_per_class": ("dataset_train_per_class", int),
    "dataset.eval_per_class": ("dataset_eval_per_class", int),
    "dataset.separation": ("dataset_separation", float),
    "dataset.csv_path": ("dataset_csv_path", str),
    "dataset.images_path": ("dataset_images_path", str),
    "dataset.labels_path": ("dataset_labels_path", str),
    "dataset.eval_fraction": ("dataset_eval_fraction", float),
    "stream.phases": ("stream_phases", int),
    "method.preset": ("method_preset", str),
    "method.ablate": ("method_ablate", str),
    "loss.beta1": ("loss_beta1", float),
    "loss.lambda": ("loss_lambda", float),
    "loss.kappa1": ("loss_kappa1", float),
    "loss.eta1": ("loss_eta1", float),
    "memory.capacity": ("memory_capacity", int),
    "model.hidden": ("model_hidden", _parse_int_list),
    "model.rep_dim": ("model_rep_dim", int),
    "model.cnn_channels": ("model_cnn_channels", _parse_int_list),
    "optim.lr": ("optim_lr", float),
    "optim.momentum": ("optim_momentum", float),
    "optim.decay_every": ("optim_decay_every", int),
    "optim.decay_factor": ("optim_decay_factor", float),
    "train.epochs": ("train_epochs", int),
    "train.batch_size": ("train_batch_size", int),
    "augment.noise_sigma": ("augment_noise_sigma", float),
    "augment.mask_prob": ("augment_mask_prob", float),
    "eval.nme": ("eval_nme", _parse_bool),
    "seed": ("seed", int),
    "out_dir": ("out_dir", str),
}

_FIELD_TO_KEY = {f: k for k, (f, _) in _SCHEMA.items()}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        field_name, parser = _SCHEMA[key]
        try:
            values[field_name] = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def canonical_text(cfg: ExperimentConfig) -> str:
    """Fully defaulted `key = value` serialization, sorted by key."""
    lines = []
    for f in fields(cfg):
        key = _FIELD_TO_KEY[f.name]
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical form, ignoring where output is written."""
    text = canonical_text(replace(cfg, out_dir=""))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_text(cfg))


# ---------------------------------------------------------------------------
# Preset expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodPlan:
    """Fully expanded method switches derived from preset + ablation."""

    use_concentration: bool
    use_kd: bool
    use_rld: bool
    use_memory: bool
    label_guided: bool
    identity_augmentation: bool
    n_phases: int


def expand_preset(cfg: ExperimentConfig) -> MethodPlan:
    preset = cfg.method_preset
    plan = {
        "finetune": MethodPlan(False, False, False, False, True, False, cfg.stream_phases),
        "lwf": MethodPlan(False, True, False, False, True, False, cfg.stream_phases),
        "c4il-nomem": MethodPlan(True, True, True, False, True, False, cfg.stream_phases),
        "c4il-mem": MethodPlan(True, True, True, True, True, False, cfg.stream_phases),
        "joint": MethodPlan(False, False, False, False, True, False, 1),
    }[preset]
    if cfg.method_ablate == "da":
        plan = replace(plan, identity_augmentation=True)
    elif cfg.method_ablate == "rld":
        plan = replace(plan, use_rld=False)
    elif cfg.method_ablate == "lg":
        plan = replace(plan, label_guided=False)
    return plan


def sweep_grid(cfg: ExperimentConfig, grid: dict[str, list[float]]) -> list[ExperimentConfig]:
    """Expand a grid over the loss weights into concrete configs."""
    allowed = {"loss.beta1": "loss_beta1", "loss.lambda": "loss_lambda",
               "loss.kappa1": "loss_kappa1", "loss.eta1": "loss_eta1"}
    for key in grid:
        if key not in allowed:
            raise ConfigError(f"sweep grid key must be one of {sorted(allowed)}, got {key!r}")
    configs = [cfg]
    for key, values in sorted(grid.items()):
        configs = [replace(c, **{allowed[key]: float(v)}) for c in configs for v in values]
    return configs


def parse_grid_file(path) -> dict[str, list[float]]:
    grid = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = v1,v2,...'")
            key, _, val = line.partition("=")
            try:
                grid[key.strip()] = [float(v) for v in val.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    if not grid:
        raise ConfigError(f"{path}: empty grid")
    return grid
