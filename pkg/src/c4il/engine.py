"""Phase-wise training engine and full experiment runner.

`train_phase` runs seeded epochs of the combined objective + momentum SGD
over an access-audited pool; `run_experiment` executes the whole protocol
(stream construction, per-phase training, memory updates, checkpoints) and
produces the forgetting report plus all on-disk artifacts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import numerics as nx
from .config import ExperimentConfig, MethodPlan, config_hash, expand_preset, save_config
from .data import (AccessAudit, AuditedPool, AugmentationPolicy, CILStream, Sample,
                   build_training_batch, feature_matrix, gen_gaussian_mixture, labels_of,
                   load_csv, load_idx, single_phase_stream, split_stream)
from .losses import LossWeights, PhaseContext, combined_objective
from .memory import MemoryBank, update_memory
from .model import ClassifierHeads, EncoderModel, ModelSnapshot, save_checkpoint

_TAG_DATA, _TAG_SPLIT, _TAG_MODEL, _TAG_HEAD, _TAG_PHASE, _TAG_MEMORY = range(101, 107)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def _derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class EpochLog:
    phase: int
    epoch: int
    l_ce: float
    l_con: float
    l_kd: float
    l_rld: float
    total: float
    train_acc: float


def train_phase(
    ctx: PhaseContext,
    pool: AuditedPool,
    epochs: int,
    batch_size: int,
    optimizer: nx.SGD,
    rng: np.random.Generator,
    policy: AugmentationPolicy | None,
) -> list[EpochLog]:
    """Seeded epochs of combined loss + SGD; mutates ctx.model / ctx.heads.

    One epoch draws ceil(|pool|/batch) uniform batches through the audited
    pool. With zero epochs the parameters are untouched bit-for-bit.
    """
    logs: list[EpochLog] = []
    steps = max(1, math.ceil(len(pool) / batch_size))
    for epoch in range(epochs):
        sums = {"l_ce": 0.0, "l_con": 0.0, "l_kd": 0.0, "l_rld": 0.0, "total": 0.0}
        for _ in range(steps):
            originals, twins = build_training_batch(
                pool, batch_size, policy if ctx.beta > 0 else None, rng)
            x = feature_matrix(originals)
            y = labels_of(originals)
            x_twin = feature_matrix(twins) if twins else None

            tape = nx.Tape()
            total, parts, bind = combined_objective(tape, ctx, x, y, x_twin)
            tape.backward(total)

            params = dict(ctx.model.params)
            params.update({f"head.{i}": h for i, h in enumerate(ctx.heads.heads)})
            grads = {k: t.grad for k, t in bind.items() if t.grad is not None}
            new_params = optimizer.step(params, grads, epoch)
            for name in ctx.model.params:
                ctx.model.params[name] = new_params[name]
            for i in range(ctx.heads.n_heads):
                ctx.heads.heads[i] = new_params[f"head.{i}"]
            for k in sums:
                sums[k] += parts[k]

        acc = ev.deployed_accuracy(ctx.model, ctx.heads, pool.all_samples())
        logs.append(EpochLog(ctx.t, epoch + 1, sums["l_ce"] / steps, sums["l_con"] / steps,
                             sums["l_kd"] / steps, sums["l_rld"] / steps,
                             sums["total"] / steps, acc))
    return logs


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def _load_dataset(cfg: ExperimentConfig) -> list[Sample]:
    if cfg.dataset_kind == "gaussian":
        per_class = cfg.dataset_train_per_class + cfg.dataset_eval_per_class
        return gen_gaussian_mixture(cfg.dataset_classes, cfg.dataset_dim, per_class,
                                    cfg.dataset_separation, _derived_seed(cfg.seed, _TAG_DATA))
    if cfg.dataset_kind == "csv":
        return load_csv(cfg.dataset_csv_path)
    if cfg.dataset_kind == "idx":
        return load_idx(cfg.dataset_images_path, cfg.dataset_labels_path)
    raise ValueError(f"unknown dataset kind {cfg.dataset_kind!r}")


def _train_eval_split(cfg: ExperimentConfig, samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Per-class held-out evaluation split, disjoint from the train stream."""
    rng = _rng(cfg.seed, _TAG_SPLIT)
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    train, evalu = [], []
    for c in sorted(by_class):
        pool = by_class[c]
        idx = rng.permutation(len(pool))
        if cfg.dataset_kind == "gaussian":
            n_eval = cfg.dataset_eval_per_class
        else:
            n_eval = max(1, int(round(cfg.dataset_eval_fraction * len(pool))))
        if n_eval >= len(pool):
            raise ValueError(f"class {c}: evaluation split would consume all {len(pool)} samples")
        evalu.extend(pool[i] for i in idx[:n_eval])
        train.extend(pool[i] for i in idx[n_eval:])
    return train, evalu


def _make_policy(cfg: ExperimentConfig, plan: MethodPlan, train: list[Sample]) -> AugmentationPolicy:
    raster = train[0].is_raster
    mode = "raster" if raster else "vector"
    if plan.identity_augmentation:
        return AugmentationPolicy.identity(mode)
    if raster:
        return AugmentationPolicy(mode="raster")
    sigma = cfg.augment_noise_sigma
    if sigma <= 0:
        sigma = 0.1 * float(np.std(feature_matrix(train)))
    return AugmentationPolicy(mode="vector", noise_sigma=sigma, mask_prob=cfg.augment_mask_prob)


def _make_model(cfg: ExperimentConfig, train: list[Sample]) -> EncoderModel:
    rng = _rng(cfg.seed, _TAG_MODEL)
    first = train[0]
    if first.is_raster:
        ch = tuple(cfg.model_cnn_channels)
        if len(ch) != 2:
            raise ValueError("model.cnn_channels must list exactly two channel counts")
        return EncoderModel.cnn(first.features.shape, ch, cfg.model_rep_dim, rng)
    return EncoderModel.mlp(first.features.size, tuple(cfg.model_hidden), cfg.model_rep_dim, rng)


# ---------------------------------------------------------------------------
# Full experiment
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   write_artifacts: bool = True) -> dict:
    """Run the complete incremental protocol and return the report dict."""
    cfg.validate()
    plan = expand_preset(cfg)
    chash = config_hash(cfg)

    dataset = _load_dataset(cfg)
    train, eval_pool = _train_eval_split(cfg, dataset)

    if plan.n_phases == 1:
        stream = single_phase_stream(train)
    else:
        stream = split_stream(train, plan.n_phases, _derived_seed(cfg.seed, _TAG_SPLIT))

    policy = _make_policy(cfg, plan, train)
    model = _make_model(cfg, train)
    heads = ClassifierHeads(cfg.model_rep_dim)
    weights = LossWeights(cfg.loss_beta1, cfg.loss_lambda, cfg.loss_kappa1,
                          cfg.loss_eta1 if plan.use_rld else 0.0)
    bank = MemoryBank(cfg.memory_capacity if plan.use_memory else 0)
    audit = AccessAudit()
    optimizer = nx.SGD(cfg.optim_lr, cfg.optim_momentum, cfg.optim_decay_every,
                       cfg.optim_decay_factor)

    out = Path(out_dir) if out_dir else None
    if out is not None and write_artifacts:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    checkpoints: list[tuple[EncoderModel, ClassifierHeads]] = []
    epoch_logs: list[EpochLog] = []
    for t in range(1, stream.n_phases + 1):
        snap = ModelSnapshot(model, heads) if t >= 2 else None
        heads.extend(stream.class_sets[t - 1], _rng(cfg.seed, _TAG_HEAD, t))

        phase_data = stream.phases[t - 1]
        pool_samples = phase_data + (bank.samples() if plan.use_memory else [])
        pool = AuditedPool(pool_samples, t, audit)

        n_seen = heads.n_classes
        n_old = n_seen - len(stream.class_sets[t - 1])
        beta = weights.beta_at(t) if plan.use_concentration else 0.0
        kappa = weights.kappa_at(t, n_old, n_seen) if plan.use_kd else 0.0
        eta = weights.eta_at(t) if plan.use_rld else 0.0
        ctx = PhaseContext(t, model, heads, snap, beta, kappa, eta, plan.label_guided)

        epoch_logs.extend(train_phase(ctx, pool, cfg.train_epochs, cfg.train_batch_size,
                                      optimizer, _rng(cfg.seed, _TAG_PHASE, t), policy))

        if plan.use_memory:
            bank = update_memory(bank, phase_data, _derived_seed(cfg.seed, _TAG_MEMORY, t))
        checkpoints.append((model.copy(), heads.copy()))
        if out is not None and write_artifacts:
            save_checkpoint(out / "checkpoints" / f"phase_{t}.npz", model, heads, t,
                            extra={"config_hash": chash, "seed": cfg.seed})

    # evaluation pools follow the stream's class-to-phase assignment
    eval_by_phase = [[s for s in eval_pool if s.label in set(cs)] for cs in stream.class_sets]
    eval_all = [s for pool in eval_by_phase for s in pool]

    final_acc, avg_rest, curve = ev.cil_accuracies(checkpoints, eval_by_phase)
    encoders = [m for m, _ in checkpoints]
    separability = ev.intra_phase_curve(encoders, eval_by_phase, cfg.seed)
    conf_delta = ev.confusion_delta(model, eval_by_phase, cfg.seed)
    gap = ev.deviation_gap(model, heads, eval_all, cfg.seed)
    nme_acc = None
    if plan.use_memory and cfg.eval_nme and len(bank) > 0:
        pred = ev.nme_classify(model, bank, eval_all)
        nme_acc = float(np.mean(pred == labels_of(eval_all)))

    report = ev.ForgettingReport(
        final_acc=final_acc,
        avg_acc_except_first=avg_rest,
        accuracy_curve=curve,
        separability=separability,
        confusion_delta=conf_delta,
        deviation_gap=gap,
        nme_final_acc=nme_acc,
        audit_violations=len(audit.violations()),
        n_phases=stream.n_phases,
        config_hash=chash,
        seed=cfg.seed,
        preset=cfg.method_preset + ("" if cfg.method_ablate == "none" else f"-{cfg.method_ablate}"),
    ).to_dict()

    if out is not None and write_artifacts:
        stamp = datetime.now(timezone.utc).isoformat()
        ev.write_report_json(report, out / "report.json", timestamp=stamp)
        ev.write_report_csv(report, out / "report.csv")
        ev.write_representations_csv(model, eval_all, out / "representations.csv")
        save_config(cfg, out / "config.cfg")
        with open(out / "phase_log.csv", "w", encoding="utf-8") as fh:
            fh.write("phase,epoch,l_ce,l_con,l_kd,l_rld,total,train_acc\n")
            for log in epoch_logs:
                fh.write(f"{log.phase},{log.epoch},{log.l_ce!r},{log.l_con!r},"
                         f"{log.l_kd!r},{log.l_rld!r},{log.total!r},{log.train_acc!r}\n")
    return report
