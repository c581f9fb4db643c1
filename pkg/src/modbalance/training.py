"""Training and evaluation loops wiring the network, distillation, and the
training-dynamics controller together.

Per optimizer step: forward (encode, fuse per level, both decoders), task
losses (deep-supervised fusion loss + per-modality uni-modal losses),
distillation losses and their per-modality gaps, controller update (gap EMA,
counteractive weights), weighted uni-modal loss, total objective, backward,
encoder gradient scaling, optimizer step. Everything is seeded and the
sample order is a pure function of (seed, epoch), so runs are reproducible
and checkpoints resume bit-for-bit.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.optim import AdamW

from .corpus import read_corpus
from .distill import Distiller, majority_pool_labels
from .losses import LossBreakdown, deep_supervision_loss, per_modality_seg_losses
from .metrics import (
    MetricsReport,
    aggregate_combination,
    modality_combinations,
    per_class_metrics,
)
from .monitor import GapTracker, RebalanceDecision, scale_gradients
from .network import MultiModalSegNet, NetConfig
from .scenes import ModalitySample

CHECKPOINT_VERSION = 1
THREADS_ENV = "MODBALANCE_THREADS"


def _pin_threads() -> None:
    # Desk-scale tensors lose to threading overhead; one thread wins here.
    torch.set_num_threads(int(os.environ.get(THREADS_ENV, "1")))


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component goes non-finite; names the component."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    corpus: str = ""
    net: NetConfig = field(default_factory=NetConfig)
    lr: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 1
    lambdas: Tuple[float, float, float, float] = (2.0, 1.0, 0.5, 0.5)
    alpha1_init: float = 0.6
    tau: Tuple[float, ...] = ()  # empty -> 1.0 per modality
    use_dmaf: bool = True
    use_distill: bool = True
    use_dtm: bool = True
    seed: int = 0
    out_dir: str = "run"
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in [0, 1)")

    def taus(self) -> Tuple[float, ...]:
        if self.tau:
            if len(self.tau) != self.net.n_modalities:
                raise ValueError("tau must list one temperature per modality")
            return tuple(float(t) for t in self.tau)
        return tuple(1.0 for _ in range(self.net.n_modalities))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        d["lambdas"] = list(self.lambdas)
        d["tau"] = list(self.tau)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["net"] = NetConfig.from_dict(d["net"])
        d["lambdas"] = tuple(d["lambdas"])
        d["tau"] = tuple(d.get("tau", ()))
        return cls(**d)


def runlog_columns(n_modalities: int) -> List[str]:
    cols = [
        "step",
        "epoch",
        "sample_id",
        "loss_total",
        "loss_fuse",
        "loss_sep",
        "loss_rel",
        "loss_proto",
        "alpha1",
        "alpha2",
    ]
    for m in range(n_modalities):
        cols += [
            f"w_m{m}",
            f"gamma_m{m}",
            f"sim_m{m}",
            f"damped_m{m}",
            f"ema_rel_m{m}",
            f"ema_proto_m{m}",
            f"gap_total_m{m}",
        ]
    return cols


@dataclass
class TrainResult:
    net: MultiModalSegNet
    distiller: Optional[Distiller]
    tracker: Optional[GapTracker]
    checkpoint_path: str
    runlog_path: str
    steps: int


def _to_tensors(sample: ModalitySample, dtype: torch.dtype):
    images = torch.from_numpy(np.ascontiguousarray(sample.images)).to(dtype)
    label = torch.from_numpy(np.ascontiguousarray(sample.label)).long()
    presence = torch.from_numpy(np.ascontiguousarray(sample.presence)).bool()
    return images, label, presence


def _check_finite(value: torch.Tensor, component: str) -> None:
    if not bool(torch.isfinite(value)):
        raise TrainingDivergedError(f"non-finite loss component: {component}")


def split_indices(n: int, val_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Deterministic train/validation split of sample indices."""
    order = np.random.default_rng([seed, 0xBEEF]).permutation(n)
    n_val = int(round(val_fraction * n))
    return order[n_val:].tolist(), order[:n_val].tolist()


def epoch_order(indices: Sequence[int], seed: int, epoch: int) -> List[int]:
    """Per-epoch sample order, a pure function of (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(len(indices))
    return [indices[i] for i in perm]


def build_model(config: RunConfig) -> Tuple[MultiModalSegNet, Optional[Distiller]]:
    """Seeded construction of the network and (when enabled) the distiller."""
    torch.manual_seed(config.seed)
    net_config = dataclasses.replace(config.net, use_fusion_attention=config.use_dmaf)
    net = MultiModalSegNet(net_config)
    distiller = None
    if config.use_distill:
        bottleneck_channels = net_config.channels[-1]
        distiller = Distiller(
            channels=bottleneck_channels,
            n_heads=net_config.n_heads,
            head_dim=net_config.head_dim,
            alpha1_init=config.alpha1_init,
            taus=config.taus(),
            n_modalities=net_config.n_modalities,
        ).to(net_config.torch_dtype)
    return net, distiller


def _parameters(net: MultiModalSegNet, distiller: Optional[Distiller]) -> List[torch.Tensor]:
    params = list(net.parameters())
    if distiller is not None:
        params += list(distiller.parameters())
    return params


@dataclass
class StepOutcome:
    breakdown: LossBreakdown
    decisions: Dict[int, RebalanceDecision]
    alpha1: Optional[float]
    alpha2: Optional[float]
    raw_relation_gaps: Dict[int, float]
    raw_prototype_gaps: Dict[int, float]


def training_step(
    net: MultiModalSegNet,
    distiller: Optional[Distiller],
    tracker: Optional[GapTracker],
    optimizer,
    images: torch.Tensor,
    label: torch.Tensor,
    presence: torch.Tensor,
    config: RunConfig,
) -> StepOutcome:
    outputs = net(images, presence)
    present = [m for m in range(config.net.n_modalities) if bool(presence[m])]

    fuse = deep_supervision_loss(outputs.fused_logits, label)
    _check_finite(fuse, "fuse")
    sep_losses = per_modality_seg_losses(outputs.uni_logits, label)
    for m, v in sep_losses.items():
        _check_finite(v, f"sep[m{m}]")

    alpha1 = alpha2 = None
    if distiller is not None:
        bottleneck_hw = outputs.fused_features[-1].shape[-2:]
        label_small = majority_pool_labels(label, tuple(bottleneck_hw), config.net.n_classes)
        uni_bottlenecks = {m: outputs.uni_features[m][-1] for m in present}
        dist = distiller(uni_bottlenecks, outputs.fused_features[-1],
                         label_small, config.net.n_classes)
        relation, prototype = dist.relation, dist.prototype
        rel_gaps, proto_gaps = dist.relation_gaps, dist.prototype_gaps
        alpha1 = dist.alpha1
        lam3, lam4 = config.lambdas[2], config.lambdas[3]
        _check_finite(relation, "relation")
        _check_finite(prototype, "prototype")
    else:
        zero = torch.zeros((), dtype=images.dtype)
        relation, prototype = zero, zero
        # Controller still needs observations; feed neutral gaps.
        rel_gaps = {m: 1.0 for m in present}
        proto_gaps = {m: 1.0 for m in present}
        lam3, lam4 = 0.0, 0.0

    if tracker is not None:
        tracker.observe(rel_gaps, proto_gaps)
        decisions = tracker.decide(present)
        alpha2 = tracker.mixing_ratio()
    else:
        share = 1.0 / len(present)
        decisions = {m: RebalanceDecision(weight=share, scale=1.0) for m in present}

    sep = images.new_zeros(())
    for m in present:
        sep = sep + decisions[m].weight * sep_losses[m]
    _check_finite(sep, "sep")

    breakdown = LossBreakdown(
        fuse=fuse,
        sep=sep,
        relation=relation,
        prototype=prototype,
        lambdas=(config.lambdas[0], config.lambdas[1], lam3, lam4),
        sep_per_modality={m: float(v.detach()) for m, v in sep_losses.items()},
    )
    total = breakdown.total
    _check_finite(total, "total")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if tracker is not None:
        encoder_params = {m: p for m, p in net.encoder_parameters().items() if m in decisions}
        scale_gradients(tracker, encoder_params, decisions)
    optimizer.step()

    return StepOutcome(
        breakdown=breakdown,
        decisions=decisions,
        alpha1=alpha1,
        alpha2=alpha2,
        raw_relation_gaps=rel_gaps,
        raw_prototype_gaps=proto_gaps,
    )


def _log_row(
    writer,
    step: int,
    epoch: int,
    sample_id: str,
    outcome: StepOutcome,
    tracker: Optional[GapTracker],
    n_modalities: int,
) -> None:
    vals = outcome.breakdown.component_values()
    row: List[object] = [
        step,
        epoch,
        sample_id,
        f"{vals['total']:.17g}",
        f"{vals['fuse']:.17g}",
        f"{vals['sep']:.17g}",
        f"{vals['relation']:.17g}",
        f"{vals['prototype']:.17g}",
        "" if outcome.alpha1 is None else f"{outcome.alpha1:.17g}",
        "" if outcome.alpha2 is None else f"{outcome.alpha2:.17g}",
    ]
    for m in range(n_modalities):
        d = outcome.decisions.get(m)
        if d is None:
            row += ["0", "1", "", "0"]
        else:
            row += [
                f"{d.weight:.17g}",
                f"{d.scale:.17g}",
                "" if d.similarity is None else f"{d.similarity:.17g}",
                int(d.damped),
            ]
        if tracker is not None and m in tracker.ema_relation:
            row += [
                f"{tracker.ema_relation[m]:.17g}",
                f"{tracker.ema_prototype[m]:.17g}",
                f"{tracker.total_gap(m):.17g}",
            ]
        else:
            row += ["", "", ""]
    writer.writerow(row)


def save_checkpoint(
    path,
    config: RunConfig,
    net: MultiModalSegNet,
    distiller: Optional[Distiller],
    optimizer,
    tracker: Optional[GapTracker],
    step: int,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "run_config": config.to_dict(),
        "net_config": net.config.to_dict(),
        "step": step,
        "net_state": net.state_dict(),
        "distiller_state": None if distiller is None else distiller.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "tracker_state": None if tracker is None else tracker.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expect_net: Optional[NetConfig] = None) -> dict:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} unsupported; expected {CHECKPOINT_VERSION}"
        )
    if expect_net is not None and payload["net_config"] != expect_net.to_dict():
        raise CheckpointError(
            "checkpoint network config does not match the requested one: "
            f"{payload['net_config']} vs {expect_net.to_dict()}"
        )
    return payload


def restore_model(payload: dict) -> Tuple[RunConfig, MultiModalSegNet, Optional[Distiller], Optional[GapTracker]]:
    config = RunConfig.from_dict(payload["run_config"])
    net, distiller = build_model(config)
    net.load_state_dict(payload["net_state"])
    if distiller is not None:
        if payload["distiller_state"] is None:
            raise CheckpointError("config enables distillation but checkpoint has no distiller state")
        distiller.load_state_dict(payload["distiller_state"])
    tracker = None
    if payload["tracker_state"] is not None:
        tracker = GapTracker.from_state_dict(payload["tracker_state"])
    return config, net, distiller, tracker


def _load_corpus_tensors(config: RunConfig):
    samples, presence, manifest = read_corpus(config.corpus)
    if manifest["n_modalities"] != config.net.n_modalities:
        raise ValueError(
            f"corpus has {manifest['n_modalities']} modalities, config expects "
            f"{config.net.n_modalities}"
        )
    if manifest["n_classes"] != config.net.n_classes:
        raise ValueError(
            f"corpus has {manifest['n_classes']} classes, config expects {config.net.n_classes}"
        )
    return samples, presence, manifest


def train(config: RunConfig, resume_from: Optional[str] = None) -> TrainResult:
    """Run (or resume) training; writes runlog.csv and checkpoint.pt to out_dir."""
    _pin_threads()
    samples, _, _ = _load_corpus_tensors(config)
    dtype = config.net.torch_dtype
    tensors = [_to_tensors(s, dtype) for s in samples]
    ids = [s.sample_id for s in samples]
    train_idx, _ = split_indices(len(samples), config.val_fraction, config.seed)
    if not train_idx:
        raise ValueError("empty training split")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runlog_path = out_dir / "runlog.csv"
    checkpoint_path = out_dir / "checkpoint.pt"

    start_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        stored, mine = dict(payload["run_config"]), config.to_dict()
        for key in ("epochs", "out_dir"):  # continuation parameters may differ
            stored.pop(key, None)
            mine.pop(key, None)
        if stored != mine:
            raise CheckpointError("resume config differs from the checkpoint's run config")
        net, distiller = build_model(config)
        net.load_state_dict(payload["net_state"])
        if distiller is not None:
            distiller.load_state_dict(payload["distiller_state"])
        tracker = None
        if payload["tracker_state"] is not None:
            tracker = GapTracker.from_state_dict(payload["tracker_state"])
        optimizer = AdamW(_parameters(net, distiller), lr=config.lr,
                          weight_decay=config.weight_decay)
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng"])
        start_step = payload["step"]
        log_mode = "a"
    else:
        net, distiller = build_model(config)
        tracker = GapTracker(n_modalities=config.net.n_modalities) if config.use_dtm else None
        optimizer = AdamW(_parameters(net, distiller), lr=config.lr,
                          weight_decay=config.weight_decay)
        log_mode = "w"

    steps_per_epoch = len(train_idx)
    total_steps = config.epochs * steps_per_epoch
    write_header = (
        log_mode == "w" or not runlog_path.exists() or runlog_path.stat().st_size == 0
    )
    with runlog_path.open(log_mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(runlog_columns(config.net.n_modalities))
        step = start_step
        while step < total_steps:
            epoch = step // steps_per_epoch
            order = epoch_order(train_idx, config.seed, epoch)
            for pos in range(step % steps_per_epoch, steps_per_epoch):
                idx = order[pos]
                images, label, presence = tensors[idx]
                outcome = training_step(
                    net, distiller, tracker, optimizer, images, label, presence, config
                )
                step += 1
                _log_row(writer, step, epoch, ids[idx], outcome, tracker,
                         config.net.n_modalities)
            save_checkpoint(checkpoint_path, config, net, distiller, optimizer, tracker, step)

    return TrainResult(
        net=net,
        distiller=distiller,
        tracker=tracker,
        checkpoint_path=str(checkpoint_path),
        runlog_path=str(runlog_path),
        steps=step,
    )


@torch.no_grad()
def predict_labels(net: MultiModalSegNet, images: torch.Tensor, presence: torch.Tensor) -> np.ndarray:
    """Argmax of the full-resolution fused logits."""
    outputs = net(images, presence)
    return outputs.fused_logits[0].argmax(dim=0).cpu().numpy()


def evaluate(
    net: MultiModalSegNet,
    samples: Sequence[ModalitySample],
    combinations: Optional[Sequence[Sequence[int]]] = None,
    hd_percentile: float = 100.0,
) -> MetricsReport:
    """Metrics per modality combination: excluded modalities are zeroed out.

    Samples whose own availability leaves a combination empty are skipped for
    that combination.
    """
    _pin_threads()
    net.eval()
    cfg = net.config
    if combinations is None:
        combinations = modality_combinations(cfg.n_modalities)
    report = MetricsReport(n_modalities=cfg.n_modalities, n_classes=cfg.n_classes)
    dtype = cfg.torch_dtype
    for combo in combinations:
        combo = tuple(sorted(combo))
        mask = np.zeros(cfg.n_modalities, dtype=np.int8)
        mask[list(combo)] = 1
        collected = []
        for sample in samples:
            eff = sample.presence * mask
            if not eff.any():
                continue
            images = torch.from_numpy(sample.images * eff[:, None, None]).to(dtype)
            presence = torch.from_numpy(eff).bool()
            pred = predict_labels(net, images, presence)
            cm = per_class_metrics(pred, sample.label, cfg.n_classes, hd_percentile)
            report.per_sample[(sample.sample_id, combo)] = cm
            collected.append(cm)
        if collected:
            report.rows.append(aggregate_combination(combo, collected, cfg.n_classes))
    net.train()
    return report


def evaluate_checkpoint(
    checkpoint_path,
    corpus_path,
    combinations: Optional[Sequence[Sequence[int]]] = None,
    hd_percentile: float = 100.0,
) -> MetricsReport:
    payload = load_checkpoint(checkpoint_path)
    config, net, _, _ = restore_model(payload)
    samples, _, manifest = read_corpus(corpus_path)
    if manifest["n_modalities"] != config.net.n_modalities:
        raise ValueError("corpus modality count does not match the checkpoint")
    if manifest["n_classes"] != config.net.n_classes:
        raise ValueError("corpus class count does not match the checkpoint")
    return evaluate(net, samples, combinations, hd_percentile)
