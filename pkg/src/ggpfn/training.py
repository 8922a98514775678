"""Adam, the staged training schedule, validation-based model selection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import model as M
from .config import GgpfnConfig
from .inference import dsc, segment_volume_view, threshold_mask
from .patches import AugmentParams, TrainingSample, augment, sample_training_patches
from .tensor import Tensor, backward
from .volume_io import ViewPlane, VolumeGrid, gt_pyramid

log = logging.getLogger(__name__)

GROUPS = ("global", "pfn", "all")


# ---------------------------------------------------------------- Adam

def adam_update(theta, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; ``t`` is the 1-based step index. Returns new (theta, m, v)."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * (g * g)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(params: M.ParamStore, names: Iterable[str], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Update ``names`` in place from their ``.grad``; missing gradients count as zero."""
    for k in names:
        p = params[k]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        params.t[k] += 1
        theta, params.m[k], params.v[k] = adam_update(
            p.data, g.astype(p.dtype), params.m[k], params.v[k], params.t[k], lr, beta1, beta2, eps)
        p.data = theta.astype(p.dtype, copy=False)


# ---------------------------------------------------------------- stages

@dataclass
class TrainStage:
    name: str
    epochs: int
    batch_size: int
    alpha: float
    beta: float
    trainable: str = "all"
    lr: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"stage {self.name}: epochs must be >= 0 and batch_size >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"stage {self.name}: alpha and beta must be >= 0")
        if self.trainable not in GROUPS:
            raise ValueError(f"stage {self.name}: trainable must be one of {GROUPS}")


def default_schedule(epochs=(200, 200, 100), batch_sizes=(32, 4, 4), lr: float = 1e-4) -> list:
    """Global branch alone, then the fusion network alone, then everything jointly."""
    return [
        TrainStage("global", epochs[0], batch_sizes[0], 0.5, 0.5, "global", lr),
        TrainStage("pfn", epochs[1], batch_sizes[1], 0.0, 0.0, "pfn", lr),
        TrainStage("finetune", epochs[2], batch_sizes[2], 0.01, 0.0, "all", lr),
    ]


def long_schedule(lr: float = 1e-4) -> list:
    """Full-length 1000/1000/800-epoch schedule for GPU-scale runs."""
    return default_schedule((1000, 1000, 800), (32, 4, 4), lr)


# ---------------------------------------------------------------- data

class SliceDataset:
    """One foreground-balanced sample per slice of every volume, reshuffled each epoch."""

    def __init__(self, volumes: Sequence[VolumeGrid], plane, config: GgpfnConfig,
                 augment_params: Optional[AugmentParams] = None, slices_per_epoch: Optional[int] = None):
        if not volumes:
            raise ValueError("training data is empty")
        self.volumes = list(volumes)
        self.plane = ViewPlane(plane)
        self.config = config
        self.augment_params = augment_params
        self.slices_per_epoch = slices_per_epoch

    def _n_slices(self, vg) -> int:
        axis = {ViewPlane.AXIAL: 0, ViewPlane.SAGITTAL: 2, ViewPlane.CORONAL: 1}[self.plane]
        return vg.extents[axis]

    def epoch(self, rng: np.random.Generator) -> list:
        index = [(v, s) for v, vg in enumerate(self.volumes) for s in range(self._n_slices(vg))]
        order = rng.permutation(len(index))
        if self.slices_per_epoch is not None:
            order = order[:self.slices_per_epoch]
        out = []
        for i in order:
            v, s = index[i]
            sample = sample_training_patches(self.volumes[v], self.plane, rng, self.config, slice_index=s)
            if self.augment_params is not None:
                pairs = [augment(p, t, rng, self.augment_params) for p, t in zip(sample.patches, sample.targets)]
                sample.patches = [p for p, _ in pairs]
                sample.targets = [t for _, t in pairs]
            out.append(sample)
        return out


class FixedDataset:
    """The same samples every epoch, in the same order."""

    def __init__(self, samples: Sequence[TrainingSample]):
        if not samples:
            raise ValueError("training data is empty")
        self.samples = list(samples)

    def epoch(self, rng) -> list:
        return list(self.samples)


# ---------------------------------------------------------------- loss

def global_targets(mask_g: np.ndarray) -> tuple:
    """Targets for the /32 and /16 global heads, max-downsampled from the A_g mask."""
    levels = gt_pyramid(np.asarray(mask_g, dtype=np.float32), 6)
    return levels[5][None], levels[4][None]


def sample_loss(params: M.ParamStore, config: GgpfnConfig, sample: TrainingSample,
                alpha: float, beta: float, trainable: str = "all", parts: Optional[dict] = None) -> Tensor:
    """Per-slice training loss for one sample.

    With ``trainable="global"`` only the global-head terms are evaluated.
    When the global branch is frozen its features are detached.
    """
    use_global = config.global_enabled
    gf = pf = pfp = gf_t = gfp_t = None
    if use_global or trainable == "global":
        gf = M.global_forward(sample.slice_g, params, config)
        gf_t, gfp_t = global_targets(sample.mask_g)
        if alpha or beta or trainable == "global":
            pf, pfp = M.global_heads(gf, params)
        if trainable == "pfn":
            gf = M.GlobalFeatures(gf.F.detach(), gf.F_prime.detach())
            pf = pfp = None
    if trainable == "global":
        loss = M.total_loss([], [], [], pf, pfp, gf_t, gfp_t, alpha, beta)
        if parts is not None:
            parts["global"] = loss.item()
        return loss

    pks, gks, pjs = [], [], []
    for patch, window, target in zip(sample.patches, sample.windows, sample.targets):
        pk, pyr = M.forward_patch(patch[None], window, sample.slice_extents, gf, params, config)
        pks.append(pk)
        gks.append(target)
        pjs.append(M.multiscale_heads(pyr, params))
    if parts is not None:
        parts["patch"] = M.total_loss(pks, gks, pjs).item()
    return M.total_loss(pks, gks, pjs, pf, pfp, gf_t, gfp_t, alpha, beta)


def batch_loss(params, config, samples, alpha, beta, trainable="all", parts=None) -> Tensor:
    loss = None
    sub = {}
    acc = {}
    for s in samples:
        term = sample_loss(params, config, s, alpha, beta, trainable, sub)
        loss = term if loss is None else loss + term
        for k, v in sub.items():
            acc[k] = acc.get(k, 0.0) + v
    if parts is not None:
        parts.update({k: v / len(samples) for k, v in acc.items()})
    return loss * (1.0 / len(samples))


# ---------------------------------------------------------------- stage runner

def run_stage(stage: TrainStage, params: M.ParamStore, data, rng: np.random.Generator,
              config: Optional[GgpfnConfig] = None, start_epoch: int = 0,
              on_epoch: Optional[Callable] = None) -> list:
    """Train ``stage.epochs`` epochs; returns one log record per epoch.

    Only parameters in ``stage.trainable`` are updated. ``on_epoch(record)``
    runs after every epoch and may add keys to the record.
    """
    config = config or params.config
    if stage.trainable == "global" and not config.global_enabled:
        return []
    names = params.names(stage.trainable)
    records = []
    for epoch in range(start_epoch, stage.epochs):
        samples = data.epoch(rng)
        if not samples:
            raise ValueError("training data is empty")
        losses, patch_losses = [], []
        for b in range(0, len(samples), stage.batch_size):
            params.zero_grad()
            parts = {}
            loss = batch_loss(params, config, samples[b:b + stage.batch_size], stage.alpha, stage.beta,
                              stage.trainable, parts)
            backward(loss)
            adam_step(params, names, stage.lr)
            losses.append(loss.item())
            if "patch" in parts:
                patch_losses.append(parts["patch"])
        rec = {"stage": stage.name, "epoch": epoch + 1, "loss": float(np.mean(losses))}
        if patch_losses:
            rec["patch_loss"] = float(np.mean(patch_losses))
        if on_epoch is not None:
            on_epoch(rec)
        records.append(rec)
        log.debug("%s", rec)
    params.zero_grad()
    return records


def validation_dsc(params, config, volumes, plane, **kwargs) -> float:
    scores = []
    for vg in volumes:
        prob = segment_volume_view(vg, plane, params, config, **kwargs)
        scores.append(dsc(threshold_mask(prob), vg.labels))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best: M.ParamStore
    best_dsc: float
    best_at: tuple
    final: M.ParamStore
    log: list = field(default_factory=list)


def train_full_schedule(config: GgpfnConfig, train_volumes, val_volumes, rng: np.random.Generator,
                        schedule: Optional[Sequence[TrainStage]] = None, plane="axial", seed: int = 0,
                        val_interval: int = 10, augment_params: Optional[AugmentParams] = None,
                        init: Optional[M.ParamStore] = None, start: tuple = (0, 0),
                        log_path=None, on_checkpoint: Optional[Callable] = None) -> TrainResult:
    """Run every stage, validating every ``val_interval`` epochs; keep the best validation DSC.

    The initial weights are validated too, so empty schedules return them.
    Ties keep the earliest checkpoint. ``start=(stage_index, epoch)``
    resumes a partially completed schedule from ``init``.
    """
    if not train_volumes or not val_volumes:
        raise ValueError("train and validation splits must be non-empty")
    if any(any(t is v for v in val_volumes) for t in train_volumes):
        raise ValueError("train and validation splits overlap")
    config.validate()
    schedule = list(schedule) if schedule is not None else default_schedule()
    params = init if init is not None else M.build_model(config, seed)
    data = SliceDataset(train_volumes, plane, config, augment_params)
    records = []
    logfh = open(log_path, "a") if log_path is not None else None

    def emit(rec):
        records.append(rec)
        if logfh is not None:
            logfh.write(json.dumps(rec) + "\n")
            logfh.flush()

    best = {"dsc": validation_dsc(params, config, val_volumes, plane), "at": ("init", 0)}
    best["params"] = params.copy()
    emit({"stage": "init", "epoch": 0, "val_dsc": best["dsc"]})

    try:
        for si, stage in enumerate(schedule):
            if si < start[0]:
                continue
            first = start[1] if si == start[0] else 0

            def on_epoch(rec, stage=stage, si=si):
                if rec["epoch"] % val_interval == 0 or rec["epoch"] == stage.epochs:
                    score = validation_dsc(params, config, val_volumes, plane)
                    rec["val_dsc"] = score
                    if score > best["dsc"]:
                        best.update(dsc=score, at=(stage.name, rec["epoch"]), params=params.copy())
                emit(rec)
                if on_checkpoint is not None:
                    on_checkpoint(params, {"stage_index": si, "stage": stage.name, "epoch": rec["epoch"]})

            run_stage(stage, params, data, rng, config, start_epoch=first, on_epoch=on_epoch)
    finally:
        if logfh is not None:
            logfh.close()
    return TrainResult(best["params"], best["dsc"], best["at"], params, records)
