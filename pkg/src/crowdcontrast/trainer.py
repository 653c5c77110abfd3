"""Two-stage training loops plus the count-only baseline.

Stage one trains the encoder, its projection head and the counting head with
the contrastive loss over the key memory plus the weighted count loss; the
momentum branch tracks the query branch by EMA and feeds the memory. Stage
two freezes the encoder, projection head and memory, and trains a refiner
(and by default the head) so refined representations land in the
normal-weather region of embedding space while still counting well.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from . import losses
from .checkpoint import CheckpointBundle, build_checkpoint
from .config import NORMAL_CLASS, LossConfig, ModelConfig, TrainConfig
from .datagen import CrowdSample, DiskDataset
from .models import Refiner, build_wrl_models, momentum_update
from .queues import make_memory


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite."""


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Cosine-annealed learning rate: lr0 at step 0, 0 at the final step."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _crop_flip(image: np.ndarray, crop: int, ox: int, oy: int, flip: bool) -> np.ndarray:
    view = image[oy:oy + crop, ox:ox + crop]
    return view[:, ::-1] if flip else view


def _transform_points(points: np.ndarray, crop: int, ox: int, oy: int,
                      flip: bool) -> np.ndarray:
    if points.shape[0] == 0:
        return points.reshape(0, 2)
    shifted = points - np.array([ox, oy], dtype=np.float64)
    inside = ((shifted[:, 0] >= 0) & (shifted[:, 0] < crop)
              & (shifted[:, 1] >= 0) & (shifted[:, 1] < crop))
    kept = shifted[inside]
    if flip:
        kept[:, 0] = (crop - 1) - kept[:, 0]
    return kept


def _draw_view(rng: np.random.Generator, image_hw: tuple[int, int], crop: int,
               flip_prob: float) -> tuple[int, int, bool]:
    h, w = image_hw
    ox = int(rng.integers(0, w - crop + 1))
    oy = int(rng.integers(0, h - crop + 1))
    flip = bool(rng.random() < flip_prob)
    return ox, oy, flip


def augment_single(sample: CrowdSample, crop: int, flip_prob: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One random crop+flip view with its surviving, transformed points."""
    ox, oy, flip = _draw_view(rng, sample.image.shape[:2], crop, flip_prob)
    view = _crop_flip(sample.image, crop, ox, oy, flip)
    return view, _transform_points(sample.points, crop, ox, oy, flip)


def augment_pair(
    sample: CrowdSample, crop: int, flip_prob: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two independent views of one image; points follow the first view.

    Returns ``(view_q, view_k, points_q)``. Points landing outside the first
    view's crop are dropped; both views inherit the sample's image index and
    weather label (carried by the caller).
    """
    view_q, points_q = augment_single(sample, crop, flip_prob, rng)
    ox, oy, flip = _draw_view(rng, sample.image.shape[:2], crop, flip_prob)
    view_k = _crop_flip(sample.image, crop, ox, oy, flip)
    return view_q, view_k, points_q


def _check_crop_fits(samples: list[CrowdSample], crop: int) -> None:
    for s in samples:
        h, w = s.image.shape[:2]
        if h < crop or w < crop:
            raise ValueError(
                f"image {s.image_index} is {h}x{w}, smaller than crop {crop}"
            )


def _to_batch(views: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(v) for v in views])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float()


def _count_loss(densities: torch.Tensor, point_lists: list[np.ndarray],
                density_stride: int, sigma: float) -> torch.Tensor:
    per_image = [
        losses.bayesian_loss(densities[i], pts / density_stride, sigma)
        for i, pts in enumerate(point_lists)
    ]
    return torch.stack(per_image).mean()


class _StepLogger:
    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def log(self, **record) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _guard_finite(value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step}")


def train_wrl(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    dataset: DiskDataset,
    log_path: str | Path | None = None,
) -> dict:
    """Stage one; returns a post-stage-one checkpoint dict (memory retained)."""
    model_cfg.validate(); loss_cfg.validate(); train_cfg.validate(model_cfg)
    samples = dataset.split("train")
    if not samples:
        raise ValueError("dataset has no training samples")
    _check_crop_fits(samples, train_cfg.crop_size)

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    mods = build_wrl_models(model_cfg)
    encoder, proj_q, head = mods["encoder"], mods["proj_q"], mods["head"]
    encoder_k, proj_k = mods["encoder_k"], mods["proj_k"]
    memory = make_memory(train_cfg.memory, dataset.num_classes,
                         train_cfg.queue_capacity, model_cfg.embed_dim)

    params = list(encoder.parameters()) + list(proj_q.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    total_steps = train_cfg.wrl_epochs * steps_per_epoch
    ds = model_cfg.density_stride
    logger = _StepLogger(log_path)
    step = 0
    try:
        for _epoch in range(train_cfg.wrl_epochs):
            order = rng.permutation(len(samples))
            for batch_idx in _batches(len(samples), train_cfg.batch_size, order):
                batch = [samples[i] for i in batch_idx]
                lr = lr_at(step, total_steps, train_cfg.learning_rate)
                for group in opt.param_groups:
                    group["lr"] = lr

                views_q, views_k, pts = [], [], []
                for s in batch:
                    vq, vk, p = augment_pair(s, train_cfg.crop_size,
                                             train_cfg.flip_prob, rng)
                    views_q.append(vq); views_k.append(vk); pts.append(p)
                xq, xk = _to_batch(views_q), _to_batch(views_k)
                image_indices = [s.image_index for s in batch]
                weathers = [s.weather for s in batch]

                rep_q = encoder(xq)
                q = proj_q(rep_q)
                with torch.no_grad():
                    k = proj_k(encoder_k(xk))
                memory.push_batch(k, image_indices, weathers)

                l_contra = losses.contra1(
                    q, image_indices, memory, loss_cfg.temperature,
                    anchor_weathers=weathers,
                    positive_selection=train_cfg.positive_selection,
                    reduction=loss_cfg.loss_reduction,
                )
                densities = head(rep_q)
                l_count = _count_loss(densities, pts, ds, loss_cfg.count_sigma)
                total = losses.wrl_total(l_contra, l_count, loss_cfg.count_weight_wrl)
                _guard_finite(total, step)

                opt.zero_grad()
                total.backward()
                opt.step()
                momentum_update(encoder_k, encoder, model_cfg.momentum)
                momentum_update(proj_k, proj_q, model_cfg.momentum)

                logger.log(step=step, stage="wrl", contra=float(l_contra),
                           bayesian=float(l_count), total=float(total), lr=lr)
                step += 1
    finally:
        logger.close()

    return build_checkpoint(
        "wrl",
        {"encoder": encoder, "proj_q": proj_q, "head": head,
         "encoder_k": encoder_k, "proj_k": proj_k},
        memory, model_cfg, loss_cfg, train_cfg,
        dataset.num_classes, dataset.classes,
    )


def train_crr(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    wrl_checkpoint: dict,
    dataset: DiskDataset,
    log_path: str | Path | None = None,
) -> dict:
    """Stage two; consumes a post-stage-one checkpoint, returns the final one.

    Encoder, projection head and key memory are frozen; the momentum branch
    is discarded. Trains the refiner plus (by default) the counting head.
    """
    model_cfg.validate(); loss_cfg.validate(); train_cfg.validate(model_cfg)
    if wrl_checkpoint.get("stage") != "wrl":
        raise ValueError(
            f"refinement stage needs a post-stage-one checkpoint, "
            f"got stage {wrl_checkpoint.get('stage')!r}"
        )
    samples = dataset.split("train")
    if not samples:
        raise ValueError("dataset has no training samples")
    _check_crop_fits(samples, train_cfg.crop_size)

    torch.manual_seed(train_cfg.seed + 1)
    rng = np.random.default_rng(train_cfg.seed + 1)
    bundle = CheckpointBundle.from_dict(wrl_checkpoint)
    encoder, proj_q, head = bundle.encoder, bundle.proj_q, bundle.head
    memory = bundle.memory
    if memory is None:
        raise ValueError("checkpoint carries no key memory")
    if not memory.class_entries(NORMAL_CLASS):
        raise ValueError("normal-weather sub-queue is empty; cannot refine")

    for mod in (encoder, proj_q):
        for p in mod.parameters():
            p.requires_grad_(False)
    head_trainable = train_cfg.train_head_in_crr
    for p in head.parameters():
        p.requires_grad_(head_trainable)
    head.train(head_trainable)

    refiner = Refiner(model_cfg)
    refiner.train()
    params = list(refiner.parameters())
    if head_trainable:
        params += list(head.parameters())
    opt = torch.optim.AdamW(params, lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay)

    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    total_steps = max(1, train_cfg.crr_epochs * steps_per_epoch)
    ds = model_cfg.density_stride
    logger = _StepLogger(log_path)
    step = 0
    try:
        for _epoch in range(train_cfg.crr_epochs):
            order = rng.permutation(len(samples))
            for batch_idx in _batches(len(samples), train_cfg.batch_size, order):
                batch = [samples[i] for i in batch_idx]
                lr = lr_at(step, total_steps, train_cfg.learning_rate)
                for group in opt.param_groups:
                    group["lr"] = lr

                views, pts = [], []
                for s in batch:
                    v, p = augment_single(s, train_cfg.crop_size,
                                          train_cfg.flip_prob, rng)
                    views.append(v); pts.append(p)
                x = _to_batch(views)

                with torch.no_grad():
                    rep = encoder(x)
                refined = refiner(rep)
                q_prime = proj_q(refined)

                l_contra = losses.contra2(q_prime, memory, loss_cfg.temperature,
                                          reduction=loss_cfg.loss_reduction)
                densities = head(refined)
                l_count = _count_loss(densities, pts, ds, loss_cfg.count_sigma)
                total = losses.crr_total(l_contra, l_count, loss_cfg.count_weight_crr)
                _guard_finite(total, step)

                opt.zero_grad()
                total.backward()
                opt.step()

                logger.log(step=step, stage="crr", contra=float(l_contra),
                           bayesian=float(l_count), total=float(total), lr=lr)
                step += 1
    finally:
        logger.close()

    head.eval()
    return build_checkpoint(
        "crr",
        {"encoder": encoder, "proj_q": proj_q, "head": head, "refiner": refiner},
        memory, model_cfg, loss_cfg, train_cfg,
        dataset.num_classes, dataset.classes,
    )


def train_count_only(
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    dataset: DiskDataset,
    epochs: int | None = None,
    log_path: str | Path | None = None,
) -> dict:
    """Count-supervised baseline: same encoder and head, no contrastive term.

    Trains for ``epochs`` (default: both stages' epoch budget combined) with
    single-view augmentation. Used by the ablation comparisons.
    """
    model_cfg.validate(); loss_cfg.validate(); train_cfg.validate(model_cfg)
    samples = dataset.split("train")
    if not samples:
        raise ValueError("dataset has no training samples")
    _check_crop_fits(samples, train_cfg.crop_size)
    if epochs is None:
        epochs = train_cfg.wrl_epochs + train_cfg.crr_epochs

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    mods = build_wrl_models(model_cfg)
    encoder, head = mods["encoder"], mods["head"]
    proj_q = mods["proj_q"]  # kept so the checkpoint can still embed

    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    ds = model_cfg.density_stride
    logger = _StepLogger(log_path)
    step = 0
    try:
        for _epoch in range(epochs):
            order = rng.permutation(len(samples))
            for batch_idx in _batches(len(samples), train_cfg.batch_size, order):
                batch = [samples[i] for i in batch_idx]
                lr = lr_at(step, total_steps, train_cfg.learning_rate)
                for group in opt.param_groups:
                    group["lr"] = lr

                views, pts = [], []
                for s in batch:
                    v, p = augment_single(s, train_cfg.crop_size,
                                          train_cfg.flip_prob, rng)
                    views.append(v); pts.append(p)
                x = _to_batch(views)

                densities = head(encoder(x))
                l_count = _count_loss(densities, pts, ds, loss_cfg.count_sigma)
                _guard_finite(l_count, step)

                opt.zero_grad()
                l_count.backward()
                opt.step()

                logger.log(step=step, stage="count-only", contra=0.0,
                           bayesian=float(l_count), total=float(l_count), lr=lr)
                step += 1
    finally:
        logger.close()

    return build_checkpoint(
        "count-only",
        {"encoder": encoder, "proj_q": proj_q, "head": head},
        None, model_cfg, loss_cfg, train_cfg,
        dataset.num_classes, dataset.classes,
    )
