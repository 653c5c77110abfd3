"""Checkpoint archive: parameters, key memory, configs and a stage tag.

Stage tags: ``"wrl"`` (stage one complete; momentum branch included),
``"crr"`` (refinement complete; momentum branch dropped, refiner included)
and ``"count-only"`` (count-supervised baseline; no memory). Everything in
the archive is tensors and plain containers, so it loads with
``torch.load(weights_only=True)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import queues
from .config import (LossConfig, ModelConfig, TrainConfig, to_dict,
                     _tupled, NORMAL_CLASS)
from .models import CountingHead, Encoder, ProjectionHead, Refiner

CHECKPOINT_FORMAT = "crowdcontrast-checkpoint-v1"
STAGES = ("wrl", "crr", "count-only")


def build_checkpoint(
    stage: str,
    modules: dict[str, torch.nn.Module],
    memory,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    num_classes: int,
    classes: tuple[str, ...],
) -> dict:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "num_classes": num_classes,
        "classes": list(classes),
        "model_config": to_dict(model_cfg),
        "loss_config": to_dict(loss_cfg),
        "train_config": to_dict(train_cfg),
        "modules": {name: mod.state_dict() for name, mod in modules.items()},
        "memory": memory.state_dict() if memory is not None else None,
    }


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    torch.save(ckpt, str(path))


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(str(path), map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    return ckpt


def _model_config_from(ckpt: dict) -> ModelConfig:
    return ModelConfig(**{k: _tupled(v) for k, v in ckpt["model_config"].items()})


@dataclass
class CheckpointBundle:
    """A loaded checkpoint with its modules rebuilt for inference."""

    stage: str
    model_cfg: ModelConfig
    num_classes: int
    classes: tuple[str, ...]
    encoder: Encoder
    proj_q: ProjectionHead
    head: CountingHead
    refiner: Refiner | None
    memory: object | None
    raw: dict

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointBundle":
        return cls.from_dict(load_checkpoint(path))

    @classmethod
    def from_dict(cls, ckpt: dict) -> "CheckpointBundle":
        cfg = _model_config_from(ckpt)
        mods = ckpt["modules"]
        encoder = Encoder(cfg)
        encoder.load_state_dict(mods["encoder"])
        proj_q = ProjectionHead(cfg)
        proj_q.load_state_dict(mods["proj_q"])
        head = CountingHead(cfg)
        head.load_state_dict(mods["head"])
        refiner = None
        if "refiner" in mods:
            refiner = Refiner(cfg)
            refiner.load_state_dict(mods["refiner"])
            refiner.eval()
        if ckpt["stage"] == "crr" and refiner is None:
            raise ValueError("post-refinement checkpoint is missing the refiner")
        for mod in (encoder, proj_q, head):
            mod.eval()
        memory = None
        if ckpt.get("memory") is not None:
            memory = queues.memory_from_state(ckpt["memory"])
        return cls(
            stage=ckpt["stage"],
            model_cfg=cfg,
            num_classes=int(ckpt["num_classes"]),
            classes=tuple(ckpt["classes"]),
            encoder=encoder,
            proj_q=proj_q,
            head=head,
            refiner=refiner,
            memory=memory,
            raw=ckpt,
        )

    def _to_tensor(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()

    @torch.no_grad()
    def _represent(self, padded: torch.Tensor) -> torch.Tensor:
        rep = self.encoder(padded.unsqueeze(0))
        if self.refiner is not None:
            rep = self.refiner(rep)
        return rep

    @torch.no_grad()
    def predict_density(self, image: np.ndarray) -> np.ndarray:
        """Full-image density map, reflect-padded to the stride then cropped.

        The returned grid covers exactly the pre-pad image region
        (``ceil(dim / density_stride)`` cells per axis).
        """
        x = self._to_tensor(image)
        h, w = x.shape[-2:]
        stride = self.model_cfg.stride
        pad_h = (-h) % stride
        pad_w = (-w) % stride
        if pad_h or pad_w:
            x = torch.nn.functional.pad(x.unsqueeze(0), (0, pad_w, 0, pad_h),
                                        mode="reflect").squeeze(0)
        density = self.head(self._represent(x)).squeeze(0)
        ds = self.model_cfg.density_stride
        return density[: math.ceil(h / ds), : math.ceil(w / ds)].numpy()

    @torch.no_grad()
    def embed(self, image: np.ndarray) -> np.ndarray:
        """Unit-norm embedding of a full image (refined when a refiner exists)."""
        x = self._to_tensor(image)
        h, w = x.shape[-2:]
        stride = self.model_cfg.stride
        pad_h = (-h) % stride
        pad_w = (-w) % stride
        if pad_h or pad_w:
            x = torch.nn.functional.pad(x.unsqueeze(0), (0, pad_w, 0, pad_h),
                                        mode="reflect").squeeze(0)
        return self.proj_q(self._represent(x)).squeeze(0).numpy()

    def normal_centroid(self, normal_class: int = NORMAL_CLASS) -> np.ndarray:
        """Mean of the stored normal-weather keys."""
        if self.memory is None:
            raise ValueError("checkpoint carries no key memory")
        entries = self.memory.class_entries(normal_class)
        if not entries:
            raise ValueError("normal-weather sub-queue is empty")
        return torch.stack([e.vector for e in entries]).mean(dim=0).numpy()
