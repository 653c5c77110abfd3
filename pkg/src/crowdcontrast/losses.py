"""Training objectives for both stages.

``contra1`` is the class-balanced InfoNCE over the key memory: every anchor
is pulled toward the stored keys that share its source image (or, under the
alternative strategy, its weather label) and pushed from everything else in
the memory. ``contra2`` reuses the same functional form with the positives
replaced by the whole normal-weather sub-queue, which is what drives the
refiner toward the normal domain. The count objective treats each annotated
head as a Gaussian posterior over density cells and asks the expected count
per head to be one.

All losses are plain functions of tensors; gradients come from autograd.
"""

from __future__ import annotations

import torch

from .config import NORMAL_CLASS


def info_nce_from_logits(
    logits: torch.Tensor, pos_mask: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Average negative log-softmax of the positive logits, per anchor.

    ``logits`` is (anchors, keys); ``pos_mask`` flags each anchor's positive
    keys. Shifting all logits by a constant leaves the value unchanged.
    """
    if logits.ndim != 2 or pos_mask.shape != logits.shape:
        raise ValueError("logits and pos_mask must be matching 2-D tensors")
    pos_counts = pos_mask.sum(dim=1)
    if (pos_counts == 0).any():
        raise ValueError("every anchor needs at least one positive key")
    log_denom = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = logits - log_denom
    per_anchor = -(log_prob * pos_mask).sum(dim=1) / pos_counts
    if reduction == "mean":
        return per_anchor.mean()
    if reduction == "sum":
        return per_anchor.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def _stacked_keys(memory):
    keys, key_idx, key_wth = memory.stacked()
    if keys.shape[0] == 0:
        raise ValueError("key memory is empty; push keys before computing the loss")
    return keys, key_idx, key_wth


def contra1(
    anchors: torch.Tensor,
    anchor_image_indices,
    memory,
    temperature: float,
    *,
    anchor_weathers=None,
    positive_selection: str = "same-image",
    reduction: str = "mean",
) -> torch.Tensor:
    """Contrastive loss of the first stage against the full key memory.

    Anchors are (n, C2) unit-norm embeddings. Positives are the stored keys
    with the anchor's image index; keys must have been pushed for the current
    batch first, otherwise an anchor can end up with an empty positive set.
    ``positive_selection="same-weather"`` switches positives to all keys
    sharing the anchor's weather label (requires ``anchor_weathers``).
    """
    keys, key_idx, key_wth = _stacked_keys(memory)
    logits = anchors @ keys.T / temperature
    if positive_selection == "same-image":
        anchor_idx = torch.as_tensor(list(anchor_image_indices), dtype=torch.long)
        pos_mask = (key_idx[None, :] == anchor_idx[:, None]).to(logits.dtype)
    elif positive_selection == "same-weather":
        if anchor_weathers is None:
            raise ValueError("same-weather selection requires anchor_weathers")
        labels = torch.as_tensor(list(anchor_weathers), dtype=torch.long)
        pos_mask = (key_wth[None, :] == labels[:, None]).to(logits.dtype)
    else:
        raise ValueError(f"unknown positive_selection {positive_selection!r}")
    return info_nce_from_logits(logits, pos_mask, reduction)


def contra2(
    anchors: torch.Tensor,
    memory,
    temperature: float,
    normal_class: int = NORMAL_CLASS,
    reduction: str = "mean",
) -> torch.Tensor:
    """Contrastive loss of the refinement stage.

    Every anchor shares the same positive set: all keys in the normal-weather
    sub-queue. The memory is a frozen constant here; gradients only flow into
    the anchors.
    """
    keys, _, key_wth = _stacked_keys(memory)
    pos = key_wth == normal_class
    if not bool(pos.any()):
        raise ValueError("normal-weather sub-queue is empty")
    logits = anchors @ keys.T / temperature
    pos_mask = pos[None, :].expand_as(logits).to(logits.dtype)
    return info_nce_from_logits(logits, pos_mask, reduction)


def bayesian_loss(
    density: torch.Tensor, points: torch.Tensor, sigma: float
) -> torch.Tensor:
    """Point-supervised count loss over one density map.

    ``density`` is a nonnegative (h, w) grid; ``points`` are (n, 2) float
    (x, y) positions in density-grid coordinates. Each grid cell's mass is
    split among annotations by a Gaussian posterior over distance, and each
    annotation's expected count is driven toward one. With no annotations the
    whole map is driven toward zero mass.
    """
    if (density < 0).any():
        raise ValueError("density map has negative values")
    points = torch.as_tensor(points, dtype=density.dtype)
    if points.numel() == 0:
        return density.sum().abs()
    h, w = density.shape[-2:]
    if (points[:, 0] < 0).any() or (points[:, 0] > w).any() \
            or (points[:, 1] < 0).any() or (points[:, 1] > h).any():
        raise ValueError("annotation points fall outside the density grid")

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=density.dtype),
        torch.arange(w, dtype=density.dtype),
        indexing="ij",
    )
    cells = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)   # (h*w, 2)
    dist_sq = ((cells[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    posterior = torch.softmax(-dist_sq / (2.0 * sigma**2), dim=1)  # over annotations
    expected = (posterior * density.reshape(-1, 1)).sum(dim=0)
    return (1.0 - expected).abs().sum()


def wrl_total(l_contra: torch.Tensor, l_count: torch.Tensor, weight: float) -> torch.Tensor:
    """Stage-one objective: contrastive term plus weighted count term."""
    return l_contra + weight * l_count


def crr_total(l_contra: torch.Tensor, l_count: torch.Tensor, weight: float) -> torch.Tensor:
    """Refinement-stage objective: same composition with its own weight."""
    return l_contra + weight * l_count
