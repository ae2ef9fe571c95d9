"""Training objectives: cosine-similarity logits against text embeddings,
smoothed binary cross-entropy at image and region level, cosine
distillation toward the teacher image feature, and their weighted sum.

Supervision masks mark each category positive, negative, or ignore.
Ignored categories are removed by index selection, so their logits carry
exactly zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyBatch, InvariantViolation, ZeroNormVector
from .roi import pool_rois
from .types import CategoryVocabulary, TextEmbeddingTable, TrainConfig

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


def build_image_mask(category_ids: Sequence[int], vocab: CategoryVocabulary,
                     positive_ids, neg_category_ids=None) -> np.ndarray:
    """Per-category supervision flags for one image, aligned to category_ids.

    With neg_category_ids given (LVIS-style data) only those categories are
    valid negatives and everything else unlabeled is ignored; without it
    (COCO-style) every seen non-positive category is a negative. Unseen
    categories are always ignored, even when annotated present.
    """
    seen = set(vocab.seen_ids())
    positives = set(positive_ids)
    negatives = None if neg_category_ids is None else set(neg_category_ids)
    mask = np.empty(len(category_ids), dtype=np.int8)
    for i, cid in enumerate(category_ids):
        if cid not in seen:
            mask[i] = IGNORE
        elif cid in positives:
            mask[i] = POSITIVE
        elif negatives is None:
            mask[i] = NEGATIVE
        else:
            mask[i] = NEGATIVE if cid in negatives else IGNORE
    return mask


def build_roi_mask(category_ids: Sequence[int], vocab: CategoryVocabulary,
                   roi_category_id: int, neg_category_ids=None) -> np.ndarray:
    """Supervision flags for one training region: its own category is the
    single positive; negatives follow the image-level rules."""
    if roi_category_id not in set(vocab.seen_ids()):
        raise InvariantViolation(
            f"training region labeled with non-seen category {roi_category_id}"
        )
    return build_image_mask(category_ids, vocab, {roi_category_id}, neg_category_ids)


def _unit_rows(table) -> torch.Tensor:
    if isinstance(table, TextEmbeddingTable):
        # normalized in float64; callers cast to the working dtype
        return torch.from_numpy(table.unit_vectors(np.float64))
    t = torch.as_tensor(table)
    norms = torch.linalg.vector_norm(t, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ZeroNormVector("text embedding row with zero norm")
    return t / norms


def similarity_logits(v: torch.Tensor, table, tau: float) -> torch.Tensor:
    """(1/tau) times the cosine between v and every category text vector.

    v: (..., d_t). Returns (..., C) with entries bounded by 1/tau.
    """
    if tau <= 0:
        raise InvariantViolation("tau must be positive")
    t_hat = _unit_rows(table).to(v.dtype)
    norms = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ZeroNormVector("cannot normalize a zero vector for similarity logits")
    v_hat = v / norms
    cos = (v_hat @ t_hat.T).clamp(-1.0, 1.0)
    return cos / tau


def _smoothed_bce(logits: torch.Tensor, hard_targets: torch.Tensor,
                  eps: float) -> torch.Tensor:
    targets = (1.0 - eps) * hard_targets + eps / 2.0
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="mean")


def bce_image_loss(logits: torch.Tensor, mask, eps: float = 0.0) -> torch.Tensor:
    """Smoothed BCE averaged over the non-ignored categories of one image.

    Returns 0 when every category is ignored (callers flag that case).
    """
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.long)
    valid = mask_t != IGNORE
    if not valid.any():
        return logits.sum() * 0.0
    idx = valid.nonzero(as_tuple=True)[0]
    hard = (mask_t[idx] == POSITIVE).to(logits.dtype)
    return _smoothed_bce(logits[idx], hard, eps)


def bce_roi_loss(roi_logits: torch.Tensor, roi_masks, eps: float = 0.0) -> torch.Tensor:
    """Smoothed BCE jointly averaged over regions x non-ignored categories."""
    if roi_logits.ndim != 2 or roi_logits.shape[0] == 0:
        raise EmptyBatch("region loss needs at least one region")
    mask_t = torch.as_tensor(np.asarray(roi_masks), dtype=torch.long)
    if mask_t.shape != roi_logits.shape:
        raise InvariantViolation(
            f"mask shape {tuple(mask_t.shape)} != logits shape {tuple(roi_logits.shape)}"
        )
    valid = mask_t != IGNORE
    if not valid.any():
        return roi_logits.sum() * 0.0
    hard = (mask_t[valid] == POSITIVE).to(roi_logits.dtype)
    return _smoothed_bce(roi_logits[valid], hard, eps)


def cosine_distill_loss(v: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """1 - cosine(v, m), averaged over leading dimensions; range [0, 2]."""
    v_norm = torch.linalg.vector_norm(v, dim=-1)
    m_norm = torch.linalg.vector_norm(m, dim=-1)
    if (v_norm == 0).any() or (m_norm == 0).any():
        raise ZeroNormVector("cosine distillation needs nonzero-norm vectors")
    cos = ((v * m).sum(dim=-1) / (v_norm * m_norm)).clamp(-1.0, 1.0)
    return (1.0 - cos).mean()


@dataclass
class LossBreakdown:
    """Per-term loss values for one batch, plus bookkeeping flags."""

    l_img: torch.Tensor
    l_roi: torch.Tensor
    l_ckd: torch.Tensor
    l_pkd: torch.Tensor
    total: torch.Tensor
    n_rois: int = 0
    n_empty_image_masks: int = 0
    n_images_without_rois: int = 0

    def detached(self) -> dict:
        return {
            "l_img": float(self.l_img.detach()), "l_roi": float(self.l_roi.detach()),
            "l_ckd": float(self.l_ckd.detach()), "l_pkd": float(self.l_pkd.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(l_img, l_roi, l_ckd, l_pkd, lambda1: float, lambda2: float):
    """Combined objective: classification terms plus weighted distillation."""
    return l_img + l_roi + lambda1 * l_ckd + lambda2 * l_pkd


@dataclass
class ImageSample:
    """One training image: bundle tensors plus supervision targets.

    ``image_mask`` is (C,) and ``roi_masks`` (B, C), both aligned to the
    category order of the text table used at training time.
    """

    g: torch.Tensor
    r: torch.Tensor
    p: torch.Tensor
    m_img: torch.Tensor
    image_mask: np.ndarray
    roi_boxes: tuple = ()
    roi_masks: Optional[np.ndarray] = None
    grid: tuple[int, int] = (14, 14)


def compute_losses(model, samples: Sequence[ImageSample], table,
                   cfg: TrainConfig) -> LossBreakdown:
    """Forward a batch of image samples and evaluate every objective term.

    One encoder forward serves all terms. Region vectors are pooled from
    encoder-space patch vectors with the configured ROI mode and mapped
    into text space afterwards (for the averaging modes the order does not
    matter; the map is linear).
    """
    if len(samples) == 0:
        raise EmptyBatch("cannot compute losses on an empty batch")
    t_hat = _unit_rows(table)
    g = torch.stack([s.g for s in samples])
    r = torch.stack([s.r for s in samples])
    p = torch.stack([s.p for s in samples])
    v_cls, v_patch = model(g, r, p)
    z_cls = model.text_space(v_cls)

    logits_img = similarity_logits(z_cls, t_hat, cfg.tau)
    img_terms = []
    n_empty = 0
    for i, s in enumerate(samples):
        if (np.asarray(s.image_mask) != IGNORE).any():
            img_terms.append(bce_image_loss(logits_img[i], s.image_mask,
                                            cfg.label_smoothing))
        else:
            n_empty += 1
    zero = v_cls.sum() * 0.0
    l_img = torch.stack(img_terms).mean() if img_terms else zero

    h, w = samples[0].grid
    roi_vecs, roi_mask_rows = [], []
    n_images_without = 0
    for i, s in enumerate(samples):
        if len(s.roi_boxes) == 0:
            n_images_without += 1
            continue
        grid_i = v_patch[i].reshape(h, w, -1)
        roi_vecs.append(model.text_space(pool_rois(grid_i, s.roi_boxes, cfg.roi_mode)))
        roi_mask_rows.append(np.asarray(s.roi_masks))
    if roi_vecs:
        roi_logits = similarity_logits(torch.cat(roi_vecs), t_hat, cfg.tau)
        l_roi = bce_roi_loss(roi_logits, np.concatenate(roi_mask_rows),
                             cfg.label_smoothing)
        n_rois = roi_logits.shape[0]
    else:
        l_roi = zero
        n_rois = 0

    m = torch.stack([s.m_img for s in samples])
    l_ckd = cosine_distill_loss(z_cls, m)
    z_patch_mean = model.text_space(v_patch.mean(dim=1))
    l_pkd = cosine_distill_loss(z_patch_mean, m)

    total = total_loss(l_img, l_roi, l_ckd, l_pkd, cfg.lambda1, cfg.lambda2)
    return LossBreakdown(
        l_img=l_img, l_roi=l_roi, l_ckd=l_ckd, l_pkd=l_pkd, total=total,
        n_rois=n_rois, n_empty_image_masks=n_empty,
        n_images_without_rois=n_images_without,
    )
