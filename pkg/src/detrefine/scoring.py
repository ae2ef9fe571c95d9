"""Inference-time score refinement.

A single encoder forward per image yields one scene-level class vector and
a patch grid. Per-category scene scores come from the class vector; each
candidate box gets a region score from its pooled patch vector. Fused
scores replace the detector's confidence; boxes and labels are untouched.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import torch

from .encoder import DetRefiner
from .errors import InvariantViolation, MissingCategoryEmbedding
from .losses import similarity_logits
from .roi import pool_rois
from .tokens import bundle_tensors
from .types import Box, Detection, DetectionSet, FeatureBundle, FusionConfig, \
    TextEmbeddingTable, box_iou


def fuse(p_det: float, p_cls: float, p_roi: float, fusion: FusionConfig) -> float:
    """Convex combination of the three probability cues."""
    for name, v in (("p_det", p_det), ("p_cls", p_cls), ("p_roi", p_roi)):
        if not (0.0 <= v <= 1.0):
            raise InvariantViolation(f"{name} {v} outside [0, 1]")
    return fusion.w_d * p_det + fusion.w_c * p_cls + fusion.w_p * p_roi


@dataclass(frozen=True)
class RefinedDetection:
    """A base detection plus the semantic cues and the fused score."""

    box: Box
    category_id: int
    p_det: float
    p_cls: float
    p_roi: float
    p_final: float
    pixel_bbox: Optional[Tuple[float, float, float, float]] = None

    def __post_init__(self) -> None:
        for name in ("p_det", "p_cls", "p_roi", "p_final"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvariantViolation(f"{name} {v} outside [0, 1]")


@dataclass(frozen=True)
class RefinedDetectionSet:
    """Refined detections for one image, in the base detector's order.

    ``class_scores`` caches the per-category scene score so downstream
    consumers can inspect it even when the image had no detections.
    """

    image_id: object
    detections: Tuple[RefinedDetection, ...]
    class_scores: Dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.detections)


def refine_image(bundle: FeatureBundle, dets: DetectionSet, model: DetRefiner,
                 table: TextEmbeddingTable,
                 fusion: FusionConfig = FusionConfig()) -> RefinedDetectionSet:
    """Recalibrate every detection on one image with one encoder forward.

    The scene score P_cls is computed once per category and shared by all
    boxes of that category; the region score P_roi is per box. Output
    order and cardinality match the input exactly.
    """
    for det in dets.detections:
        if det.category_id not in table:
            raise MissingCategoryEmbedding(
                f"no text embedding for category id {det.category_id}")
    dtype = next(model.parameters()).dtype
    g, r, p, _ = bundle_tensors(bundle, dtype)
    with torch.no_grad():
        v_cls, v_patch = model(g[None], r[None], p[None])
        z_cls = model.text_space(v_cls)[0]
        p_cls_all = torch.sigmoid(similarity_logits(z_cls, table, model.cfg.tau))
        class_scores = {
            cid: float(p_cls_all[i]) for i, cid in enumerate(table.category_ids)
        }
        refined = []
        if len(dets) > 0:
            h, w = model.grid
            grid_vecs = v_patch[0].reshape(h, w, -1)
            boxes = [det.box for det in dets.detections]
            pooled = pool_rois(grid_vecs, boxes, model.cfg.roi_mode)
            z_roi = model.text_space(pooled)
            p_roi_all = torch.sigmoid(similarity_logits(z_roi, table, model.cfg.tau))
            for i, det in enumerate(dets.detections):
                p_cls = class_scores[det.category_id]
                p_roi = float(p_roi_all[i, table.row(det.category_id)])
                refined.append(RefinedDetection(
                    box=det.box, category_id=det.category_id, p_det=det.p_det,
                    p_cls=p_cls, p_roi=p_roi,
                    p_final=fuse(det.p_det, p_cls, p_roi, fusion),
                    pixel_bbox=det.pixel_bbox,
                ))
    return RefinedDetectionSet(dets.image_id, tuple(refined), class_scores)


def refine_all(bundles, det_sets: Sequence[DetectionSet], model: DetRefiner,
               table: TextEmbeddingTable,
               fusion: FusionConfig = FusionConfig()) -> list:
    """Refine a batch of images, skipping none; bundles keyed by image id."""
    out = []
    for dets in det_sets:
        out.append(refine_image(bundles[dets.image_id], dets, model, table, fusion))
    return out


def classwise_nms(dets: RefinedDetectionSet, score_thresh: float = 0.3,
                  iou_thresh: float = 0.3) -> RefinedDetectionSet:
    """Greedy per-category suppression for visualization and reports.

    Boxes below ``score_thresh`` are dropped; the rest are processed by
    descending fused score (ties broken by input position) and a box is
    suppressed when it overlaps an already-kept box of the same category
    with IoU strictly above ``iou_thresh``. Survivors keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets.detections[i].p_final, i))
    kept_by_cat: Dict[int, list] = {}
    kept_idx = set()
    for i in order:
        det = dets.detections[i]
        if det.p_final < score_thresh:
            continue
        anchors = kept_by_cat.setdefault(det.category_id, [])
        if any(box_iou(det.box, kept.box) > iou_thresh for kept in anchors):
            continue
        anchors.append(det)
        kept_idx.add(i)
    survivors = tuple(d for i, d in enumerate(dets.detections) if i in kept_idx)
    return RefinedDetectionSet(dets.image_id, survivors, dict(dets.class_scores))
