"""Detection evaluation: AP@[0.5:0.95] with group breakdowns.

Greedy per-category matching against ground truth, 101-point interpolated
average precision, a per-image detection cap, and report comparison. The
group summaries follow either the frequency buckets (rare/common/frequent)
or the open-vocabulary split (novel/base).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigMismatch, InvariantViolation
from .store import AnnotationSet, GroundTruthBox
from .types import Box, CategoryVocabulary, Detection, DetectionSet, box_iou

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
GROUP_MODES = ("lvis_freq", "ovd_split", "none")
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_dets_per_image: int = 300
    group_mode: str = "none"

    def __post_init__(self) -> None:
        ts = self.iou_thresholds
        if len(ts) == 0:
            raise InvariantViolation("need at least one IoU threshold")
        if any(not (0.0 <= t <= 1.0) for t in ts):
            raise InvariantViolation("IoU thresholds must lie in [0, 1]")
        if any(a >= b for a, b in zip(ts, ts[1:])):
            raise InvariantViolation("IoU thresholds must be strictly increasing")
        if self.max_dets_per_image < 1:
            raise InvariantViolation("max_dets_per_image must be >= 1")
        if self.group_mode not in GROUP_MODES:
            raise InvariantViolation(f"unknown group_mode {self.group_mode!r}")

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "max_dets_per_image": self.max_dets_per_image,
            "group_mode": self.group_mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalConfig":
        return cls(iou_thresholds=tuple(d["iou_thresholds"]),
                   max_dets_per_image=int(d["max_dets_per_image"]),
                   group_mode=str(d["group_mode"]))


def match_image(gts: Sequence[GroundTruthBox], dets: Sequence,
                iou_thresh: float) -> List[Tuple[float, str]]:
    """Greedy matching of one image's same-category boxes at one threshold.

    ``dets`` are (box, score) pairs in score-descending order. Each
    detection takes the unmatched non-ignore ground truth with the highest
    IoU >= threshold (first best wins ties); failing that, an ignore box
    may absorb it, removing it from scoring entirely. Returns one
    (score, outcome) per detection with outcome in {"tp", "fp", "ign"};
    ignore boxes never count as ground truth and may absorb repeatedly.
    """
    matched = [False] * len(gts)
    out = []
    for box, score in dets:
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if gt.ignore or matched[j]:
                continue
            iou = box_iou(box, gt.box)
            if iou < iou_thresh or iou <= best_iou:
                continue
            best, best_iou = j, iou
        if best is not None:
            matched[best] = True
            out.append((score, "tp"))
        elif any(gt.ignore and box_iou(box, gt.box) >= iou_thresh for gt in gts):
            out.append((score, "ign"))
        else:
            out.append((score, "fp"))
    return out


def interpolated_ap(outcomes: Sequence[Tuple[float, str]], n_gt: int) -> float:
    """101-point interpolated AP from score-sorted detection outcomes."""
    if n_gt == 0:
        raise InvariantViolation("AP undefined without ground truth")
    scored = [(s, o) for s, o in outcomes if o != "ign"]
    if not scored:
        return 0.0
    tp = np.cumsum([1.0 if o == "tp" else 0.0 for _, o in scored])
    fp = np.cumsum([1.0 if o == "fp" else 0.0 for _, o in scored])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    pts = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(pts.mean())


def match_and_ap(gts_by_image: Mapping, dets_by_image: Mapping,
                 iou_thresh: float) -> float:
    """AP at one threshold for one category across a set of images.

    ``gts_by_image`` maps image_id to GroundTruthBox lists and
    ``dets_by_image`` to (box, score) lists; detections are matched
    per image and pooled in global score order.
    """
    outcomes = []
    n_gt = 0
    for image_id in sorted(gts_by_image.keys() | dets_by_image.keys(), key=str):
        gts = list(gts_by_image.get(image_id, ()))
        n_gt += sum(1 for g in gts if not g.ignore)
        dets = sorted(dets_by_image.get(image_id, ()),
                      key=lambda bs: -bs[1])
        outcomes.extend(match_image(gts, dets, iou_thresh))
    outcomes.sort(key=lambda so: -so[0])
    return interpolated_ap(outcomes, n_gt)


@dataclass(frozen=True)
class EvalReport:
    """Mean AP over thresholds, overall and per group/category."""

    ap_all: float
    groups: Dict[str, float]
    per_category: Dict[int, float]
    n_images: int
    n_detections: int
    config: EvalConfig
    category_ids: Tuple[int, ...] = ()
    notes: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "ap_all": self.ap_all,
            "groups": dict(self.groups),
            "per_category": {str(k): v for k, v in self.per_category.items()},
            "n_images": self.n_images,
            "n_detections": self.n_detections,
            "config": self.config.to_dict(),
            "category_ids": list(self.category_ids),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            ap_all=float(d["ap_all"]),
            groups={str(k): float(v) for k, v in d["groups"].items()},
            per_category={int(k): float(v) for k, v in d["per_category"].items()},
            n_images=int(d["n_images"]),
            n_detections=int(d["n_detections"]),
            config=EvalConfig.from_dict(d["config"]),
            category_ids=tuple(int(c) for c in d["category_ids"]),
            notes=tuple(d.get("notes", ())),
        )

    def to_text(self) -> str:
        lines = [f"AP_all      {100 * self.ap_all:6.2f}"]
        for name, val in self.groups.items():
            lines.append(f"AP_{name:<9}{100 * val:6.2f}")
        lines.append(f"images      {self.n_images}")
        lines.append(f"detections  {self.n_detections}")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def _group_members(vocab: CategoryVocabulary, mode: str) -> Dict[str, set]:
    if mode == "lvis_freq":
        names = ("rare", "common", "frequent")
        return {n: {e.category_id for e in vocab.entries if e.freq_group == n}
                for n in names}
    if mode == "ovd_split":
        return {
            "novel": {e.category_id for e in vocab.entries if e.split == "unseen"},
            "base": {e.category_id for e in vocab.entries if e.split == "seen"},
        }
    return {}


def _cap_per_image(dets: Sequence[Detection], limit: int) -> List[Detection]:
    if len(dets) <= limit:
        return list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].p_det, i))[:limit]
    return [dets[i] for i in sorted(order)]


def evaluate(annotations: AnnotationSet, det_sets: Sequence[DetectionSet],
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score detections against annotations under the configured protocol.

    Detections beyond the per-image cap are dropped by score; detections
    of categories flagged not-exhaustively-annotated on an image are
    dropped at ingestion. Per-category AP is the mean over the IoU
    thresholds; only categories with at least one countable ground-truth
    box are summarized.
    """
    vocab = annotations.vocab
    known = set(vocab.ids())
    by_image = {ds.image_id: ds for ds in det_sets}
    unknown_images = [i for i in by_image if i not in annotations.image_sizes]
    if unknown_images:
        raise InvariantViolation(
            f"detections reference unknown image ids: {unknown_images[:3]}")

    gts_by_cat: Dict[int, dict] = {}
    for image_id, gts in annotations.gt_boxes.items():
        for gt in gts:
            gts_by_cat.setdefault(gt.category_id, {}).setdefault(image_id, []).append(gt)

    dets_by_cat: Dict[int, dict] = {}
    n_kept = 0
    for image_id in sorted(by_image.keys(), key=str):
        ds = by_image[image_id]
        skip_cats = annotations.not_exhaustive.get(image_id, set())
        capped = _cap_per_image(ds.detections, cfg.max_dets_per_image)
        for det in capped:
            if det.category_id not in known or det.category_id in skip_cats:
                continue
            dets_by_cat.setdefault(det.category_id, {}) \
                .setdefault(image_id, []).append((det.box, det.p_det))
            n_kept += 1

    per_category: Dict[int, float] = {}
    for cid in sorted(known):
        cat_gts = gts_by_cat.get(cid, {})
        n_countable = sum(1 for gl in cat_gts.values() for g in gl if not g.ignore)
        if n_countable == 0:
            continue
        aps = [match_and_ap(cat_gts, dets_by_cat.get(cid, {}), t)
               for t in cfg.iou_thresholds]
        per_category[cid] = float(np.mean(aps))

    notes = []
    if not per_category:
        raise InvariantViolation("no category has countable ground truth")
    ap_all = float(np.mean(list(per_category.values())))
    groups: Dict[str, float] = {}
    for name, members in _group_members(vocab, cfg.group_mode).items():
        vals = [ap for cid, ap in per_category.items() if cid in members]
        if vals:
            groups[name] = float(np.mean(vals))
        else:
            notes.append(f"group {name} empty: no category with ground truth")
    return EvalReport(
        ap_all=ap_all, groups=groups, per_category=per_category,
        n_images=len(annotations.image_sizes), n_detections=n_kept,
        config=cfg, category_ids=tuple(sorted(per_category)), notes=tuple(notes),
    )


@dataclass(frozen=True)
class DeltaReport:
    """Metric-by-metric difference between two evaluation reports."""

    base: EvalReport
    refined: EvalReport
    deltas: Dict[str, float]
    missing: Tuple[str, ...] = ()

    def to_text(self) -> str:
        lines = []
        for key, d in self.deltas.items():
            b = self.base.groups.get(key, self.base.ap_all if key == "ap_all" else None)
            r = self.refined.groups.get(key, self.refined.ap_all if key == "ap_all" else None)
            lines.append(f"{key:<12}{100 * b:6.2f} -> {100 * r:6.2f}  ({100 * d:+.2f})")
        for key in self.missing:
            lines.append(f"{key:<12}present in only one report, omitted")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"deltas": dict(self.deltas), "missing": list(self.missing)}


def compare(base: EvalReport, refined: EvalReport) -> DeltaReport:
    """Per-metric gains of a refined run over its base run."""
    if base.config != refined.config:
        raise ConfigMismatch("reports come from different evaluation configs")
    if base.category_ids != refined.category_ids:
        raise ConfigMismatch("reports cover different category sets")
    deltas = {"ap_all": refined.ap_all - base.ap_all}
    missing = []
    for key in sorted(set(base.groups) | set(refined.groups)):
        if key in base.groups and key in refined.groups:
            deltas[key] = refined.groups[key] - base.groups[key]
        else:
            missing.append(key)
    return DeltaReport(base=base, refined=refined, deltas=deltas,
                       missing=tuple(missing))
