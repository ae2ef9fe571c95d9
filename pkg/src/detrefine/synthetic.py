"""Deterministic synthetic world for end-to-end pipeline tests.

Categories are unit prototypes in a small teacher space (unseen ones are
blends of seen prototypes, mirroring how novel concepts overlap known
vocabulary); patch features are those prototypes lifted into the backbone
feature space by a fixed orthonormal map, plus noise. The bundled "base detector" emits every
ground-truth box but miscalibrates scores: a fraction of true positives
are suppressed to low confidence while spurious background boxes receive
mid-to-high confidence. Everything is reproducible from one seed.
"""

import json
import os
from dataclasses import dataclass, fields
from typing import Dict, List, Tuple

import numpy as np

from .errors import SpecInvalid
from .store import write_cache, write_detections, write_text_embeddings
from .types import FeatureBundle, TextEmbeddingTable

CELL_PX = 32


@dataclass(frozen=True)
class SyntheticSpec:
    n_categories: int = 12
    n_unseen: int = 3
    n_rare: int = 3
    n_train: int = 128
    n_val: int = 64
    objects_per_image: Tuple[int, int] = (2, 5)
    noise_std: float = 0.05
    fp_rate: float = 0.3
    tp_suppress_rate: float = 0.2
    fp_slots_per_image: int = 14
    seed: int = 0
    d_t: int = 32
    d_feat: int = 64
    grid: Tuple[int, int] = (14, 14)
    clean_score: float = 0.95
    suppressed_score_range: Tuple[float, float] = (0.25, 0.55)
    fp_score_range: Tuple[float, float] = (0.45, 0.99)

    def __post_init__(self) -> None:
        if self.n_categories < 2:
            raise SpecInvalid("need at least two categories")
        if not (0 <= self.n_unseen < self.n_categories):
            raise SpecInvalid("unseen categories must leave at least one seen")
        if self.n_unseen > 0 and self.n_categories - self.n_unseen < 2:
            raise SpecInvalid("unseen prototypes blend two seen ones; need two seen categories")
        if not (0 <= self.n_rare <= self.n_categories):
            raise SpecInvalid("n_rare outside [0, n_categories]")
        if self.n_train < 1 or self.n_val < 1:
            raise SpecInvalid("need at least one image per split")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise SpecInvalid(f"bad objects_per_image range {self.objects_per_image}")
        for name in ("fp_rate", "tp_suppress_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise SpecInvalid(f"{name} {v} outside [0, 1]")
        if self.fp_slots_per_image < 0:
            raise SpecInvalid("fp_slots_per_image must be nonnegative")
        if self.noise_std < 0:
            raise SpecInvalid("noise_std must be nonnegative")
        if self.d_t < 2 or self.d_feat < self.d_t:
            raise SpecInvalid("need 2 <= d_t <= d_feat for the orthonormal lift")
        if min(self.grid) < 4:
            raise SpecInvalid("grid too small for cell-aligned objects")
        for name in ("suppressed_score_range", "fp_score_range"):
            a, b = getattr(self, name)
            if not (0.0 <= a <= b <= 1.0):
                raise SpecInvalid(f"bad {name} {getattr(self, name)}")
        if not (0.0 <= self.clean_score <= 1.0):
            raise SpecInvalid("clean_score outside [0, 1]")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecInvalid(f"unknown synthetic spec keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_world(spec: SyntheticSpec, rng: np.random.Generator):
    """Prototypes (one unit vector per category), lift matrix, background.

    Seen categories get independent random unit prototypes. Unseen
    prototypes are positive blends of two seen prototypes: novel concepts
    share semantic directions with base ones, so behaviour learned on the
    base vocabulary has something to transfer to. A fully independent
    unseen direction would never receive supervision (unseen categories
    are ignore-masked during training) and scores along it would be
    arbitrary.

    The lift has orthonormal columns, so teacher-space geometry survives
    into feature space and can be inverted exactly with its transpose.
    The background direction opposes the prototype bundle, keeping empty
    cells dissimilar from every category.
    """
    n_seen = spec.n_categories - spec.n_unseen
    protos = rng.standard_normal((spec.n_categories, spec.d_t))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    for k in range(n_seen, spec.n_categories):
        a, b = rng.choice(n_seen, size=2, replace=False)
        w = rng.uniform(0.35, 0.65)
        protos[k] = _unit(w * protos[a] + (1.0 - w) * protos[b])
    lift, _ = np.linalg.qr(rng.standard_normal((spec.d_feat, spec.d_t)))
    background = -_unit(protos.sum(axis=0))
    return protos.astype(np.float64), lift.astype(np.float64), background


def _category_records(spec: SyntheticSpec) -> List[dict]:
    """Category table: the last n_unseen ids are unseen, last n_rare rare."""
    recs = []
    for k in range(1, spec.n_categories + 1):
        split = "unseen" if k > spec.n_categories - spec.n_unseen else "seen"
        if k > spec.n_categories - spec.n_rare:
            freq = "r"
        elif k % 2 == 0:
            freq = "c"
        else:
            freq = "f"
        recs.append({"id": k, "name": f"thing {k:02d}", "split": split,
                     "frequency": freq})
    return recs


def _place_rects(rng: np.random.Generator, grid: Tuple[int, int], n: int,
                 occupied: np.ndarray, mark: bool = True,
                 max_tries: int = 40) -> List[Tuple[int, int, int, int]]:
    """Sample up to n cell rectangles (y0, x0, y1, x1) avoiding occupied cells.

    With ``mark`` the placed cells are claimed, so the rectangles are
    mutually disjoint; without it they only avoid what was already claimed.
    """
    gh, gw = grid
    rects = []
    for _ in range(n):
        for _ in range(max_tries):
            h = int(rng.integers(2, min(5, gh)))
            w = int(rng.integers(2, min(5, gw)))
            y0 = int(rng.integers(0, gh - h + 1))
            x0 = int(rng.integers(0, gw - w + 1))
            if occupied[y0:y0 + h, x0:x0 + w].any():
                continue
            if mark:
                occupied[y0:y0 + h, x0:x0 + w] = True
            rects.append((y0, x0, y0 + h, x0 + w))
            break
    return rects


def _rect_to_bbox(rect: Tuple[int, int, int, int]) -> List[int]:
    y0, x0, y1, x1 = rect
    return [x0 * CELL_PX, y0 * CELL_PX, (x1 - x0) * CELL_PX, (y1 - y0) * CELL_PX]


def _generate_split(spec: SyntheticSpec, split: str, n_images: int,
                    protos: np.ndarray, lift: np.ndarray, background: np.ndarray,
                    rng: np.random.Generator):
    """One split's bundles, annotation records, and corrupted detections."""
    gh, gw = spec.grid
    bg_cell = lift @ background
    bundles, images, annotations, detections = [], [], [], []
    ann_id = 1
    for i in range(n_images):
        image_id = f"{split}_{i:04d}"
        n_obj = int(rng.integers(spec.objects_per_image[0],
                                 spec.objects_per_image[1] + 1))
        occupied = np.zeros((gh, gw), dtype=bool)
        rects = _place_rects(rng, spec.grid, n_obj, occupied)
        cats = [int(rng.integers(1, spec.n_categories + 1)) for _ in rects]

        cells = np.tile(bg_cell, (gh, gw, 1))
        for rect, cat in zip(rects, cats):
            y0, x0, y1, x1 = rect
            cells[y0:y1, x0:x1] = lift @ protos[cat - 1]
        cells = cells + spec.noise_std * rng.standard_normal(cells.shape)

        present = sorted(set(cats))
        if present:
            m_clean = _unit(protos[[c - 1 for c in present]].mean(axis=0))
        else:
            m_clean = background
        g = lift @ m_clean + spec.noise_std * rng.standard_normal(spec.d_feat)
        r = spec.noise_std * rng.standard_normal((4, spec.d_feat))
        m_img = m_clean + spec.noise_std * rng.standard_normal(spec.d_t)

        bundles.append(FeatureBundle(
            image_id=image_id,
            g=g.astype(np.float32),
            r=r.astype(np.float32),
            p=cells.reshape(gh * gw, spec.d_feat).astype(np.float32),
            m_img=m_img.astype(np.float32),
            grid=spec.grid,
        ))
        images.append({"id": image_id, "width": gw * CELL_PX, "height": gh * CELL_PX})

        for rect, cat in zip(rects, cats):
            annotations.append({
                "id": ann_id, "image_id": image_id, "category_id": cat,
                "bbox": _rect_to_bbox(rect), "iscrowd": 0,
                "area": _rect_to_bbox(rect)[2] * _rect_to_bbox(rect)[3],
            })
            ann_id += 1
            if rng.uniform() < spec.tp_suppress_rate:
                score = float(rng.uniform(*spec.suppressed_score_range))
            else:
                score = spec.clean_score
            detections.append({
                "image_id": image_id, "category_id": cat,
                "bbox": _rect_to_bbox(rect), "score": score,
            })

        # each background slot is independently boosted into a confident
        # spurious box; an unboosted slot emits nothing
        n_fp = int(sum(rng.uniform() < spec.fp_rate
                       for _ in range(spec.fp_slots_per_image)))
        fp_rects = _place_rects(rng, spec.grid, n_fp, occupied, mark=False)
        for rect in fp_rects:
            detections.append({
                "image_id": image_id,
                "category_id": int(rng.integers(1, spec.n_categories + 1)),
                "bbox": _rect_to_bbox(rect),
                "score": float(rng.uniform(*spec.fp_score_range)),
            })
    return bundles, images, annotations, detections


def generate(spec: SyntheticSpec, out_dir) -> Dict[str, str]:
    """Write the full synthetic dataset; returns a name -> path map.

    Files: feature caches and annotation/detection JSON per split, the
    text-embedding table (the prototypes themselves), and a world.npz
    sidecar holding prototypes, lift, and background for ideal-scorer
    experiments.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    protos, lift, background = make_world(spec, rng)
    cat_records = _category_records(spec)

    table = TextEmbeddingTable(
        [c["id"] for c in cat_records], protos.astype(np.float32))

    paths: Dict[str, str] = {}

    def path_of(name: str) -> str:
        return os.path.join(out_dir, name)

    for split_index, (split, n_images) in enumerate(
            (("train", spec.n_train), ("val", spec.n_val))):
        split_rng = np.random.default_rng([spec.seed, 7, split_index])
        bundles, images, annotations, detections = _generate_split(
            spec, split, n_images, protos, lift, background, split_rng)

        cache_path = path_of(f"features_{split}.drfc")
        write_cache(cache_path, bundles)
        paths[f"features_{split}"] = cache_path

        ann_path = path_of(f"annotations_{split}.json")
        with open(ann_path, "w") as f:
            json.dump({"images": images, "annotations": annotations,
                       "categories": cat_records}, f, indent=1, sort_keys=True)
        paths[f"annotations_{split}"] = ann_path

        det_path = path_of(f"detections_{split}.json")
        with open(det_path, "w") as f:
            json.dump(detections, f, indent=1, sort_keys=True)
        paths[f"detections_{split}"] = det_path

    emb_path = path_of("text_embeddings.drte")
    write_text_embeddings(emb_path, table)
    paths["text_embeddings"] = emb_path

    world_path = path_of("world.npz")
    np.savez(world_path, prototypes=protos, lift=lift, background=background)
    paths["world"] = world_path

    spec_path = path_of("spec_resolved.json")
    with open(spec_path, "w") as f:
        json.dump(spec.to_dict(), f, indent=1, sort_keys=True)
    paths["spec"] = spec_path
    return paths
