"""Ingestion and persistence: binary feature caches, text-embedding tables,
COCO/LVIS annotation files, detector result files, and prompt grouping.

Binary layouts are little-endian with explicit headers so corruption is
detectable before any record is yielded. Readers are safe for concurrent
use once open; writers need exclusive access to the target file.
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DegenerateBox,
    InvariantViolation,
    SchemaError,
    TruncatedRecord,
    UnknownCategory,
    VersionUnsupported,
)
from .types import (
    Box,
    CategoryEntry,
    CategoryVocabulary,
    Detection,
    DetectionSet,
    FeatureBundle,
    TextEmbeddingTable,
    normalize_box,
    validate_bundle,
)

FEATURE_MAGIC = b"DRFC"
TEXT_MAGIC = b"DRTE"
FORMAT_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIIIIIIIIIQ")   # magic, version, d_g..d_t, n_reg, n_patch, grid_h, grid_w, count
_TEXT_HEADER = struct.Struct("<4sIIQ")             # magic, version, d_t, count
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")


@dataclass(frozen=True)
class FeatureCacheHeader:
    d_g: int
    d_r: int
    d_p: int
    d_t: int
    n_registers: int = 4
    n_patches: int = 196
    grid_h: int = 14
    grid_w: int = 14
    record_count: int = 0

    def __post_init__(self) -> None:
        if self.n_registers != 4:
            raise InvariantViolation("feature cache requires exactly 4 register tokens")
        if self.n_patches != self.grid_h * self.grid_w:
            raise InvariantViolation("n_patches must equal grid_h * grid_w")

    @property
    def record_payload_bytes(self) -> int:
        floats = self.d_g + self.n_registers * self.d_r + self.n_patches * self.d_p + self.d_t
        return 4 * floats


def _read_exact(f: IO[bytes], n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedRecord(f"file truncated while reading {what}")
    return buf


def _check_magic(f: IO[bytes], magic: bytes) -> None:
    got = f.read(4)
    if len(got) < 4 or got != magic:
        raise BadMagic(f"expected magic {magic!r}, got {got!r}")


def _write_f32(f: IO[bytes], arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(f: IO[bytes], shape: tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape))
    buf = _read_exact(f, 4 * n, what)
    return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)


# --- feature cache ("DRFC") -----------------------------------------------------

def write_cache(path, bundles: Iterable[FeatureBundle]) -> FeatureCacheHeader:
    """Write bundles to a DRFC cache; all bundles must share one shape."""
    bundles = list(bundles)
    if not bundles:
        raise InvariantViolation("cannot write an empty feature cache")
    first = bundles[0]
    validate_bundle(first)
    header = FeatureCacheHeader(
        d_g=first.d_g, d_r=first.d_r, d_p=first.d_p, d_t=first.d_t,
        n_patches=first.p.shape[0], grid_h=first.grid[0], grid_w=first.grid[1],
        record_count=len(bundles),
    )
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(
            FEATURE_MAGIC, FORMAT_VERSION,
            header.d_g, header.d_r, header.d_p, header.d_t,
            header.n_registers, header.n_patches, header.grid_h, header.grid_w,
            header.record_count,
        ))
        for b in bundles:
            validate_bundle(b)
            if (b.d_g, b.d_r, b.d_p, b.d_t) != (header.d_g, header.d_r, header.d_p, header.d_t) \
                    or b.p.shape[0] != header.n_patches:
                raise InvariantViolation(f"bundle {b.image_id!r} disagrees with cache header dims")
            ident = str(b.image_id).encode("utf-8")
            f.write(_U32.pack(len(ident)))
            f.write(ident)
            _write_f32(f, b.g)
            _write_f32(f, b.r)
            _write_f32(f, b.p)
            _write_f32(f, b.m_img)
    return header


def read_cache_header(path) -> FeatureCacheHeader:
    with open(path, "rb") as f:
        return _parse_feature_header(f)


def _parse_feature_header(f: IO[bytes]) -> FeatureCacheHeader:
    _check_magic(f, FEATURE_MAGIC)
    buf = _read_exact(f, _FEATURE_HEADER.size - 4, "feature cache header")
    version, d_g, d_r, d_p, d_t, n_reg, n_patch, gh, gw, count = struct.unpack(
        "<IIIIIIIIIQ", buf
    )
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"feature cache version {version} unsupported")
    if n_reg != 4:
        raise InvariantViolation("header declares n_registers != 4")
    if n_patch != gh * gw:
        raise InvariantViolation("header n_patches disagrees with grid")
    return FeatureCacheHeader(d_g, d_r, d_p, d_t, n_reg, n_patch, gh, gw, count)


def _scan_records(f: IO[bytes], header: FeatureCacheHeader) -> None:
    """Walk record offsets to reject truncated files before yielding anything."""
    payload = header.record_payload_bytes
    for i in range(header.record_count):
        buf = f.read(4)
        if len(buf) != 4:
            raise TruncatedRecord(f"record {i}: missing image id length")
        (id_len,) = _U32.unpack(buf)
        here = f.seek(0, 1)
        end = f.seek(0, 2)
        if end - here < id_len + payload:
            raise TruncatedRecord(f"record {i}: payload shorter than header dims imply")
        f.seek(here + id_len + payload)
    if f.read(1):
        raise InvariantViolation("trailing bytes after final record")


def read_cache(path) -> Iterator[FeatureBundle]:
    """Stream bundles from a DRFC cache (structure is validated up front)."""
    with open(path, "rb") as f:
        header = _parse_feature_header(f)
        data_start = f.seek(0, 1)
        _scan_records(f, header)
        f.seek(data_start)
        grid = (header.grid_h, header.grid_w)
        for i in range(header.record_count):
            (id_len,) = _U32.unpack(_read_exact(f, 4, f"record {i} id length"))
            image_id = _read_exact(f, id_len, f"record {i} id").decode("utf-8")
            g = _read_f32(f, (header.d_g,), "g")
            r = _read_f32(f, (header.n_registers, header.d_r), "r")
            p = _read_f32(f, (header.n_patches, header.d_p), "p")
            m = _read_f32(f, (header.d_t,), "m_img")
            yield FeatureBundle(image_id=image_id, g=g, r=r, p=p, m_img=m, grid=grid)


def load_cache(path) -> dict[str, FeatureBundle]:
    """Read a whole cache into memory keyed by string image id."""
    return {b.image_id: b for b in read_cache(path)}


# --- text embedding table ("DRTE") ----------------------------------------------

def write_text_embeddings(path, table: TextEmbeddingTable) -> None:
    with open(path, "wb") as f:
        f.write(_TEXT_HEADER.pack(TEXT_MAGIC, FORMAT_VERSION, table.d_t, len(table)))
        for cid, vec in zip(table.category_ids, table.vectors):
            f.write(_I64.pack(cid))
            _write_f32(f, vec)


def read_text_embeddings_header(path) -> dict:
    """Cheap header peek: d_t and row count without loading the payload."""
    with open(path, "rb") as f:
        _check_magic(f, TEXT_MAGIC)
        buf = _read_exact(f, _TEXT_HEADER.size - 4, "text table header")
        version, d_t, count = struct.unpack("<IIQ", buf)
        if version != FORMAT_VERSION:
            raise VersionUnsupported(f"text table version {version} unsupported")
    return {"d_t": d_t, "categories": count}


def read_text_embeddings(path) -> TextEmbeddingTable:
    with open(path, "rb") as f:
        _check_magic(f, TEXT_MAGIC)
        buf = _read_exact(f, _TEXT_HEADER.size - 4, "text table header")
        version, d_t, count = struct.unpack("<IIQ", buf)
        if version != FORMAT_VERSION:
            raise VersionUnsupported(f"text table version {version} unsupported")
        here = f.seek(0, 1)
        end = f.seek(0, 2)
        expected = count * (8 + 4 * d_t)
        if end - here != expected:
            raise TruncatedRecord(
                f"text table payload is {end - here} bytes, header implies {expected}"
            )
        f.seek(here)
        ids = []
        vecs = np.empty((count, d_t), dtype=np.float32)
        for i in range(count):
            (cid,) = _I64.unpack(_read_exact(f, 8, f"category id {i}"))
            ids.append(cid)
            vecs[i] = _read_f32(f, (d_t,), f"embedding {i}")
    return TextEmbeddingTable(ids, vecs)   # zero-norm rows rejected here


# --- category name preprocessing and prompt grouping ----------------------------

def normalize_category_name(raw: str) -> str:
    """Lowercase, map '_'/'-' to spaces, drop parentheses, collapse whitespace."""
    s = raw.lower().replace("_", " ").replace("-", " ")
    s = s.replace("(", "").replace(")", "")
    return re.sub(r"\s+", " ", s).strip()


@dataclass(frozen=True)
class PromptGroup:
    group_index: int
    category_ids: tuple[int, ...]
    prompt_text: str


def build_prompt_groups(vocab: CategoryVocabulary, group_size: int = 40) -> list[PromptGroup]:
    """Partition the vocabulary (ascending category id) into fixed-size prompt groups.

    All groups except possibly the last hold exactly ``group_size`` names;
    each prompt joins normalized names with ". " and ends with ".".
    """
    if len(vocab) == 0:
        raise InvariantViolation("cannot group an empty vocabulary")
    if group_size <= 0:
        raise InvariantViolation("group_size must be positive")
    by_id = sorted(vocab.entries, key=lambda e: e.category_id)
    groups = []
    for gi in range(math.ceil(len(by_id) / group_size)):
        chunk = by_id[gi * group_size:(gi + 1) * group_size]
        text = ". ".join(e.normalized_name for e in chunk) + "."
        groups.append(PromptGroup(
            group_index=gi,
            category_ids=tuple(e.category_id for e in chunk),
            prompt_text=text,
        ))
    return groups


# --- annotations -----------------------------------------------------------------

_LVIS_FREQ = {"r": "rare", "c": "common", "f": "frequent"}


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    category_id: int
    ignore: bool = False   # crowd regions: may absorb detections, never count as misses


@dataclass
class AnnotationSet:
    """Parsed annotation file: vocabulary, image sizes, and per-image truth."""

    vocab: CategoryVocabulary
    image_sizes: dict            # image_id -> (width, height)
    gt_boxes: dict               # image_id -> list[GroundTruthBox]
    positive_labels: dict        # image_id -> set of category ids with >= 1 annotation
    neg_category_ids: Optional[dict] = None    # image_id -> set (LVIS only)
    not_exhaustive: dict = field(default_factory=dict)  # image_id -> set

    def image_ids(self) -> list:
        return list(self.image_sizes.keys())


def load_annotations(path, format: str = "coco") -> AnnotationSet:
    """Parse a COCO-schema annotation file.

    ``format="lvis"`` additionally reads per-image ``neg_category_ids`` /
    ``not_exhaustive_category_ids`` and maps category ``frequency`` codes
    onto frequency groups; rare categories default to the unseen split.
    """
    if format not in ("coco", "lvis"):
        raise SchemaError(f"unknown annotation format {format!r}")
    with open(path) as f:
        raw = json.load(f)
    for key in ("images", "annotations", "categories"):
        if key not in raw or not isinstance(raw[key], list):
            raise SchemaError(f"annotation file missing {key!r} array")

    entries = []
    for c in raw["categories"]:
        if "id" not in c or "name" not in c:
            raise SchemaError(f"category record missing id/name: {c}")
        freq = "none"
        split = c.get("split")
        if format == "lvis":
            code = c.get("frequency")
            if code not in _LVIS_FREQ:
                raise SchemaError(f"LVIS category {c['id']} has bad frequency {code!r}")
            freq = _LVIS_FREQ[code]
            if split is None:
                split = "unseen" if freq == "rare" else "seen"
        elif c.get("frequency") in _LVIS_FREQ:
            freq = _LVIS_FREQ[c["frequency"]]
        entries.append(CategoryEntry(
            category_id=int(c["id"]),
            raw_name=str(c["name"]),
            normalized_name=normalize_category_name(str(c["name"])),
            split=split or "seen",
            freq_group=freq,
        ))
    vocab = CategoryVocabulary(tuple(entries))
    known = set(vocab.ids())

    image_sizes, gt_boxes, positives = {}, {}, {}
    neg_ids = {} if format == "lvis" else None
    not_exhaustive = {}
    for im in raw["images"]:
        for key in ("id", "width", "height"):
            if key not in im:
                raise SchemaError(f"image record missing {key!r}: {im}")
        iid = im["id"]
        image_sizes[iid] = (float(im["width"]), float(im["height"]))
        gt_boxes[iid] = []
        positives[iid] = set()
        if neg_ids is not None:
            negs = set(int(c) for c in im.get("neg_category_ids", []))
            if not negs <= known:
                raise UnknownCategory(f"image {iid}: neg_category_ids outside vocabulary")
            neg_ids[iid] = negs
        ne = set(int(c) for c in im.get("not_exhaustive_category_ids", []))
        if ne:
            not_exhaustive[iid] = ne

    for ann in raw["annotations"]:
        for key in ("image_id", "category_id", "bbox"):
            if key not in ann:
                raise SchemaError(f"annotation missing {key!r}: {ann}")
        iid = ann["image_id"]
        if iid not in image_sizes:
            raise SchemaError(f"annotation references unknown image id {iid}")
        cid = int(ann["category_id"])
        if cid not in known:
            raise UnknownCategory(f"annotation references unknown category id {cid}")
        x, y, w, h = ann["bbox"]
        iw, ih = image_sizes[iid]
        try:
            box = normalize_box((x, y, x + w, y + h), iw, ih)
        except DegenerateBox as e:
            raise SchemaError(f"degenerate ground-truth bbox on image {iid}: {e}") from e
        gt_boxes[iid].append(GroundTruthBox(
            box=box, category_id=cid, ignore=bool(ann.get("iscrowd", 0)),
        ))
        positives[iid].add(cid)

    return AnnotationSet(
        vocab=vocab,
        image_sizes=image_sizes,
        gt_boxes=gt_boxes,
        positive_labels=positives,
        neg_category_ids=neg_ids,
        not_exhaustive=not_exhaustive,
    )


# --- detection results -----------------------------------------------------------

def load_detections(path, image_sizes: Mapping) -> tuple[dict, int]:
    """Read a COCO-results JSON into per-image DetectionSets.

    Scores are clamped to [0, 1]; degenerate boxes are skipped (counted,
    not fatal; zero-threshold dumps routinely contain junk boxes).
    Returns (image_id -> DetectionSet, skipped_count).
    """
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise SchemaError("detection results must be a JSON array")
    per_image: dict = {}
    skipped = 0
    for rec in raw:
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in rec:
                raise SchemaError(f"detection record missing {key!r}: {rec}")
        iid = rec["image_id"]
        if iid not in image_sizes:
            raise SchemaError(f"detection references unknown image id {iid}")
        x, y, w, h = rec["bbox"]
        iw, ih = image_sizes[iid]
        try:
            box = normalize_box((x, y, x + w, y + h), iw, ih)
        except DegenerateBox:
            skipped += 1
            continue
        score = min(max(float(rec["score"]), 0.0), 1.0)
        per_image.setdefault(iid, []).append(Detection(
            box=box,
            category_id=int(rec["category_id"]),
            p_det=score,
            pixel_bbox=(float(x), float(y), float(w), float(h)),
        ))
    return (
        {iid: DetectionSet(image_id=iid, detections=tuple(dets))
         for iid, dets in per_image.items()},
        skipped,
    )


def write_detections(path, sets: Iterable[DetectionSet], image_sizes: Mapping,
                     scores: Optional[Mapping] = None) -> None:
    """Write DetectionSets back to COCO-results JSON.

    ``scores`` optionally maps image_id -> sequence of replacement scores
    (used by the scorer to emit refined confidences).
    """
    out = []
    for ds in sets:
        override = scores.get(ds.image_id) if scores is not None else None
        iw, ih = image_sizes[ds.image_id]
        for i, det in enumerate(ds.detections):
            if det.pixel_bbox is not None:
                bbox = list(det.pixel_bbox)
            else:
                b = det.box
                bbox = [b.x_min * iw, b.y_min * ih,
                        (b.x_max - b.x_min) * iw, (b.y_max - b.y_min) * ih]
            out.append({
                "image_id": ds.image_id,
                "category_id": det.category_id,
                "bbox": bbox,
                "score": float(override[i]) if override is not None else det.p_det,
            })
    with open(path, "w") as f:
        json.dump(out, f)
