#!/usr/bin/env python3
"""Establish the improvement thresholds used by the end-to-end test.

The synthetic world ships with its own generating geometry (world.npz), so
an ideal scorer can be built by unlifting pooled patch features with the
exact orthonormal map and scoring detections against the true category
prototypes. The gap between the base detector's AP and the ideal-fused AP
bounds what any trained refiner can recover; the committed regression test
pins its thresholds at half that gap. This script prints the numbers and,
optionally, where an actually-trained refiner lands between the two.

Usage: python3 scripts/derive_synthetic_margins.py [--train] [--out DIR]
"""

import argparse
import math
import tempfile
import time

import numpy as np
import torch

from detrefine.evaluation import EvalConfig, evaluate
from detrefine.roi import pool_rois
from detrefine.scoring import fuse, refine_image
from detrefine.store import load_annotations, load_cache, load_detections, \
    read_text_embeddings
from detrefine.synthetic import SyntheticSpec, generate
from detrefine.types import Detection, DetectionSet, FusionConfig, TrainConfig


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def ideal_refined_sets(bundles, det_sets, world, fusion, grid, tau=0.03):
    """Re-score detections using the true prototypes and exact unlift."""
    protos = world["prototypes"]
    lift = world["lift"]
    gh, gw = grid
    out = []
    for ds in det_sets:
        bundle = bundles[ds.image_id]
        cells = torch.from_numpy(bundle.p.astype(np.float64)).reshape(gh, gw, -1)
        m = bundle.m_img.astype(np.float64)
        m = m / np.linalg.norm(m)
        cls_cos = protos @ m
        new = []
        for det in ds.detections:
            pooled = pool_rois(cells, [det.box], "align")[0].numpy()
            rec = lift.T @ pooled
            rec = rec / np.linalg.norm(rec)
            k = det.category_id - 1
            p_cls = sigmoid(float(np.clip(cls_cos[k], -1, 1)) / tau)
            p_roi = sigmoid(float(np.clip(protos[k] @ rec, -1, 1)) / tau)
            p_final = fuse(det.p_det, p_cls, p_roi, fusion)
            new.append(Detection(box=det.box, category_id=det.category_id,
                                 p_det=p_final, pixel_bbox=det.pixel_bbox))
        out.append(DetectionSet(ds.image_id, tuple(new)))
    return out


def trained_refined_sets(bundles, det_sets, table, samples, cfg, fusion):
    from detrefine.training import fit
    t0 = time.time()
    ckpt = fit(samples, table, cfg)
    train_secs = time.time() - t0
    model = ckpt.build_model(use_ema=True)
    out = []
    for ds in det_sets:
        refined = refine_image(bundles[ds.image_id], ds, model, table, fusion)
        out.append(DetectionSet(ds.image_id, tuple(
            Detection(box=d.box, category_id=d.category_id, p_det=d.p_final,
                      pixel_bbox=d.pixel_bbox)
            for d in refined.detections)))
    return out, train_secs


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="world directory (default: temp)")
    ap.add_argument("--train", action="store_true",
                    help="also train the real model and report its APs")
    ap.add_argument("--d", type=int, default=128, help="encoder width for --train")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--ema-decay", type=float, default=0.9,
                    help="short-horizon EMA suited to a few hundred steps")
    ap.add_argument("--train-seed", type=int, default=0)
    args = ap.parse_args()

    out_dir = args.out or tempfile.mkdtemp(prefix="detrefine_margins_")
    spec = SyntheticSpec()
    paths = generate(spec, out_dir)
    print(f"world written to {out_dir}")

    anns = load_annotations(paths["annotations_val"], format="coco")
    bundles = load_cache(paths["features_val"])
    det_map, skipped = load_detections(paths["detections_val"], anns.image_sizes)
    det_sets = [det_map[i] for i in sorted(det_map, key=str)]
    cfg_eval = EvalConfig(group_mode="ovd_split")
    fusion = FusionConfig(0.8, 0.1, 0.1)

    base = evaluate(anns, det_sets, cfg_eval)
    world = np.load(paths["world"])
    ideal_sets = ideal_refined_sets(bundles, det_sets, world, fusion, spec.grid)
    ideal = evaluate(anns, ideal_sets, cfg_eval)

    def row(name, rep):
        print(f"{name:<8} ap_all={100 * rep.ap_all:6.2f}  "
              f"novel={100 * rep.groups['novel']:6.2f}  "
              f"base={100 * rep.groups['base']:6.2f}")

    row("base", base)
    row("ideal", ideal)
    gap_all = 100 * (ideal.ap_all - base.ap_all)
    gap_novel = 100 * (ideal.groups["novel"] - base.groups["novel"])
    print(f"gap      ap_all={gap_all:+6.2f}  novel={gap_novel:+6.2f}")
    print(f"half-gap ap_all={gap_all / 2:+6.2f}  novel={gap_novel / 2:+6.2f}")
    print("-> committed margins: floor(half-gap * 10) / 10, clipped below at 5.0")

    if args.train:
        from detrefine.training import prepare_training_data
        table = read_text_embeddings(paths["text_embeddings"])
        train_anns = load_annotations(paths["annotations_train"], format="coco")
        train_bundles = load_cache(paths["features_train"])
        samples = prepare_training_data(train_bundles, train_anns, table)
        cfg = TrainConfig(d=args.d, epochs=args.epochs, batch_size=args.batch_size,
                          ema_decay=args.ema_decay, seed=args.train_seed)
        refined_sets, secs = trained_refined_sets(
            bundles, det_sets, table, samples, cfg, fusion)
        trained = evaluate(anns, refined_sets, cfg_eval)
        row("trained", trained)
        print(f"trained gains: ap_all={100 * (trained.ap_all - base.ap_all):+6.2f} "
              f"novel={100 * (trained.groups['novel'] - base.groups['novel']):+6.2f}")
        print(f"training time: {secs:.1f}s "
              f"(d={args.d}, {args.epochs} epochs, batch {args.batch_size}, "
              f"{len(samples)} images)")


if __name__ == "__main__":
    main()
