#!/usr/bin/env python3
"""Drive the whole synthetic workflow through the command-line interface.

Generates a world, trains a refiner on the train split, refines the
validation detections, evaluates base and refined results, and prints the
delta. Every step shells out to the `detrefine` entry point, so this also
smoke-tests the CLI contract end to end: run manifests, the probability
sidecar, and the evaluation/compare report round-trip.

Usage: python3 scripts/synthetic_pipeline.py [--out DIR] [--epochs 30] ...
"""

import argparse
import os
import shlex
import subprocess
import sys
import tempfile


def cli(*args) -> None:
    argv = [str(a) for a in args]
    print("\n$ detrefine " + " ".join(shlex.quote(a) for a in argv), flush=True)
    subprocess.run([sys.executable, "-m", "detrefine.cli"] + argv, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="working directory (default: temp)")
    ap.add_argument("--d", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--ema-decay", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0, help="world generator seed")
    ap.add_argument("--weights", default="0.8,0.1,0.1")
    args = ap.parse_args()

    out = args.out or tempfile.mkdtemp(prefix="detrefine_pipeline_")
    world = os.path.join(out, "world")
    ckpt = os.path.join(out, "refiner.drck")
    refined = os.path.join(out, "refined_val.json")
    report_base = os.path.join(out, "report_base.json")
    report_refined = os.path.join(out, "report_refined.json")

    cli("synth", "--out", world, "--seed", args.seed)

    cli("train",
        "--features", os.path.join(world, "features_train.drfc"),
        "--annotations", os.path.join(world, "annotations_train.json"),
        "--text-emb", os.path.join(world, "text_embeddings.drte"),
        "--out", ckpt, "--quiet",
        "--d", args.d, "--epochs", args.epochs,
        "--batch-size", args.batch_size, "--ema-decay", args.ema_decay)

    cli("inspect", ckpt)

    cli("refine",
        "--ckpt", ckpt,
        "--features", os.path.join(world, "features_val.drfc"),
        "--detections", os.path.join(world, "detections_val.json"),
        "--text-emb", os.path.join(world, "text_embeddings.drte"),
        "--annotations", os.path.join(world, "annotations_val.json"),
        "--weights", args.weights,
        "--out", refined)

    for name, det_path in (("base", os.path.join(world, "detections_val.json")),
                           ("refined", refined)):
        cli("evaluate",
            "--annotations", os.path.join(world, "annotations_val.json"),
            "--detections", det_path,
            "--groups", "split",
            "--out", os.path.join(out, f"report_{name}.json"))

    cli("compare", "--baseline", report_base, "--candidate", report_refined)
    print(f"\nartifacts kept in {out}")


if __name__ == "__main__":
    main()
