"""Command line entry point: synth, train, refine, evaluate, compare, inspect.

Every command validates all of its inputs before writing anything, writes
outputs atomically (temp file + rename), and drops a JSON run manifest next
to its primary output recording the command, the resolved config, sha256
digests of the inputs, the tool version, the seed, and timestamps.
Config precedence everywhere: CLI flag > config file > built-in default.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from datetime import datetime, timezone

from . import __version__
from .errors import BadMagic, DetRefineError
from .evaluation import DEFAULT_IOU_THRESHOLDS, EvalConfig, EvalReport, compare, evaluate
from .scoring import refine_image
from .store import (
    load_annotations,
    load_cache,
    load_detections,
    read_cache_header,
    read_text_embeddings,
    read_text_embeddings_header,
)
from .synthetic import SyntheticSpec, generate
from .types import FusionConfig, TrainConfig

EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3


class UsageError(Exception):
    """Bad flag combination or malformed flag value."""


# --- plumbing -------------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _write_bytes_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json_atomic(path: str, obj, indent=2) -> None:
    payload = json.dumps(obj, indent=indent, sort_keys=True) + "\n"
    _write_bytes_atomic(path, payload.encode("utf-8"))


class RunManifest:
    """Provenance record written next to every output artifact."""

    def __init__(self, command: str, config: dict, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = {}
        self.outputs = []
        self.started = _utc_now()

    def add_input(self, path) -> None:
        if path is not None:
            self.inputs[str(path)] = _sha256(str(path))

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, path: str) -> None:
        _write_json_atomic(path, {
            "command": self.command,
            "tool_version": __version__,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "started": self.started,
            "finished": _utc_now(),
        })


def _check_distinct(inputs, outputs) -> None:
    resolved_in = {os.path.abspath(p) for p in inputs if p is not None}
    seen = set()
    for p in outputs:
        a = os.path.abspath(p)
        if a in resolved_in:
            raise UsageError(f"output path {p} would overwrite an input")
        if a in seen:
            raise UsageError(f"output path {p} used twice")
        seen.add(a)


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _resolve_config(cls, file_cfg: dict, args, names) -> dict:
    """Defaults < config file < explicitly passed CLI flags."""
    resolved = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    unknown = set(file_cfg) - set(resolved)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved.update(file_cfg)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    return resolved


def _sidecar_path(out: str) -> str:
    base = out[:-5] if out.endswith(".json") else out
    return base + ".sidecar.json"


_TRAIN_FLAGS = {
    "d": int, "n_layers": int, "n_heads": int, "mlp_ratio": int,
    "tau": float, "lambda1": float, "lambda2": float,
    "label_smoothing": float, "lr": float, "weight_decay": float,
    "epochs": int, "batch_size": int, "ema_decay": float, "seed": int,
    "roi_mode": str, "grad_clip": float,
}


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.spec)
    overrides = {k: getattr(args, k) for k in ("seed", "n_train", "n_val")
                 if getattr(args, k) is not None}
    spec = SyntheticSpec.from_dict({**file_cfg, **overrides})
    manifest = RunManifest("synth", spec.to_dict(), seed=spec.seed)
    manifest.add_input(args.spec)

    os.makedirs(args.out, exist_ok=True)
    paths = generate(spec, args.out)
    for name in sorted(paths):
        manifest.add_output(paths[name])
        print(f"{name}={paths[name]}")
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    return 0


def cmd_train(args) -> int:
    from .training import fit, prepare_training_data
    from .encoder import save_checkpoint

    resolved = _resolve_config(TrainConfig, _load_config_file(args.config),
                               args, _TRAIN_FLAGS)
    cfg = TrainConfig.from_dict(resolved)
    inputs = [args.features, args.annotations, args.text_emb, args.config]
    outputs = [args.out, args.out + ".manifest.json"]
    if args.log:
        outputs.append(args.log)
    _check_distinct(inputs, outputs)

    manifest = RunManifest("train", cfg.to_dict(), seed=cfg.seed)
    for p in inputs:
        manifest.add_input(p)

    table = read_text_embeddings(args.text_emb)
    annotations = load_annotations(args.annotations, format=args.format)
    bundles = load_cache(args.features)
    samples = prepare_training_data(bundles, annotations, table)

    lines = []

    def log(line: str) -> None:
        lines.append(line)
        if not args.quiet:
            print(line)

    ckpt = fit(samples, table, cfg, log=log)

    tmp = args.out + ".part"
    save_checkpoint(tmp, ckpt)
    os.replace(tmp, args.out)
    manifest.add_output(args.out)
    if args.log:
        _write_bytes_atomic(args.log, ("\n".join(lines) + "\n").encode("utf-8"))
        manifest.add_output(args.log)
    manifest.write(args.out + ".manifest.json")
    return 0


def cmd_refine(args) -> int:
    from .encoder import load_checkpoint

    try:
        fusion = FusionConfig.parse(args.weights)
    except (ValueError, DetRefineError) as err:
        raise UsageError(f"bad --weights {args.weights!r}: {err}") from err
    sidecar = _sidecar_path(args.out)
    inputs = [args.ckpt, args.features, args.detections, args.text_emb,
              args.annotations]
    outputs = [args.out, sidecar, args.out + ".manifest.json"]
    _check_distinct(inputs, outputs)

    manifest = RunManifest("refine", {
        "weights": list(fusion.as_tuple()), "use_ema": not args.no_ema,
    })
    for p in inputs:
        manifest.add_input(p)

    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model(use_ema=not args.no_ema)
    table = read_text_embeddings(args.text_emb)
    annotations = load_annotations(args.annotations, format=args.format)
    bundles = load_cache(args.features)
    det_map, skipped = load_detections(args.detections, annotations.image_sizes)

    results = []
    extras = []
    for image_id in sorted(det_map, key=str):
        refined = refine_image(bundles[image_id], det_map[image_id], model,
                               table, fusion)
        for det in refined.detections:
            bbox = list(det.pixel_bbox)
            results.append({
                "image_id": image_id,
                "category_id": det.category_id,
                "bbox": bbox,
                "score": det.p_final,
            })
            extras.append({
                "image_id": image_id,
                "category_id": det.category_id,
                "bbox": bbox,
                "p_det": det.p_det,
                "p_cls": det.p_cls,
                "p_roi": det.p_roi,
                "p_final": det.p_final,
            })

    _write_json_atomic(args.out, results, indent=None)
    _write_json_atomic(sidecar, extras, indent=None)
    manifest.add_output(args.out)
    manifest.add_output(sidecar)
    manifest.write(args.out + ".manifest.json")
    if skipped:
        print(f"skipped {skipped} degenerate input boxes", file=sys.stderr)
    print(f"refined {len(results)} detections over {len(det_map)} images")
    return 0


_GROUP_MODES = {"freq": "lvis_freq", "split": "ovd_split", "none": "none"}


def cmd_evaluate(args) -> int:
    if args.iou_thresholds is None:
        thresholds = DEFAULT_IOU_THRESHOLDS
    else:
        try:
            thresholds = tuple(float(x) for x in args.iou_thresholds.split(","))
        except ValueError as err:
            raise UsageError(f"bad --iou-thresholds: {err}") from err
    cfg = EvalConfig(iou_thresholds=thresholds,
                     max_dets_per_image=args.max_dets,
                     group_mode=_GROUP_MODES[args.groups])
    inputs = [args.annotations, args.detections]
    outputs = [args.out, args.out + ".manifest.json"] if args.out else []
    _check_distinct(inputs, outputs)

    manifest = RunManifest("evaluate", cfg.to_dict())
    for p in inputs:
        manifest.add_input(p)

    annotations = load_annotations(args.annotations, format=args.mode)
    det_map, skipped = load_detections(args.detections, annotations.image_sizes)
    report = evaluate(annotations,
                      [det_map[i] for i in sorted(det_map, key=str)], cfg)

    if skipped:
        print(f"skipped {skipped} degenerate input boxes", file=sys.stderr)
    print(report.to_text())
    if args.out:
        _write_json_atomic(args.out, report.to_dict())
        manifest.add_output(args.out)
        manifest.write(args.out + ".manifest.json")
    return 0


def cmd_compare(args) -> int:
    inputs = [args.baseline, args.candidate]
    outputs = [args.out, args.out + ".manifest.json"] if args.out else []
    _check_distinct(inputs, outputs)

    manifest = RunManifest("compare", {})
    for p in inputs:
        manifest.add_input(p)

    with open(args.baseline) as f:
        base = EvalReport.from_dict(json.load(f))
    with open(args.candidate) as f:
        cand = EvalReport.from_dict(json.load(f))
    delta = compare(base, cand)

    print(delta.to_text())
    if args.out:
        _write_json_atomic(args.out, delta.to_dict())
        manifest.add_output(args.out)
        manifest.write(args.out + ".manifest.json")
    return 0


def cmd_inspect(args) -> int:
    from .encoder import read_checkpoint_meta

    for path in args.paths:
        with open(path, "rb") as f:
            magic = f.read(4)
        lines = []
        if magic == b"DRFC":
            header = read_cache_header(path)
            lines += [f"  {k}={v}" for k, v in dataclasses.asdict(header).items()]
        elif magic == b"DRTE":
            lines += [f"  {k}={v}"
                      for k, v in read_text_embeddings_header(path).items()]
        elif magic == b"DRCK":
            meta = read_checkpoint_meta(path)
            lines.append(f"  grid={tuple(meta['grid'])}")
            lines += [f"  {k}={v}" for k, v in sorted(meta["dims"].items())]
            lines += [f"  {k}={v}" for k, v in sorted(meta["config"].items())]
        else:
            raise BadMagic(f"{path}: unrecognized magic {magic!r}")
        print(f"{path}:")
        for line in lines:
            print(line)
    return 0


# --- parser and dispatch ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detrefine",
        description="Post-hoc confidence refinement for open-vocabulary "
                    "detectors: train a small encoder over cached backbone "
                    "features and recalibrate detection scores.")
    parser.add_argument("--version", action="version",
                        version=f"detrefine {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the refinement encoder")
    p.add_argument("--features", required=True, help="feature cache (.drfc)")
    p.add_argument("--annotations", required=True)
    p.add_argument("--text-emb", required=True, help="text embedding table (.drte)")
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--out", required=True, help="checkpoint path (.drck)")
    p.add_argument("--format", choices=("coco", "lvis"), default="coco",
                   help="annotation dialect (negative-label semantics)")
    p.add_argument("--log", help="also write the step log to this file")
    p.add_argument("--quiet", action="store_true", help="suppress step log on stdout")
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="recalibrate detection scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--detections", required=True, help="COCO results JSON")
    p.add_argument("--text-emb", required=True)
    p.add_argument("--annotations", required=True,
                   help="annotation JSON supplying image sizes")
    p.add_argument("--format", choices=("coco", "lvis"), default="coco")
    p.add_argument("--weights", default="0.8,0.1,0.1",
                   help="fusion weights w_det,w_cls,w_roi")
    p.add_argument("--no-ema", action="store_true",
                   help="score with raw weights instead of the EMA shadow")
    p.add_argument("--out", required=True, help="refined COCO results JSON")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="average-precision report")
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--mode", choices=("coco", "lvis"), default="coco",
                   help="annotation dialect")
    p.add_argument("--max-dets", type=int, default=300,
                   help="per-image detection cap")
    p.add_argument("--groups", choices=sorted(_GROUP_MODES), default="none",
                   help="report AP per frequency group or per seen/unseen split")
    p.add_argument("--iou-thresholds",
                   help="comma-separated list (default 0.50:0.05:0.95)")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="delta between two evaluation reports")
    p.add_argument("--baseline", required=True, help="report JSON")
    p.add_argument("--candidate", required=True, help="report JSON")
    p.add_argument("--out", help="also write the deltas as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="print binary artifact headers")
    p.add_argument("paths", nargs="+", help=".drfc/.drte/.drck files")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"UsageError: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DetRefineError as err:
        print(f"InputError: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            json.JSONDecodeError, UnicodeDecodeError) as err:
        print(f"InputError: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as err:  # pragma: no cover - last-resort guard
        print(f"InternalError: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
