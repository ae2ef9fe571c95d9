"""Optimization loop for the refinement encoder.

AdamW with decoupled weight decay, cosine learning-rate decay, an EMA
shadow of the parameters, and fully deterministic fitting given a seed.
Features and text embeddings are pre-extracted; nothing here touches a
backbone.
"""

import math
import os
from dataclasses import dataclass
from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .encoder import Checkpoint, DetRefiner, FeatureDims, ema_apply, make_ema_state
from .errors import (
    DataEmpty,
    DivergenceDetected,
    InvariantViolation,
    NonFiniteActivation,
    NonFiniteGradient,
    ShapeMismatch,
)
from .losses import ImageSample, build_image_mask, build_roi_mask, compute_losses
from .store import AnnotationSet
from .tokens import bundle_tensors
from .types import FeatureBundle, TextEmbeddingTable, TrainConfig

THREADS_ENV = "DETREFINE_THREADS"


def configure_threads() -> int:
    """Pin torch to a fixed CPU thread count for reproducible reductions.

    Reads the DETREFINE_THREADS environment variable, defaulting to 1:
    single-threaded reductions have a fixed summation order, which is what
    makes repeated runs byte-identical.
    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvariantViolation(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n <= 0:
        raise InvariantViolation(f"{THREADS_ENV} must be positive, got {n}")
    torch.set_num_threads(n)
    return n


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if total_steps < 1:
        raise InvariantViolation(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise InvariantViolation(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamWState":
        return cls(
            exp_avg={k: torch.zeros_like(p) for k, p in params.items()},
            exp_avg_sq={k: torch.zeros_like(p) for k, p in params.items()},
            step=0, beta1=beta1, beta2=beta2, eps=eps,
        )


def adamw_step(params: Mapping, grads: Mapping, state: AdamWState,
               lr: float, weight_decay: float) -> AdamWState:
    """One bias-corrected AdamW update, in place on ``params``.

    Weight decay is decoupled: parameters shrink by lr*wd*theta before the
    adaptive step, so decay never enters the moment accumulators.
    """
    if set(params.keys()) != set(grads.keys()):
        raise ShapeMismatch("parameter and gradient names differ")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g is None:
                continue
            if tuple(g.shape) != tuple(p.shape):
                raise ShapeMismatch(
                    f"gradient shape {tuple(g.shape)} != parameter shape "
                    f"{tuple(p.shape)} for {name}"
                )
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for {name}")
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if weight_decay != 0.0:
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return state


def prepare_training_data(bundles: Mapping, annotations: AnnotationSet,
                          table: TextEmbeddingTable,
                          dtype=torch.float32) -> List[ImageSample]:
    """Join cached features with annotations into supervised image samples.

    Region targets come from the annotation boxes themselves: every
    non-crowd box whose category is seen contributes one region whose own
    category is positive. Images present in only one of the two inputs are
    skipped. Distillation targets are unit-normalized here.
    """
    cats = table.category_ids
    vocab = annotations.vocab
    seen = set(vocab.seen_ids())
    samples: List[ImageSample] = []
    neg_map = annotations.neg_category_ids or {}
    for image_id in sorted(bundles.keys(), key=str):
        if image_id not in annotations.image_sizes:
            continue
        bundle: FeatureBundle = bundles[image_id]
        g, r, p, m = bundle_tensors(bundle, dtype)
        m = m / torch.linalg.norm(m)
        negs = neg_map.get(image_id)
        image_mask = build_image_mask(
            cats, vocab, annotations.positive_labels.get(image_id, set()), negs)
        boxes, masks = [], []
        for gt in annotations.gt_boxes.get(image_id, ()):
            if gt.ignore or gt.category_id not in seen:
                continue
            boxes.append(gt.box)
            masks.append(build_roi_mask(cats, vocab, gt.category_id, negs))
        samples.append(ImageSample(
            g=g, r=r, p=p, m_img=m,
            image_mask=image_mask,
            roi_boxes=tuple(boxes),
            roi_masks=np.stack(masks) if masks else None,
            grid=bundle.grid,
        ))
    return samples


def _infer_dims(samples: Sequence[ImageSample], table: TextEmbeddingTable) -> FeatureDims:
    s = samples[0]
    return FeatureDims(
        d_g=int(s.g.shape[-1]), d_r=int(s.r.shape[-1]),
        d_p=int(s.p.shape[-1]), d_t=table.d_t,
    )


def _log_line(step: int, lr: float, detached: Mapping) -> str:
    parts = [f"step={step}", f"lr={lr:.8g}"]
    for key in ("l_img", "l_roi", "l_ckd", "l_pkd", "total"):
        parts.append(f"{key}={detached[key]:.8g}")
    return " ".join(parts)


def fit(samples: Sequence[ImageSample], table: TextEmbeddingTable,
        cfg: TrainConfig, log: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """Train a refiner from scratch on pre-extracted features.

    Deterministic given (seed, config, data): parameter init, the per-epoch
    shuffle, and all reductions are seeded or order-fixed. The EMA shadow
    starts as a copy of the initial parameters and is folded after every
    optimizer step. A NaN loss or gradient aborts with the parameters from
    the last finite step attached to the raised error.
    """
    configure_threads()
    if len(samples) == 0:
        raise DataEmpty("no training samples")
    torch.manual_seed(cfg.seed)
    model = DetRefiner(cfg, _infer_dims(samples, table), grid=samples[0].grid)
    model.train()
    params = model.param_dict()
    opt = AdamWState.init(params)
    ema = make_ema_state(model)
    shuffle_rng = np.random.default_rng(cfg.seed)

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    last_good = Checkpoint.from_model(model, ema)

    step = 0
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [samples[i] for i in idx]
            try:
                breakdown = compute_losses(model, batch, table, cfg)
                diverged = not torch.isfinite(breakdown.total)
            except NonFiniteActivation as exc:
                err = DivergenceDetected(f"non-finite activations at step {step}: {exc}")
                err.checkpoint = last_good
                raise err from exc
            if diverged:
                err = DivergenceDetected(f"non-finite loss at step {step}")
                err.checkpoint = last_good
                raise err
            last_good = Checkpoint.from_model(model, ema)
            model.zero_grad(set_to_none=True)
            breakdown.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            lr = cosine_lr(step, total_steps, cfg.lr)
            grads = {name: p.grad for name, p in params.items()}
            try:
                adamw_step(params, grads, opt, lr, cfg.weight_decay)
            except NonFiniteGradient as exc:
                err = DivergenceDetected(f"non-finite gradient at step {step}: {exc}")
                err.checkpoint = last_good
                raise err from exc
            ema_apply(ema, params, cfg.ema_decay)
            step += 1
            if log is not None:
                log(_log_line(step, lr, breakdown.detached()))
    return Checkpoint.from_model(model, ema)
