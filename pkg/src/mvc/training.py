"""Losses, Adam, augmentation, the epoch loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import metrics
from .autodiff import Tape, Tensor
from .errors import NumericError, ShapeError
from .model import MODES, MvcModel, forward, param_group, predictions_from
from .patching import AnnotatedImage, clamp_box, patch_labels, rasterize_boxes, rasterize_patch_mask

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_flip: bool = True
    augment_affine: bool = True
    augment_jitter: bool = True
    mode: str = "full"
    seed: int = 0
    val_fraction: float = 0.1
    freeze_backbone: bool = False
    eval_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


@dataclass
class LossBreakdown:
    image_loss: float
    patch_loss: float
    total: float
    patch_count: int


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def image_loss(probs: Tensor, labels) -> Tensor:
    """Cross-entropy ``-log P(y)`` averaged over any leading batch axes."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    C = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside the class set of size {C}")
    batch = probs.data.size // C
    if labels.size != batch:
        raise ShapeError(f"{labels.size} labels for {batch} distributions")
    onehot = np.zeros((batch, C), dtype=probs.dtype)
    onehot[np.arange(batch), labels] = 1
    logp = ad.log(ad.clip_min(probs, LOG_CLAMP))
    picked = ad.sum(ad.mul(logp, Tensor(onehot.reshape(probs.shape))))
    return ad.affine(picked, scale=-1.0 / batch)


def patch_loss(probs: Tensor, targets) -> Tensor:
    """Binary cross-entropy summed over patches, averaged over leading batch axes."""
    t = np.asarray(targets, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ShapeError(f"patch targets {t.shape} do not match probabilities {probs.shape}")
    batch = probs.data.size // probs.shape[-1]
    log_pos = ad.log(ad.clip_min(probs, LOG_CLAMP))
    log_neg = ad.log(ad.clip_min(ad.affine(probs, scale=-1.0, shift=1.0), LOG_CLAMP))
    ll = ad.add(ad.mul(log_pos, Tensor(t)), ad.mul(log_neg, Tensor(1 - t)))
    return ad.affine(ad.sum(ll), scale=-1.0 / batch)


def combine_losses(img: Tensor | None, patch: Tensor | None, n_patches: int) -> Tensor:
    """``image + patch / N``; a missing term contributes 0."""
    if n_patches <= 0:
        raise ValueError("patch count must be positive")
    terms = []
    if img is not None:
        terms.append(img)
    if patch is not None:
        terms.append(ad.affine(patch, scale=1.0 / n_patches))
    if not terms:
        raise ValueError("no loss terms")
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


def total_loss(image_value: float, patch_value: float, n_patches: int, mode: str = "full") -> LossBreakdown:
    if n_patches <= 0:
        raise ValueError("patch count must be positive")
    img = 0.0 if mode == "patch" else image_value
    pat = 0.0 if mode == "image" else patch_value
    img, pat = float(img), float(pat)
    return LossBreakdown(img, pat, img + pat / n_patches, n_patches)


def batch_loss(model: MvcModel, pixels: np.ndarray, labels, targets, mode: str):
    """Forward a batch and build the training objective for ``mode``."""
    out = forward(model, pixels, mode)
    img = image_loss(out.image_probs, labels) if mode != "patch" else None
    pat = patch_loss(out.patch_probs, targets) if mode != "image" else None
    total = combine_losses(img, pat, model.config.num_patches)
    breakdown = LossBreakdown(
        image_loss=float(img.data) if img is not None else 0.0,
        patch_loss=float(pat.data) if pat is not None else 0.0,
        total=float(total.data),
        patch_count=model.config.num_patches,
    )
    return out, total, breakdown


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters absent from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p -= update.astype(p.dtype, copy=False)
    return params, state


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


def hflip(image: AnnotatedImage) -> AnnotatedImage:
    n = image.size
    boxes = tuple((n - x - w, y, w, h) for x, y, w, h in image.boxes)
    return AnnotatedImage(image.pixels[:, ::-1].copy(), image.label, boxes, image.name)


def affine(image: AnnotatedImage, angle: float = 0.0, translate=(0.0, 0.0), scale: float = 1.0) -> AnnotatedImage:
    """Rotate (degrees; positive turns clockwise on screen), scale and shift about the centre.

    Boxes become the axis-aligned hull of their mapped corners, clamped to the image.
    """
    n = image.size
    th = math.radians(angle)
    cos, sin = math.cos(th), math.sin(th)
    tx, ty = translate
    # forward map in (x, y): p' = c + s R (p - c) + t
    fwd = scale * np.array([[cos, -sin], [sin, cos]])
    # ndimage works in (row, col) = (y, x) and needs the inverse map
    fwd_rc = fwd[::-1, ::-1]
    inv_rc = np.linalg.inv(fwd_rc)
    c = (n - 1) / 2
    offset = np.array([c, c]) - inv_rc @ (np.array([c + ty, c + tx]))
    if angle == 0 and scale == 1 and tx == 0 and ty == 0:
        pixels = image.pixels.copy()
    else:
        pixels = ndimage.affine_transform(image.pixels, inv_rc, offset=offset, order=1, mode="constant", cval=0.0)

    boxes = []
    half = n / 2  # centre in pixel-edge coordinates
    for x, y, w, h in image.boxes:
        corners = np.array([[x, y], [x + w, y], [x, y + h], [x + w, y + h]], dtype=np.float64)
        mapped = (corners - half) @ fwd.T + half + np.array([tx, ty])
        x0, y0 = np.floor(mapped.min(axis=0) + 1e-9)
        x1, y1 = np.ceil(mapped.max(axis=0) - 1e-9)
        box = clamp_box((int(x0), int(y0), int(x1 - x0), int(y1 - y0)), n)
        if box[2] > 0 and box[3] > 0:
            boxes.append(box)
    return AnnotatedImage(np.clip(pixels, 0, 1), image.label, tuple(boxes), image.name)


def jitter(image: AnnotatedImage, brightness: float = 0.0, contrast: float = 1.0) -> AnnotatedImage:
    x = image.pixels
    mean = x.mean()
    out = np.clip((x - mean) * contrast + mean + brightness, 0.0, 1.0)
    return AnnotatedImage(out.astype(x.dtype), image.label, image.boxes, image.name)


def augment_sample(image: AnnotatedImage, rng: np.random.Generator, flip: bool = True,
                   use_affine: bool = True, use_jitter: bool = True) -> AnnotatedImage:
    """Each enabled transform fires independently with probability 0.5."""
    # draw every coin and parameter regardless of toggles so streams stay aligned
    coins = rng.random(3) < 0.5
    angle = rng.uniform(-10, 10)
    shift = rng.uniform(-0.05, 0.05, size=2) * image.size
    scale = rng.uniform(0.9, 1.1)
    bright = rng.uniform(-0.1, 0.1)
    contrast = rng.uniform(0.8, 1.2)
    out = image
    if flip and coins[0]:
        out = hflip(out)
    if use_affine and coins[1]:
        out = affine(out, angle, tuple(shift), scale)
    if use_jitter and coins[2]:
        out = jitter(out, bright, contrast)
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def trainable_groups(mode: str, freeze_backbone: bool = False) -> tuple[str, ...]:
    groups = {
        "full": ("backbone", "patch_head", "attention", "image_head"),
        "image": ("backbone", "attention", "image_head"),
        # the single-task patch variant keeps attention and image heads frozen
        "patch": ("backbone", "patch_head"),
    }[mode]
    if freeze_backbone:
        groups = tuple(g for g in groups if g != "backbone")
    return groups


def split_indices(count: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(count)
    n_val = int(round(count * val_fraction)) if count > 1 else 0
    n_val = min(n_val, count - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainResult:
    model: MvcModel
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


def train(model: MvcModel, dataset: Sequence[AnnotatedImage], config: TrainConfig,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place and return it with step and epoch records."""
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = model.config
    n, m, N = cfg.image_size, cfg.patch_size, cfg.num_patches
    for im in dataset:
        if im.size != n:
            raise ShapeError(f"image {im.name!r} is {im.size}px, model expects {n}px")

    result = TrainResult(model)

    def emit(rec):
        if rec["record"] == "step":
            result.steps.append(rec)
        else:
            result.history.append(rec)
        if on_record is not None:
            on_record(rec)

    train_idx, val_idx = split_indices(len(dataset), config.val_fraction, config.seed)
    groups = trainable_groups(config.mode, config.freeze_backbone)
    names = [k for k in model.params if param_group(k) in groups]
    state = AdamState()
    augment = config.augment_flip or config.augment_affine or config.augment_jitter
    base_targets = [patch_labels(im.boxes, n, m) for im in dataset]

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            images, targets = [], []
            for i in idx:
                im = dataset[i]
                if augment:
                    im = augment_sample(im, sample_rng(config.seed, epoch, int(i)), config.augment_flip,
                                        config.augment_affine, config.augment_jitter)
                    targets.append(patch_labels(im.boxes, n, m))
                else:
                    targets.append(base_targets[i])
                images.append(im.pixels)
            pixels = np.stack(images)
            labels = np.array([dataset[i].label for i in idx])

            for t in model.params.values():
                t.grad = None
            with Tape() as tape:
                _, total, lb = batch_loss(model, pixels, labels, np.stack(targets), config.mode)
            if not math.isfinite(lb.total):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            ad.backward(tape, total)
            params = {k: model.params[k].data for k in names}
            grads = {k: model.params[k].grad for k in names if model.params[k].grad is not None}
            try:
                adam_step(params, grads, state, config)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch} batch {b}") from exc

            sums += (lb.image_loss, lb.patch_loss, lb.total)
            emit({"record": "step", "epoch": epoch, "batch": b, "image_loss": lb.image_loss,
                  "patch_loss": lb.patch_loss, "total": lb.total, "patch_count": N})

        n_batches = max(1, math.ceil(len(order) / config.batch_size))
        rec = {"record": "epoch", "epoch": epoch, "split": "train_steps",
               "image_loss": float(sums[0] / n_batches), "patch_loss": float(sums[1] / n_batches),
               "total": float(sums[2] / n_batches)}
        emit(rec)
        last = epoch == config.epochs - 1
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            for split, idx in (("train", train_idx), ("val", val_idx)):
                if len(idx) == 0:
                    continue
                report, lb = evaluate_with_loss(model, [dataset[i] for i in idx], config.mode)
                emit({"record": "epoch", "epoch": epoch, "split": split, "image_loss": lb.image_loss,
                      "patch_loss": lb.patch_loss, "total": lb.total, **summary_metrics(report)})
        log.info("epoch %d mean loss %.5f", epoch, rec["total"])
    return result


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(model: MvcModel, dataset: Sequence[AnnotatedImage], mode: str = "full",
             batch_size: int = 32) -> metrics.MetricsReport:
    return evaluate_with_loss(model, dataset, mode, batch_size)[0]


def evaluate_with_loss(model: MvcModel, dataset: Sequence[AnnotatedImage], mode: str = "full",
                       batch_size: int = 32) -> tuple[metrics.MetricsReport, LossBreakdown]:
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = model.config
    n, m, N = cfg.image_size, cfg.patch_size, cfg.num_patches
    preds, img_sum, pat_sum = [], 0.0, 0.0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        pixels = np.stack([im.pixels for im in chunk])
        labels = np.array([im.label for im in chunk])
        targets = np.stack([patch_labels(im.boxes, n, m) for im in chunk])
        out, _, lb = batch_loss(model, pixels, labels, targets, mode)
        img_sum += lb.image_loss * len(chunk)
        pat_sum += lb.patch_loss * len(chunk)
        preds.extend(predictions_from(out))
    lb = total_loss(img_sum / len(dataset), pat_sum / len(dataset), N, mode)

    classes = model.classes
    C = len(classes)
    true = np.array([im.label for im in dataset])
    report = metrics.MetricsReport(classes=tuple(classes), counts=np.bincount(true, minlength=C).tolist())
    if mode != "patch":
        confusion, per_class, overall, _ = metrics.confusion_and_accuracy(
            true, [p.image_label for p in preds], C)
        report.confusion = confusion.tolist()
        report.per_class_accuracy = [float(v) for v in per_class]
        report.overall_accuracy = overall
    if mode != "image":
        per_class_scores = {}
        pooled = ([], [], [], [])
        for c in range(C):
            members = [i for i, im in enumerate(dataset) if im.label == c]
            if not any(dataset[i].boxes for i in members):
                continue  # box-free classes carry no region ground truth
            t_flags, p_flags, scores, jac = [], [], [], []
            for i in members:
                im, pr = dataset[i], preds[i]
                gt = patch_labels(im.boxes, n, m)
                t_flags.append(gt)
                p_flags.append(pr.patch_labels)
                scores.append(pr.patch_probs)
                jac.append(metrics.jaccard_similarity(rasterize_patch_mask(n, pr.patch_labels, m),
                                                      rasterize_boxes(im.boxes, n)))
            for acc, vals in zip(pooled, (t_flags, p_flags, scores, jac)):
                acc.extend(vals)
            per_class_scores[classes[c]] = metrics.region_scores(
                np.concatenate(t_flags), np.concatenate(p_flags), np.concatenate(scores), jac)
        report.region_per_class = per_class_scores
        if pooled[0]:
            report.region_pooled = metrics.region_scores(
                np.concatenate(pooled[0]), np.concatenate(pooled[1]), np.concatenate(pooled[2]), pooled[3])
        else:
            report.region_pooled = metrics.RegionScores()
        report.region_macro = metrics.macro(list(per_class_scores.values()))
    return report, lb


def summary_metrics(report: metrics.MetricsReport) -> dict:
    out = {"accuracy": report.overall_accuracy}
    if report.region_pooled is not None:
        r = report.region_pooled
        out.update(f1=r.f1, au_roc=r.au_roc, au_pr=r.au_pr, jaccard=r.jaccard)
    return out
