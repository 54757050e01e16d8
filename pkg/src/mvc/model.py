"""The composed model: encoder, heads, and the three forward modes.

Modes:

* ``full``  - patch probabilities gate the attention weights before pooling.
* ``image`` - patch classifier bypassed; pooling uses the attention alone.
* ``patch`` - only patch probabilities are produced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import backbone, heads
from .autodiff import Tensor
from .patching import AnnotatedImage, patchify

MODES = ("full", "image", "patch")

GROUPS = ("backbone", "patch_head", "attention", "image_head")

DEFAULT_CLASSES = ("Negative", "Typical", "Atypical", "Indeterminate")


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 4
    num_heads: int = 6
    mlp_ratio: float = 4.0
    hidden: int = 500
    num_classes: int = 4

    @property
    def backbone(self) -> backbone.BackboneConfig:
        return backbone.BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
        )

    @property
    def heads(self) -> heads.HeadConfig:
        return heads.HeadConfig(self.embed_dim, self.hidden, self.num_patches, self.num_classes)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class MvcModel:
    config: ModelConfig
    params: dict[str, Tensor]
    classes: tuple[str, ...] = DEFAULT_CLASSES

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32,
               classes: tuple[str, ...] | None = None) -> "MvcModel":
        config.backbone  # validates geometry
        params = backbone.init_parameters(config.backbone, seed, dtype)
        params.update(heads.init_parameters(config.heads, seed + 1, dtype))
        if classes is None:
            classes = DEFAULT_CLASSES if config.num_classes == 4 else tuple(str(i) for i in range(config.num_classes))
        return cls(config, params, tuple(classes))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def group(self, name: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if param_group(k) == name}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "MvcModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return MvcModel(ModelConfig(**asdict(self.config)), params, self.classes)


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ForwardOutput:
    z: Tensor
    patch_probs: Tensor | None = None
    attention: Tensor | None = None
    fused: Tensor | None = None
    global_rep: Tensor | None = None
    image_probs: Tensor | None = None


def forward(model: MvcModel, pixels, mode: str = "full") -> ForwardOutput:
    """Run a batch of ``(B, n, n)`` images (or one ``(n, n)`` image) through the model."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = model.config
    pixels = np.asarray(pixels, dtype=model.dtype)
    patches = patchify(pixels, cfg.patch_size)
    z = backbone.extract_local_representations(model.params, patches, cfg.backbone)
    out = ForwardOutput(z=z)
    p = model.params
    if mode != "image":
        _, out.patch_probs = heads.patch_classify(p, z)
    if mode == "patch":
        return out
    out.attention = heads.attention_scores(p, z)
    out.fused = out.attention if mode == "image" else heads.fuse_scores(out.attention, out.patch_probs)
    out.global_rep = heads.global_representation(out.fused, z)
    _, out.image_probs = heads.image_classify(p, out.global_rep)
    return out


@dataclass
class MvcPrediction:
    patch_labels: np.ndarray | None = None
    patch_probs: np.ndarray | None = None
    attention: np.ndarray | None = None
    fused_scores: np.ndarray | None = None
    global_rep: np.ndarray | None = None
    image_label: int | None = None
    image_dist: np.ndarray | None = None


def predictions_from(out: ForwardOutput) -> list[MvcPrediction]:
    """Split a batched forward output into per-image predictions."""
    def rows(t):
        return None if t is None else t.data

    pp, att, fu, gr, ip = (rows(t) for t in (out.patch_probs, out.attention, out.fused,
                                             out.global_rep, out.image_probs))
    B = out.z.shape[0]
    preds = []
    for b in range(B):
        pred = MvcPrediction()
        if pp is not None:
            pred.patch_probs = pp[b]
            pred.patch_labels = (pp[b] > 0.5).astype(np.int8)
        if ip is not None:
            pred.attention, pred.fused_scores, pred.global_rep = att[b], fu[b], gr[b]
            pred.image_dist = ip[b]
            pred.image_label = int(np.argmax(ip[b]))
        preds.append(pred)
    return preds


def predict(model: MvcModel, images, mode: str = "full", batch_size: int = 32) -> list[MvcPrediction]:
    """Inference over a list of images or pixel arrays, in batches."""
    arrays = [im.pixels if isinstance(im, AnnotatedImage) else np.asarray(im) for im in images]
    preds = []
    for start in range(0, len(arrays), batch_size):
        batch = np.stack(arrays[start:start + batch_size])
        preds.extend(predictions_from(forward(model, batch, mode)))
    return preds


def mvc_forward(model: MvcModel, image: AnnotatedImage, mode: str = "full") -> MvcPrediction:
    return predictions_from(forward(model, image.pixels[None], mode))[0]


def params_from_state(state: Mapping[str, np.ndarray], dtype=np.float32) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True) for k, v in state.items()}


def zero_grads(model: MvcModel) -> None:
    for t in model.params.values():
        t.grad = None
