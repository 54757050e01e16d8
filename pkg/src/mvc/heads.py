"""Patch classifier, per-position attention scorer, score fusion, pooling and
image classifier.

All functions accept local representations with optional leading batch
axes: ``z`` is ``(..., N, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import trunc_normal
from .errors import ShapeError


@dataclass
class HeadConfig:
    embed_dim: int = 384
    hidden: int = 500
    num_patches: int = 196
    num_classes: int = 4


def parameter_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden
    return {
        "patch_head.fc1.weight": (d, h),
        "patch_head.fc1.bias": (h,),
        "patch_head.fc2.weight": (h, 2),
        "patch_head.fc2.bias": (2,),
        "attention.V": (h, d),
        "attention.W": (cfg.num_patches, h),
        "image_head.fc1.weight": (d, h),
        "image_head.fc1.bias": (h,),
        "image_head.fc2.weight": (h, cfg.num_classes),
        "image_head.fc2.bias": (cfg.num_classes,),
    }


def init_parameters(cfg: HeadConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        value = np.zeros(shape) if name.endswith("bias") else trunc_normal(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def _mlp(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    w1 = params[prefix + ".fc1.weight"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {w1.shape[0]}")
    h = ad.relu(ad.add(ad.matmul(x, w1), params[prefix + ".fc1.bias"]))
    logits = ad.add(ad.matmul(h, params[prefix + ".fc2.weight"]), params[prefix + ".fc2.bias"])
    return ad.softmax(logits, axis=-1)


def _as_matrix_input(x: Tensor) -> tuple[Tensor, bool]:
    # matmul needs >= 2 dims; a lone vector is lifted to one row
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def patch_classify(params: Mapping[str, Tensor], z: Tensor) -> tuple[np.ndarray, Tensor]:
    """Return hard patch labels and the positive-class probability per patch."""
    z2, lifted = _as_matrix_input(z)
    q = _mlp(params, "patch_head", z2)
    probs = ad.take(q, 1, axis=-1)
    if lifted:
        probs = ad.reshape(probs, ())
    labels = (probs.data > 0.5).astype(np.int8)
    return labels, probs


def attention_scores(params: Mapping[str, Tensor], z: Tensor) -> Tensor:
    """Softmax over positions of ``w_i . relu(V z_i)`` with a separate ``w_i`` per position."""
    V, W = params["attention.V"], params["attention.W"]
    if z.ndim < 2 or z.shape[-2] != W.shape[0]:
        raise ShapeError(f"attention scorer is built for {W.shape[0]} positions, got input {z.shape}")
    if z.shape[-1] != V.shape[1]:
        raise ShapeError(f"attention scorer expects width {V.shape[1]}, got {z.shape[-1]}")
    hidden = ad.relu(ad.matmul(z, ad.transpose(V)))  # (..., N, h)
    logits = ad.sum(ad.mul(hidden, W), axis=-1)  # (..., N)
    return ad.softmax(logits, axis=-1)


def fuse_scores(a: Tensor, p: Tensor) -> Tensor:
    if a.shape != p.shape:
        raise ShapeError(f"attention {a.shape} and patch probabilities {p.shape} differ in shape")
    return ad.mul(a, p)


def global_representation(weights: Tensor, z: Tensor) -> Tensor:
    """``sum_i weights_i * z_i``; the weights are used as given, without renormalising."""
    if weights.shape != z.shape[:-1]:
        raise ShapeError(f"weights {weights.shape} do not match representations {z.shape}")
    lead, n = weights.shape[:-1], weights.shape[-1]
    row = ad.reshape(weights, lead + (1, n))
    pooled = ad.matmul(row, z)  # (..., 1, d)
    return ad.reshape(pooled, lead + (z.shape[-1],))


def image_classify(params: Mapping[str, Tensor], Z: Tensor) -> tuple[np.ndarray, Tensor]:
    """Return the predicted class index (first index on ties) and the class distribution."""
    Z2, lifted = _as_matrix_input(Z)
    probs = _mlp(params, "image_head", Z2)
    if lifted:
        probs = ad.reshape(probs, probs.shape[1:])
    return np.argmax(probs.data, axis=-1), probs
