"""ViT-style encoder producing one embedding per patch.

There is no class token and no prediction head: N patch vectors go in,
N embeddings of width ``embed_dim`` come out. Blocks are pre-norm with
multi-head self-attention and a GELU feed-forward, followed by a final
layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .patching import check_divisible

PREFIX = "backbone."


@dataclass
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 4
    num_heads: int = 6
    mlp_ratio: float = 4.0

    def __post_init__(self):
        check_divisible(self.image_size, self.patch_size)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws cut at two standard deviations, rescaled to have std ``std``."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    # std of a standard normal truncated to [-2, 2]
    return x * (std / 0.8796256610342398)


def parameter_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes[b + "norm1.weight"] = (d,)
        shapes[b + "norm1.bias"] = (d,)
        for proj in ("query", "key", "value", "out"):
            shapes[b + f"attn.{proj}.weight"] = (d, d)
            shapes[b + f"attn.{proj}.bias"] = (d,)
        shapes[b + "norm2.weight"] = (d,)
        shapes[b + "norm2.bias"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (d, f)
        shapes[b + "mlp.fc1.bias"] = (f,)
        shapes[b + "mlp.fc2.weight"] = (f, d)
        shapes[b + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return {PREFIX + k: v for k, v in shapes.items()}


def init_parameters(cfg: BackboneConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(("norm1.weight", "norm2.weight", "norm.weight")):
            value = np.ones(shape)
        elif name.endswith("bias"):
            value = np.zeros(shape)
        else:
            value = trunc_normal(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def _linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def _attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: BackboneConfig,
               probe: list | None = None) -> Tensor:
    B, N, d = x.shape
    H = cfg.num_heads
    dh = d // H

    def heads(t):  # (B, N, d) -> (B, H, N, dh)
        return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, params, prefix + "query"))
    k = heads(_linear(x, params, prefix + "key"))
    v = heads(_linear(x, params, prefix + "value"))
    scores = ad.affine(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale=dh ** -0.5)
    attn = ad.softmax(scores, axis=-1)
    if probe is not None:
        probe.append(attn.data)
    ctx = ad.matmul(attn, v)  # (B, H, N, dh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
    return _linear(ctx, params, prefix + "out")


def extract_local_representations(params: Mapping[str, Tensor], patches, cfg: BackboneConfig,
                                  probe: list | None = None) -> Tensor:
    """Encode ``(B, N, m*m)`` patch vectors into ``(B, N, d)`` local representations.

    ``probe``, if given, collects each block's attention probabilities.
    """
    if not isinstance(patches, Tensor):
        dtype = params[PREFIX + "pos_embed"].dtype
        patches = Tensor(np.asarray(patches, dtype=dtype))
    squeeze = patches.ndim == 2
    if squeeze:
        patches = ad.reshape(patches, (1,) + patches.shape)
    if patches.shape[1] != cfg.num_patches:
        raise ShapeError(f"expected {cfg.num_patches} patches, got {patches.shape[1]}")
    if patches.shape[2] != cfg.patch_dim:
        raise ShapeError(f"expected patch vectors of length {cfg.patch_dim}, got {patches.shape[2]}")

    p = {k[len(PREFIX):]: v for k, v in params.items() if k.startswith(PREFIX)}
    x = _linear(patches, p, "patch_embed")
    x = ad.add(x, p["pos_embed"])
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        h = ad.layer_norm(x, p[b + "norm1.weight"], p[b + "norm1.bias"])
        x = ad.add(x, _attention(h, p, b + "attn.", cfg, probe))
        h = ad.layer_norm(x, p[b + "norm2.weight"], p[b + "norm2.bias"])
        h = _linear(ad.gelu(_linear(h, p, b + "mlp.fc1")), p, b + "mlp.fc2")
        x = ad.add(x, h)
    z = ad.layer_norm(x, p["norm.weight"], p["norm.bias"])
    if squeeze:
        z = ad.reshape(z, z.shape[1:])
    return z


def import_pretrained(params: Mapping[str, Tensor], tensors: Mapping[str, np.ndarray],
                      cfg: BackboneConfig) -> dict[str, Tensor]:
    """Replace backbone parameters with same-named tensors from a checkpoint table.

    Tensors outside the backbone (prediction heads) are ignored. A positional
    table with one extra leading row (a class-token slot) loses that row, and a
    patch projection laid out for 3 replicated input channels (channel-major
    rows) is folded onto the single grayscale channel by summing the channel
    blocks, which is exact for replicated input.
    """
    expected = parameter_shapes(cfg)
    missing = sorted(name for name in expected if name not in tensors)
    if missing:
        raise KeyError(f"checkpoint is missing backbone tensors: {', '.join(missing)}")

    out = dict(params)
    for name, shape in expected.items():
        value = np.asarray(tensors[name])
        if name == PREFIX + "pos_embed" and value.shape == (shape[0] + 1, shape[1]):
            value = value[1:]
        if name == PREFIX + "patch_embed.weight" and value.shape == (3 * shape[0], shape[1]):
            value = value.reshape(3, shape[0], shape[1]).sum(axis=0)
        if value.shape != shape:
            raise ShapeError(f"tensor {name}: checkpoint shape {value.shape} != expected {shape}")
        dtype = params[name].dtype
        out[name] = Tensor(value.astype(dtype), requires_grad=params[name].requires_grad)
    return out
