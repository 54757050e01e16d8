"""Finite-difference verification of every backward rule and of the full model loss.

Errors are normwise per tensor: ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, 1e-6)``. The floor keeps tensors whose true gradient is exactly
zero (attention key biases, by softmax shift invariance) from dividing
finite-difference noise by noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import PRIMITIVES, Tape, Tensor
from .model import GROUPS, ModelConfig, MvcModel, param_group
from .patching import patch_labels
from .training import batch_loss

TINY = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0,
                   hidden=8, num_classes=4)


SCALE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0)), float(np.max(np.abs(numeric), initial=0)))
    diff = float(np.max(np.abs(analytic - numeric), initial=0))
    return diff / max(scale, SCALE_FLOOR)


def _away_from(rng, shape, point, gap, spread=2.0):
    x = rng.uniform(-spread, spread, size=shape)
    near = np.abs(x - point) < gap
    x[near] += np.sign(x[near] - point + 1e-300) * gap * 2
    return x


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, list[np.ndarray], dict]]:
    """(primitive, operand values, attrs) tuples covering every registered primitive."""
    u = lambda *s: rng.uniform(-1.5, 1.5, size=s)  # noqa: E731
    return [
        ("matmul", [u(2, 3, 4), u(4, 5)], {}),
        ("matmul", [u(2, 3, 4), u(2, 4, 5)], {}),
        ("add", [u(2, 3, 4), u(3, 4)], {}),
        ("add", [u(3, 4), u(3, 4)], {}),
        ("mul", [u(2, 3, 4), u(3, 4)], {}),
        ("affine", [u(3, 4)], {"scale": -1.7, "shift": 0.3}),
        ("relu", [_away_from(rng, (4, 5), 0.0, 1e-2)], {}),
        ("gelu", [u(4, 5)], {}),
        ("softmax", [u(3, 5) * 3], {"axis": -1}),
        ("softmax", [u(3, 5) * 3], {"axis": 0}),
        ("log", [rng.uniform(0.3, 2.0, size=(3, 4))], {}),
        ("clip_min", [_away_from(rng, (4, 5), 0.2, 1e-2)], {"lo": 0.2}),
        ("sum", [u(3, 4)], {"axis": None, "keepdims": False}),
        ("sum", [u(2, 3, 4)], {"axis": 1, "keepdims": False}),
        ("sum", [u(2, 3, 4)], {"axis": -1, "keepdims": True}),
        ("mean", [u(2, 3, 4)], {"axis": 0, "keepdims": False}),
        ("reshape", [u(2, 6)], {"shape": (3, 4)}),
        ("transpose", [u(2, 3, 4)], {"axes": (2, 0, 1)}),
        ("take", [u(3, 4)], {"index": 2, "axis": -1}),
        ("layer_norm", [u(2, 3, 5), u(5), u(5)], {"eps": 1e-6}),
    ]


def check_primitive(name: str, values: list[np.ndarray], attrs: dict, rng: np.random.Generator,
                    step: float = 1e-6) -> float:
    operands = [Tensor(v.astype(np.float64), requires_grad=True) for v in values]
    out_shape = ad.apply_primitive(name, operands, **attrs).shape
    weights = Tensor(rng.uniform(-1, 1, size=out_shape))

    def objective() -> Tensor:
        return ad.sum(ad.mul(ad.apply_primitive(name, operands, **attrs), weights))

    with Tape() as tape:
        loss = objective()
    ad.backward(tape, loss)
    worst = 0.0
    for t in operands:
        numeric = ad.finite_difference_gradient(lambda _: objective(), t, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


def check_all_primitives(seed: int = 0, step: float = 1e-6) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, values, attrs in primitive_cases(rng):
        err = check_primitive(name, values, attrs, rng, step)
        results[name] = max(results.get(name, 0.0), err)
    missing = set(PRIMITIVES) - set(results)
    if missing:
        raise RuntimeError(f"no gradient check case for primitives: {sorted(missing)}")
    return results


def tiny_problem(seed: int = 0, config: ModelConfig = TINY, batch: int = 2):
    """A double-precision model at a generic parameter point plus a random labelled batch."""
    rng = np.random.default_rng([seed, 7])
    model = MvcModel.create(config, seed=seed, dtype=np.float64)
    for t in model.params.values():
        t.data = t.data + rng.normal(0, 0.3, size=t.shape)
    n = config.image_size
    pixels = rng.uniform(0, 1, size=(batch, n, n))
    labels = rng.integers(0, config.num_classes, size=batch)
    boxes = [[(int(rng.integers(0, n // 2)), int(rng.integers(0, n // 2)), n // 2, n // 2)] for _ in range(batch)]
    targets = np.stack([patch_labels(b, n, config.patch_size) for b in boxes])
    return model, pixels, labels, targets


@dataclass
class ModelCheck:
    group_errors: dict[str, float] = field(default_factory=dict)
    worst_param: dict[str, tuple[str, float]] = field(default_factory=dict)


def check_model(seed: int = 0, mode: str = "full", step: float = 1e-6, config: ModelConfig = TINY) -> ModelCheck:
    model, pixels, labels, targets = tiny_problem(seed, config)

    def loss_value() -> Tensor:
        return batch_loss(model, pixels, labels, targets, mode)[1]

    with Tape() as tape:
        loss = loss_value()
    ad.backward(tape, loss)
    result = ModelCheck()
    for name, t in model.params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = ad.finite_difference_gradient(lambda _: loss_value(), t, step)
        err = relative_error(analytic, numeric)
        g = param_group(name)
        if err >= result.group_errors.get(g, -1.0):
            result.group_errors[g] = err
            result.worst_param[g] = (name, err)
    for g in GROUPS:
        result.group_errors.setdefault(g, 0.0)
    return result
