"""Scaled-down experiment runners shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, training
from .model import ModelConfig, MvcModel

# tiny backbone used for desk-scale runs
SMALL = dict(embed_dim=64, depth=2, num_heads=4, mlp_ratio=2.0, hidden=64)


@dataclass
class RunSummary:
    name: str
    mode: str
    seed: int
    patch_count: int
    epochs: int
    seconds: float
    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)


def _fit(dataset: data.Dataset, model_cfg: ModelConfig, train_cfg: training.TrainConfig, seed: int,
         on_record=None) -> tuple[MvcModel, float]:
    model = MvcModel.create(model_cfg, seed=seed, classes=dataset.classes)
    start = time.perf_counter()
    training.train(model, dataset.images, train_cfg, on_record=on_record)
    return model, time.perf_counter() - start


def overfit_run(out_dir, seed: int = 0, count: int = 64, epochs: int = 200, image_size: int = 224,
                patch_size: int = 16, learning_rate: float = 1e-3, on_record=None) -> tuple[MvcModel, RunSummary]:
    """Memorize a small synthetic set without augmentation; saves ``model.ckpt`` in ``out_dir``."""
    out = Path(out_dir)
    data.generate_synthetic_dataset(out / "data", seed=seed, count=count, size=image_size)
    dataset = data.load_dataset(out / "data" / "train.tsv")
    cfg = ModelConfig(image_size=image_size, patch_size=patch_size, num_classes=len(dataset.classes), **SMALL)
    tcfg = training.TrainConfig(epochs=epochs, learning_rate=learning_rate, batch_size=16, augment_flip=False,
                                augment_affine=False, augment_jitter=False, seed=seed, val_fraction=0.0,
                                eval_every=0)
    model, secs = _fit(dataset, cfg, tcfg, seed, on_record)
    data.save_checkpoint(model, out / "model.ckpt", {"experiment": "overfit", "seed": seed, "epoch": epochs})
    report = training.evaluate(model, dataset.images)
    (out / "report.jsonl").write_text(report.to_text(), encoding="utf-8")
    summary = RunSummary("overfit", "full", seed, cfg.num_patches, epochs, secs,
                         train=training.summary_metrics(report))
    return model, summary


def multitask_comparison(out_dir, seeds=(0, 1, 2), count: int = 512, epochs: int = 15, image_size: int = 64,
                         patch_size: int = 8, learning_rate: float = 1e-3, test_fraction: float = 0.25,
                         modes=("full", "image")) -> dict:
    """Mean held-out image accuracy of each mode over several seeds.

    Each seed draws its own synthetic set; both modes see the same data and
    the same initialization within a seed.
    """
    out = Path(out_dir)
    runs: list[RunSummary] = []
    for seed in seeds:
        root = out / f"seed{seed}"
        data.generate_synthetic_dataset(root, seed=seed, count=count, size=image_size, test_fraction=test_fraction)
        train_set = data.load_dataset(root / "train.tsv")
        test_set = data.load_dataset(root / "test.tsv")
        cfg = ModelConfig(image_size=image_size, patch_size=patch_size, num_classes=len(train_set.classes), **SMALL)
        for mode in modes:
            tcfg = training.TrainConfig(epochs=epochs, learning_rate=learning_rate, mode=mode, seed=seed,
                                        val_fraction=0.0, eval_every=0)
            model, secs = _fit(train_set, cfg, tcfg, seed)
            runs.append(RunSummary("multitask", mode, seed, cfg.num_patches, epochs, secs,
                                   test=training.summary_metrics(training.evaluate(model, test_set.images, mode))))
    means = {mode: float(np.mean([r.test["accuracy"] for r in runs if r.mode == mode])) for mode in modes}
    return {"runs": [asdict(r) for r in runs], "mean_test_accuracy": means}


def patch_size_ablation(out_dir, seed: int = 0, count: int = 16, epochs: int = 2, image_size: int = 224,
                        patch_sizes=(16, 8), learning_rate: float = 1e-3) -> list[RunSummary]:
    """Train the same small set with each patch size and evaluate on it."""
    out = Path(out_dir)
    data.generate_synthetic_dataset(out / "data", seed=seed, count=count, size=image_size)
    dataset = data.load_dataset(out / "data" / "train.tsv")
    runs = []
    for m in patch_sizes:
        cfg = ModelConfig(image_size=image_size, patch_size=m, num_classes=len(dataset.classes), **SMALL)
        tcfg = training.TrainConfig(epochs=epochs, learning_rate=learning_rate, seed=seed, val_fraction=0.0,
                                    eval_every=0, batch_size=8)
        model, secs = _fit(dataset, cfg, tcfg, seed)
        report = training.evaluate(model, dataset.images)
        (out / f"report_vit{m}.jsonl").write_text(report.to_text(), encoding="utf-8")
        runs.append(RunSummary(f"vit{m}", "full", seed, cfg.num_patches, epochs, secs,
                               train=training.summary_metrics(report)))
    return runs
