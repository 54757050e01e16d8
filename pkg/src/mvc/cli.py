"""Command line entry point: ``mvc {synth,train,eval,predict,visualize,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

Settings for ``train`` are layered defaults -> ``--config`` file (``key=value``
lines, ``#`` comments) -> flags. Logs and reports are JSON lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import backbone, data, gradcheck, training
from .errors import DataError, NumericError, ShapeError
from .model import MODES, ModelConfig, MvcModel, mvc_forward
from .patching import AnnotatedImage, rasterize_patch_mask

log = logging.getLogger("mvc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

MODE_ALIASES = {"full": "full", "image": "image", "image-only": "image", "patch": "patch", "patch-only": "patch"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    data: str = ""
    out: str = "run"
    pretrained: str = ""
    # model
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 4
    num_heads: int = 6
    mlp_ratio: float = 4.0
    hidden: int = 500
    # training
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

    def model_config(self, num_classes: int) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return ModelConfig(num_classes=num_classes, **kw)

    def train_config(self) -> training.TrainConfig:
        names = {f.name for f in dataclasses.fields(training.TrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return training.TrainConfig(**kw)


FLAG_ALIASES = {"learning_rate": ["--lr"], "batch_size": ["--batch"]}


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name}: expected a boolean, got {text!r}")
    try:
        return {"int": int, "float": float}.get(kind, str)(text.strip())
    except ValueError:
        raise UsageError(f"{field.name}: cannot parse {text!r} as {kind}") from None


def read_config_file(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    if getattr(args, "config", None):
        for key, text in read_config_file(args.config).items():
            if key not in fields:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _coerce(fields[key], text)
    for name, f in fields.items():
        given = getattr(args, name, None)
        if given is not None:
            values[name] = _coerce(f, str(given))
    cfg = RunConfig(**values)
    if cfg.mode not in MODE_ALIASES:
        raise UsageError(f"unknown mode {cfg.mode!r}")
    cfg.mode = MODE_ALIASES[cfg.mode]
    return cfg


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    for f in dataclasses.fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")] + FLAG_ALIASES.get(f.name, [])
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        help_text = f"default: {f.default}"
        if f.name == "mode":
            help_text = "full | image | patch (default: full)"
        p.add_argument(*flags, dest=f.name, default=None, metavar=kind.upper(), help=help_text)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _manifest_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "train.tsv"
    return p


def parse_mix(text: str | None, classes) -> dict[str, float] | None:
    if not text:
        return None
    parts = [s for s in text.split(",") if s.strip()]
    try:
        if all("=" in s for s in parts):
            return {k.strip(): float(v) for k, v in (s.split("=", 1) for s in parts)}
        values = [float(s) for s in parts]
    except ValueError:
        raise UsageError(f"cannot parse class mix {text!r}") from None
    if len(values) != len(classes):
        raise UsageError(f"mix needs {len(classes)} weights, got {len(values)}")
    return dict(zip(classes, values))


def cmd_synth(args) -> int:
    classes = data.DEFAULT_CLASSES
    mix = parse_mix(args.mix, classes)
    if args.count < len(classes):
        raise UsageError(f"--count must be at least the number of classes ({len(classes)})")
    try:
        manifests = data.generate_synthetic_dataset(args.out, seed=args.seed, count=args.count, mix=mix,
                                                    size=args.size, test_fraction=args.test_fraction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for split, m in manifests.items():
        print(json.dumps({"split": split, "manifest": str(Path(args.out) / f"{split}.tsv"),
                          "images": len(m.entries)}, sort_keys=True))
    return 0


def _jsonable(rec: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in rec.items()}


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not cfg.data:
        raise UsageError("--data is required")
    dataset = data.load_dataset(_manifest_path(cfg.data), size=cfg.image_size)
    if not dataset.images:
        raise DataError("dataset has no entries")
    model_cfg = cfg.model_config(len(dataset.classes))
    try:
        train_cfg = cfg.train_config()
        model = MvcModel.create(model_cfg, seed=cfg.seed, classes=dataset.classes)
    except (ValueError, ShapeError) as exc:
        raise UsageError(str(exc)) from None
    if cfg.pretrained:
        tensors, _ = data.read_checkpoint(cfg.pretrained)
        try:
            model.params = backbone.import_pretrained(model.params, tensors, model_cfg.backbone)
        except (KeyError, ShapeError) as exc:
            raise DataError(f"cannot import pretrained weights: {exc}") from None

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        settings = dataclasses.asdict(cfg)
        settings["num_classes"] = len(dataset.classes)
        settings["patch_count"] = model_cfg.num_patches
        fh.write(json.dumps({"record": "config", "settings": settings}, sort_keys=True) + "\n")

        def write(rec):
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")

        result = training.train(model, dataset.images, train_cfg, on_record=write)
    meta = {"epoch": train_cfg.epochs, "seed": cfg.seed, "mode": cfg.mode,
            "train_config": dataclasses.asdict(train_cfg)}
    data.save_checkpoint(result.model, out / "model.ckpt", meta)
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "log": str(log_path),
                      "patch_count": model_cfg.num_patches, "epochs": train_cfg.epochs}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, meta = data.load_checkpoint(args.ckpt)
    dataset = data.load_dataset(_manifest_path(args.data), size=model.config.image_size)
    if tuple(dataset.classes) != tuple(model.classes):
        raise DataError(f"dataset classes {dataset.classes} differ from checkpoint classes {model.classes}")
    mode = MODE_ALIASES[args.mode or meta.get("mode", "full")]
    report = training.evaluate(model, dataset.images, mode)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _load_single_image(path, n: int) -> AnnotatedImage:
    try:
        pixels = data.read_pnm(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image: {exc}") from None
    return AnnotatedImage(data.resize_bilinear(pixels, n, n).astype(np.float32), 0, (), str(path)), pixels.shape


def cmd_predict(args) -> int:
    model, meta = data.load_checkpoint(args.ckpt)
    image, _ = _load_single_image(args.image, model.config.image_size)
    mode = MODE_ALIASES[args.mode or "full"]
    pred = mvc_forward(model, image, mode)
    rec = {"image": str(args.image), "patch_count": model.config.num_patches}
    if pred.image_dist is not None:
        rec["label"] = model.classes[pred.image_label]
        rec["label_index"] = pred.image_label
        rec["probs"] = {c: float(p) for c, p in zip(model.classes, pred.image_dist)}
    if pred.patch_probs is not None:
        rec["patch_labels"] = [int(v) for v in pred.patch_labels]
        rec["patch_probs"] = [float(v) for v in pred.patch_probs]
    print(json.dumps(rec))
    return 0


POSITIVE_RGB = (0, 255, 0)
GT_RGB = (255, 0, 0)


def _outline(rgb: np.ndarray, x: int, y: int, w: int, h: int, color) -> None:
    if w <= 0 or h <= 0:
        return
    rgb[y, x:x + w] = color
    rgb[y + h - 1, x:x + w] = color
    rgb[y:y + h, x] = color
    rgb[y:y + h, x + w - 1] = color


def render_overlay(pixels: np.ndarray, patch_flags, patch_size: int, gt_boxes=()) -> np.ndarray:
    """Gray image as RGB with flagged patches outlined in green and boxes in red."""
    gray = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    n = pixels.shape[0]
    k = n // patch_size
    for idx in np.flatnonzero(np.asarray(patch_flags)):
        r, c = divmod(int(idx), k)
        _outline(rgb, c * patch_size, r * patch_size, patch_size, patch_size, POSITIVE_RGB)
    for x, y, w, h in gt_boxes:
        _outline(rgb, x, y, w, h, GT_RGB)
    return rgb


def cmd_visualize(args) -> int:
    model, _ = data.load_checkpoint(args.ckpt)
    n = model.config.image_size
    image, (src_h, src_w) = _load_single_image(args.image, n)
    boxes = []
    for text in args.gt or []:
        box = data._parse_box(text, "--gt")
        boxes.append(data._scale_box(box, n / src_w, n / src_h, n))
    pred = mvc_forward(model, image, "patch")
    rgb = render_overlay(image.pixels, pred.patch_labels, model.config.patch_size, boxes)
    data.write_ppm(args.out, rgb)
    mask = rasterize_patch_mask(n, pred.patch_labels, model.config.patch_size)
    print(json.dumps({"overlay": str(args.out), "positive_patches": int(pred.patch_labels.sum()),
                      "positive_pixels": int(mask.sum())}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    worst = ("", 0.0)
    for seed in args.seeds or [args.seed]:
        prims = gradcheck.check_all_primitives(seed)
        for name, err in prims.items():
            passed = err < args.primitive_tol
            ok &= passed
            print(json.dumps({"seed": seed, "primitive": name, "max_rel_error": err,
                              "pass": passed}, sort_keys=True))
            if not passed and err > worst[1]:
                worst = (f"primitive {name}", err)
        check = gradcheck.check_model(seed)
        for group, err in check.group_errors.items():
            passed = err < args.tol
            ok &= passed
            param = check.worst_param.get(group, ("", 0.0))[0]
            print(json.dumps({"seed": seed, "group": group, "max_rel_error": err, "worst_tensor": param,
                              "pass": passed}, sort_keys=True))
            if not passed and err > worst[1]:
                worst = (f"group {group} ({param})", err)
    if ok:
        print("gradcheck: PASS")
        return 0
    print(f"gradcheck: FAIL, worst offender {worst[0]} with relative error {worst[1]:.3e}")
    return EXIT_NUMERIC


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvc", description="Multi-task ViT for chest film classification and region finding")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic annotated dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--mix", help="class weights, e.g. Negative=1,Typical=2,... (default: reference mix)")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint and epoch log")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write a metrics report")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report")
    p.add_argument("--mode", choices=sorted(MODE_ALIASES))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="print the prediction for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("visualize", help="write a PPM overlay of positive patches and ground-truth boxes")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--gt", nargs="*", metavar="X,Y,W,H")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule and the model loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--primitive-tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mvc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mvc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mvc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
