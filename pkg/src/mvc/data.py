"""Datasets on disk, the synthetic chest-film generator, and checkpoints.

Manifest (UTF-8, tab separated, one record per line)::

    #mvc-manifest<TAB>classes=Negative,Typical,...<TAB>size=224<TAB>split=train
    images/00000.pgm<TAB>Typical<TAB>40,52,61,90<TAB>120,60,58,88
    images/00001.pgm<TAB>Negative

Each record is a relative image path, a class name, then zero or more
``x,y,w,h`` boxes in source-image pixels. Images are 8-bit binary PGM.

Checkpoint (all integers little-endian)::

    b"MVC1" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    | u32 tensor count | per tensor: u32 name length, name, u32 rank,
    u64 dims..., float32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CheckpointError, DataError
from .model import DEFAULT_CLASSES, ModelConfig, MvcModel, params_from_state
from .patching import AnnotatedImage, Box, clamp_box

MANIFEST_TAG = "#mvc-manifest"

# Class composition of the reference chest X-ray collection (image counts).
TABLE_MIX = {"Negative": 1647, "Typical": 2850, "Atypical": 391, "Indeterminate": 1049}

# Mean fraction of the image covered by affected-region boxes, per class.
AREA_TARGETS = {"Negative": 0.0, "Typical": 0.27, "Atypical": 0.10, "Indeterminate": 0.12}


# --------------------------------------------------------------------------
# PGM images
# --------------------------------------------------------------------------


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    arr = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # one whitespace byte follows maxval


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file; PPM is averaged to gray."""
    raw = Path(path).read_bytes()
    tokens, offset = _header_tokens(raw, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported image format {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = w * h * channels * dtype.itemsize
    body = raw[offset:offset + expected]
    if len(body) != expected:
        raise ValueError("truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, channels).astype(np.float64) / maxval
    return arr.mean(axis=2) if channels == 3 else arr[:, :, 0]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling (corner pixels map onto corner pixels)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    label: str
    boxes: tuple[Box, ...] = ()


@dataclass
class DatasetManifest:
    root: Path
    classes: tuple[str, ...]
    size: int
    split: str = "train"
    entries: list[ManifestEntry] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{MANIFEST_TAG}\tclasses={','.join(self.classes)}\tsize={self.size}\tsplit={self.split}"]
        for e in self.entries:
            fields = [e.path, e.label] + [",".join(str(v) for v in b) for b in e.boxes]
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


@dataclass
class Dataset:
    classes: tuple[str, ...]
    image_size: int
    split: str
    images: list[AnnotatedImage]

    def __len__(self) -> int:
        return len(self.images)


def _parse_box(text: str, where: str) -> Box:
    try:
        x, y, w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise DataError(f"{where}: malformed box {text!r}") from None
    if w < 0 or h < 0:
        raise DataError(f"{where}: box {text!r} has negative extent")
    return (x, y, w, h)


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith(MANIFEST_TAG):
        raise DataError(f"{path}: first line must be a {MANIFEST_TAG} header")
    header = dict(tok.split("=", 1) for tok in lines[0].split("\t")[1:] if "=" in tok)
    try:
        classes = tuple(c for c in header["classes"].split(",") if c)
        size = int(header.get("size", 224))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad header: {exc}") from None
    manifest = DatasetManifest(path.parent, classes, size, header.get("split", "train"))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        where = f"{path.name}:{lineno} ({fields[0]})"
        if len(fields) < 2:
            raise DataError(f"{where}: expected image path and class label")
        if fields[1] not in classes:
            raise DataError(f"{where}: label {fields[1]!r} not in declared classes {classes}")
        boxes = tuple(_parse_box(f, where) for f in fields[2:] if f)
        manifest.entries.append(ManifestEntry(fields[0], fields[1], boxes))
    return manifest


def _scale_box(box: Box, sx: float, sy: float, n: int) -> Box:
    x, y, w, h = box
    x0, x1 = round(x * sx), round((x + w) * sx)
    y0, y1 = round(y * sy), round((y + h) * sy)
    return clamp_box((x0, y0, x1 - x0, y1 - y0), n)


def load_entry(manifest: DatasetManifest, entry: ManifestEntry, n: int) -> AnnotatedImage:
    file = manifest.root / entry.path
    if not file.exists():
        raise DataError(f"{entry.path}: image file not found")
    try:
        pixels = read_pnm(file)
    except (OSError, ValueError) as exc:
        raise DataError(f"{entry.path}: cannot decode image: {exc}") from exc
    h, w = pixels.shape
    pixels = resize_bilinear(pixels, n, n).astype(np.float32)
    boxes = tuple(_scale_box(b, n / w, n / h, n) for b in entry.boxes)
    return AnnotatedImage(pixels, manifest.classes.index(entry.label), boxes, entry.path)


def load_dataset(manifest_path, size: int | None = None) -> Dataset:
    """Load every entry, in manifest order, resized to ``size`` (default: the header's size)."""
    manifest = parse_manifest(manifest_path)
    n = size or manifest.size
    images = [load_entry(manifest, e, n) for e in manifest.entries]
    return Dataset(manifest.classes, n, manifest.split, images)


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------

# Per class: list of blob specs (lung side, vertical centre as a fraction of
# the image, relative width and height of the blob box, added intensity).
# Box sizes are chosen so the mean box area matches AREA_TARGETS.
_BLOBS = {
    "Negative": [],
    # large bilateral lower-zone opacities
    "Typical": [("L", 0.58, 0.300, 0.450, 0.42), ("R", 0.58, 0.300, 0.450, 0.42)],
    # one mid-size opacity, upper zone, random side
    "Atypical": [("?", 0.40, 0.255, 0.392, 0.30)],
    # two small opacities, bilateral, mid zone
    "Indeterminate": [("L", 0.50, 0.200, 0.300, 0.35), ("R", 0.50, 0.200, 0.300, 0.35)],
}
_SIZE_JITTER = 0.12


def class_counts(count: int, mix: Mapping[str, float], classes: Sequence[str]) -> dict[str, int]:
    """Largest-remainder apportionment; every class with positive weight gets at least one image."""
    weights = np.array([float(mix.get(c, 0.0)) for c in classes])
    if weights.sum() <= 0:
        raise ValueError("class mix has no positive weight")
    live = weights > 0
    if count < live.sum():
        raise ValueError(f"count {count} is smaller than the number of classes {int(live.sum())}")
    base = live.astype(int)
    rest = count - base.sum()
    share = weights / weights.sum() * rest
    alloc = np.floor(share).astype(int)
    left = rest - alloc.sum()
    order = np.argsort(-(share - alloc), kind="stable")
    alloc[order[:left]] += 1
    return dict(zip(classes, (base + alloc).tolist()))


def _superellipse(n: int, cx: float, cy: float, a: float, b: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    return ((np.abs(xx - cx) / a) ** 4 + (np.abs(yy - cy) / b) ** 4) <= 1.0


def render_blobs(label: str, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Boolean masks of the affected-region blobs for one image of class ``label``."""
    masks = []
    side_pick = rng.random() < 0.5
    for side, vy, rw, rh, _ in _BLOBS[label]:
        if side == "?":
            side = "L" if side_pick else "R"
        w = rw * n * rng.uniform(1 - _SIZE_JITTER, 1 + _SIZE_JITTER)
        h = rh * n * rng.uniform(1 - _SIZE_JITTER, 1 + _SIZE_JITTER)
        cx = (0.30 if side == "L" else 0.70) * n + rng.uniform(-0.03, 0.03) * n
        cy = vy * n + rng.uniform(-0.04, 0.04) * n
        masks.append(_superellipse(n, cx - 0.5, cy - 0.5, w / 2, h / 2))
    return masks


def mask_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def render_image(label: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[Box], list[np.ndarray]]:
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = 0.62 - 0.12 * yy + 0.03 * rng.standard_normal()
    for cx in (0.30, 0.70):
        lung = ((xx - cx) / 0.16) ** 2 + ((yy - 0.52) / 0.32) ** 2
        img = img - 0.38 * np.clip(1.2 - lung, 0, 1)
    masks = render_blobs(label, n, rng)
    for mask, spec in zip(masks, _BLOBS[label]):
        img = img + spec[4] * mask
    img = img + 0.03 * rng.standard_normal((n, n))
    img = np.clip(img, 0.0, 1.0)
    boxes = [mask_box(m) for m in masks]
    return img, boxes, masks


def generate_synthetic_dataset(out_dir, seed: int = 0, count: int = 64, mix: Mapping[str, float] | None = None,
                               size: int = 224, test_fraction: float = 0.0,
                               classes: Sequence[str] = DEFAULT_CLASSES) -> dict[str, DatasetManifest]:
    """Render ``count`` labelled images under ``out_dir`` and write one manifest per split.

    Returns ``{"train": manifest, "test": manifest}`` (``test`` only when
    ``test_fraction > 0``). Output is a pure function of the arguments.
    """
    classes = tuple(classes)
    mix = dict(TABLE_MIX if mix is None else mix)
    unknown = set(mix) - set(classes)
    if unknown:
        raise ValueError(f"mix names unknown classes: {sorted(unknown)}")
    counts = class_counts(count, mix, classes)
    labels = [c for c in classes for _ in range(counts[c])]
    rng = np.random.default_rng([seed, 1])
    labels = [labels[i] for i in rng.permutation(len(labels))]
    n_test = int(round(count * test_fraction))
    is_test = np.zeros(count, dtype=bool)
    is_test[rng.permutation(count)[:n_test]] = True

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifests = {"train": DatasetManifest(out, classes, size, "train")}
    if n_test:
        manifests["test"] = DatasetManifest(out, classes, size, "test")
    for i, label in enumerate(labels):
        img, boxes, _ = render_image(label, size, np.random.default_rng([seed, 2, i]))
        rel = f"images/{i:05d}.pgm"
        write_pgm(out / rel, img)
        split = "test" if is_test[i] else "train"
        manifests[split].entries.append(ManifestEntry(rel, label, tuple(boxes)))
    for split, manifest in manifests.items():
        manifest.write(out / f"{split}.tsv")
    return manifests


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

MAGIC = b"MVC1"
VERSION = 1


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an MVC checkpoint (bad magic)")
    version, meta_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} unexpected trailing bytes")
    return tensors, metadata


def save_checkpoint(model: MvcModel, path, metadata: Mapping | None = None) -> None:
    meta = {"model_config": asdict(model.config), "classes": list(model.classes)}
    meta.update(metadata or {})
    write_checkpoint(path, model.state(), meta)


def load_checkpoint(path, dtype=np.float32) -> tuple[MvcModel, dict]:
    tensors, metadata = read_checkpoint(path)
    try:
        config = ModelConfig(**metadata["model_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: metadata lacks a usable model_config: {exc}") from None
    template = MvcModel.create(config, seed=0, dtype=dtype, classes=tuple(metadata.get("classes", DEFAULT_CLASSES)))
    missing = sorted(set(template.params) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    for name, t in template.params.items():
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {t.shape}")
    params = params_from_state({k: tensors[k] for k in template.params}, dtype)
    return MvcModel(config, params, template.classes), metadata
