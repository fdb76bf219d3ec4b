"""Synthetic weakly labelled scenes, netpbm I/O and mIoU.

A scene is one coloured shape (disk, rectangle or triangle) on a textured
background, plus Gaussian pixel noise.  Training only sees the image and its
label set; the mask is kept for evaluation.

Dataset directory layout::

    scenes/NNNN.ppm   RGB image (binary P6)
    masks/NNNN.pgm    label mask (binary P5, label value per pixel)
    labels.csv        scene id, present labels ("0,2")
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import InvalidInputError, LabelSet

SHAPES = ("disk", "rectangle", "triangle")

# mean colour of each foreground class (index = label)
DEFAULT_PALETTE = (
    (0, 0, 0),  # background placeholder, unused for shapes
    (220, 50, 40),
    (40, 200, 60),
    (50, 70, 230),
)
DEFAULT_BACKGROUNDS = ((120, 120, 120), (105, 110, 130), (140, 130, 105))

# display colours for write_color_mask, cycled for labels beyond the table
MASK_COLORS = np.array(
    [
        (0, 0, 0),
        (128, 0, 0),
        (0, 128, 0),
        (128, 128, 0),
        (0, 0, 128),
        (128, 0, 128),
        (0, 128, 128),
        (128, 128, 128),
    ],
    dtype=np.uint8,
)

MIN_COVERAGE = 0.05
MAX_COVERAGE = 0.6


class NetpbmError(ValueError):
    """Malformed or truncated netpbm file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "disk"
    label: int = 1
    palette: tuple = DEFAULT_PALETTE
    background: tuple = DEFAULT_BACKGROUNDS[0]
    noise_sigma: float = 5.0
    texture_amplitude: float = 30.0
    color_jitter: float = 15.0
    size: int = 48
    object_scale: float = 0.6

    def __post_init__(self):
        if self.object_scale <= 0:
            raise InvalidInputError("object_scale must be positive")
        if self.kind not in SHAPES:
            raise InvalidInputError(f"unknown shape {self.kind!r}; expected one of {SHAPES}")
        if self.size < 16:
            raise InvalidInputError("scene size must be at least 16")
        if not 1 <= self.label < len(self.palette):
            raise InvalidInputError(f"label {self.label} has no palette colour")
        if self.noise_sigma < 0 or self.texture_amplitude < 0 or self.color_jitter < 0:
            raise InvalidInputError("noise, texture and jitter must be nonnegative")


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    gt_mask: np.ndarray  # (H, W) uint8 labels
    labels: LabelSet
    seed: int = 0
    _feat: dict = field(default_factory=dict, repr=False)

    def feature_image(self):
        """Cached ``FeatureImage`` so per-image filter plans are built once."""
        from .kernels import FeatureImage

        if "feat" not in self._feat:
            self._feat["feat"] = FeatureImage.from_image(self.image)
        return self._feat["feat"]


def _check_palette(cfg: SceneConfig):
    fg = np.asarray(cfg.palette[cfg.label], dtype=np.float64)
    bg = np.asarray(cfg.background, dtype=np.float64)
    gap = float(np.linalg.norm(fg - bg))
    if gap <= 2 * cfg.noise_sigma:
        raise InvalidInputError(
            f"palette collision: class {cfg.label} colour is {gap:.1f} from the background, "
            f"within 2 sigma = {2 * cfg.noise_sigma:.1f}"
        )


def rasterize(kind: str, size: int, rng, scale: float = 1.0) -> np.ndarray:
    """Boolean mask of one random shape whose coverage lies in the allowed range.

    ``scale`` shrinks (< 1) or grows the linear size of the sampled shapes.
    """
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(1000):
        if kind == "disk":
            r = rng.uniform(0.14, 0.42) * scale * size
            cy, cx = rng.uniform(0.2, 0.8, 2) * size
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
        elif kind == "rectangle":
            h, w = np.minimum(rng.uniform(0.25, 0.75, 2) * scale, 0.95) * size
            y0 = rng.uniform(0, size - h)
            x0 = rng.uniform(0, size - w)
            mask = (rows >= y0) & (rows < y0 + h) & (cols >= x0) & (cols < x0 + w)
        else:
            centre = rng.uniform(0.3, 0.7, 2) * size
            pts = centre + (rng.uniform(0.05, 0.95, (3, 2)) - 0.5) * scale * size
            mask = _inside_triangle(rows, cols, pts)
        cov = mask.mean()
        if MIN_COVERAGE <= cov <= MAX_COVERAGE:
            return mask
    raise RuntimeError("could not place a shape with admissible coverage")


def _inside_triangle(rows, cols, pts):
    (y0, x0), (y1, x1), (y2, x2) = pts

    def side(ya, xa, yb, xb):
        return (cols - xa) * (yb - ya) - (rows - ya) * (xb - xa)

    d0 = side(y0, x0, y1, x1)
    d1 = side(y1, x1, y2, x2)
    d2 = side(y2, x2, y0, x0)
    neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(neg & pos)


def _texture(size: int, amplitude: float, rng) -> np.ndarray:
    """Smooth random field (sum of a few random plane waves), scaled to ``amplitude``."""
    if amplitude == 0:
        return np.zeros((size, size))
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(4):
        freq = rng.uniform(0.05, 0.3)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(freq * (np.cos(angle) * cols + np.sin(angle) * rows) + phase)
    return amplitude * field_ / 2.0


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    _check_palette(cfg)
    rng = np.random.default_rng(seed)
    mask = rasterize(cfg.kind, cfg.size, rng, cfg.object_scale)
    bg = np.asarray(cfg.background, dtype=np.float64)
    fg = np.asarray(cfg.palette[cfg.label], dtype=np.float64) + rng.normal(0, cfg.color_jitter, 3)
    tex = _texture(cfg.size, cfg.texture_amplitude, rng)
    img = np.where(mask[..., None], fg, bg + tex[..., None])
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0, cfg.noise_sigma, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    gt = np.where(mask, cfg.label, 0).astype(np.uint8)
    labels = LabelSet(len(cfg.palette), (0, cfg.label))
    return SyntheticScene(img, gt, labels, seed)


@dataclass(frozen=True)
class DatasetConfig:
    size: int = 48
    num_classes: int = len(DEFAULT_PALETTE)
    noise_sigma: float = 5.0
    texture_amplitude: float = 30.0
    color_jitter: float = 15.0
    object_scale: float = 0.6
    palette: tuple = DEFAULT_PALETTE
    backgrounds: tuple = DEFAULT_BACKGROUNDS

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > len(self.palette):
            raise InvalidInputError(f"num_classes must lie in [2, {len(self.palette)}]")


def generate_dataset(count: int, seed: int, cfg: DatasetConfig | None = None) -> list[SyntheticScene]:
    """``count`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    cfg = DatasetConfig() if cfg is None else cfg
    if count < 0:
        raise InvalidInputError("count must be nonnegative")
    palette = tuple(cfg.palette[: cfg.num_classes])
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scfg = SceneConfig(
            kind=SHAPES[int(rng.integers(len(SHAPES)))],
            label=int(rng.integers(1, cfg.num_classes)),
            palette=palette,
            background=cfg.backgrounds[int(rng.integers(len(cfg.backgrounds)))],
            noise_sigma=cfg.noise_sigma,
            texture_amplitude=cfg.texture_amplitude,
            color_jitter=cfg.color_jitter,
            size=cfg.size,
            object_scale=cfg.object_scale,
        )
        scenes.append(generate_scene(scfg, int(rng.integers(2**31))))
    return scenes


# ---------------------------------------------------------------------------
# netpbm I/O
# ---------------------------------------------------------------------------


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise NetpbmError(f"expected magic {magic.decode()}, found {data[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        start = pos
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos == start and fields:
            raise NetpbmError("expected whitespace between header fields", pos)
        tok_start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            if pos >= len(data):
                raise NetpbmError("truncated header", pos)
            raise NetpbmError(f"expected a decimal number, found {data[pos:pos + 1]!r}", pos)
        fields.append((int(data[tok_start:pos]), tok_start))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise NetpbmError("header must end with a single whitespace byte", pos)
    pos += 1
    (w, _), (h, _), (maxval, mpos) = fields
    if w <= 0 or h <= 0:
        raise NetpbmError(f"invalid dimensions {w}x{h}", fields[0][1])
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, found {maxval}", mpos)
    need = w * h * channels
    have = len(data) - pos
    if have < need:
        raise NetpbmError(f"truncated payload: {have} of {need} bytes", len(data))
    if have > need:
        raise NetpbmError(f"{have - need} trailing bytes after payload", pos + need)
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape((h, w, channels) if channels == 3 else (h, w)).copy()


def encode_image(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InvalidInputError("image must be an (H, W, 3) uint8 array")
    return _encode(b"P6", img)


def encode_mask(mask) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidInputError("mask must be (H, W)")
    if m.size and (m.min() < 0 or m.max() > 255):
        raise InvalidInputError("mask labels must fit in one byte")
    return _encode(b"P5", m.astype(np.uint8))


def decode_image(data: bytes) -> np.ndarray:
    return _decode(data, b"P6", 3)


def decode_mask(data: bytes) -> np.ndarray:
    return _decode(data, b"P5", 1)


def write_image(path, image) -> None:
    Path(path).write_bytes(encode_image(image))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def write_mask(path, mask) -> None:
    Path(path).write_bytes(encode_mask(mask))


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


def color_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.int64)
    return MASK_COLORS[m % len(MASK_COLORS)]


def write_color_mask(path, mask) -> None:
    write_image(path, color_mask(mask))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def miou(pred, gt, num_classes: int):
    """Per-class IoU (NaN where a class is absent from both masks) and their mean."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    conf = confusion(pred, gt, num_classes)
    return iou_from_confusion(conf)


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """``conf[g, p]`` pixel counts; accumulate over a split for dataset-level mIoU."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise InvalidInputError(f"labels outside [0, {num_classes - 1}]")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf):
    conf = np.asarray(conf, dtype=np.float64)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    valid = ~np.isnan(iou)
    mean = float(iou[valid].mean()) if valid.any() else float("nan")
    return iou, mean


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(root, scenes) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene", "labels", "num_classes"])
        for i, scene in enumerate(scenes):
            name = f"{i:04d}"
            write_image(root / "scenes" / f"{name}.ppm", scene.image)
            write_mask(root / "masks" / f"{name}.pgm", scene.gt_mask)
            writer.writerow([name, ",".join(str(v) for v in scene.labels.present), scene.labels.num_classes])


def read_dataset(root) -> list[SyntheticScene]:
    root = Path(root)
    index = root / "labels.csv"
    if not index.is_file():
        raise FileNotFoundError(f"{index} not found")
    scenes = []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scene", "labels", "num_classes"]:
            raise InvalidInputError(f"{index}: unexpected header {reader.fieldnames}")
        for row in reader:
            name = row["scene"]
            present = tuple(int(v) for v in row["labels"].split(",") if v.strip())
            image = read_image(root / "scenes" / f"{name}.ppm")
            mask = read_mask(root / "masks" / f"{name}.pgm")
            scenes.append(SyntheticScene(image, mask, LabelSet(int(row["num_classes"]), present), seed=int(name)))
    return scenes


def split(scenes, val_fraction: float):
    """Deterministic split: the last ``round(val_fraction * n)`` scenes are held out."""
    if not 0 <= val_fraction < 1:
        raise InvalidInputError("val_fraction must lie in [0, 1)")
    n_val = int(round(val_fraction * len(scenes)))
    cut = len(scenes) - n_val
    return list(scenes[:cut]), list(scenes[cut:])


def class_counts(scenes, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in scenes:
        for l in s.labels.foreground:
            counts[l] += 1
    return counts


def ensure_writable_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"{p} is not writable")
    return p
