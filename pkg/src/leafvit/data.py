"""Directory-per-class datasets: scanning, stratified splitting, PPM decoding, preprocessing."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DecodeError, IngestionError
from .tensor import Tensor, make_rng

IMAGE_SIZE = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
VAL_FRACTION = 0.2
IMAGE_SUFFIXES = (".ppm",)
SPLITS = ("train", "val")


@dataclass(frozen=True)
class Record:
    path: Path
    class_id: int
    split: str


@dataclass
class DatasetIndex:
    labels: list[str]
    records: list[Record]
    seed: int = 0

    def split(self, name: str) -> list[Record]:
        if name not in SPLITS:
            raise IngestionError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        table = {label: {"train": 0, "val": 0} for label in self.labels}
        for r in self.records:
            table[self.labels[r.class_id]][r.split] += 1
        return table

    def write_labels(self, path: str | Path) -> None:
        write_labels(self.labels, path)


@dataclass
class ImageBatch:
    pixels: Tensor
    class_ids: np.ndarray
    paths: list[Path] = field(default_factory=list)


def write_labels(labels: list[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{label}\n" for label in labels), encoding="utf-8")


def read_labels(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line]


def val_count(n: int) -> int:
    """Validation share of a class with ``n`` images: 20%, rounded half up.

    Classes with two or more images keep at least one image on each side.
    """
    k = math.floor(VAL_FRACTION * n + 0.5)
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return k


def scan_dataset(root: str | Path, seed: int = 0) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name.encode("utf-8"))
    if not class_dirs:
        raise IngestionError(f"no class subdirectories under {root}")
    rng = make_rng(seed)
    records: list[Record] = []
    for class_id, cdir in enumerate(class_dirs):
        files = sorted(
            (p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.name.encode("utf-8"),
        )
        if not files:
            raise IngestionError(f"class {cdir.name!r} has no images")
        order = rng.permutation(len(files))
        n_val = val_count(len(files))
        cut = len(files) - n_val
        records.extend(
            Record(files[j], class_id, "train" if pos < cut else "val") for pos, j in enumerate(order)
        )
    return DatasetIndex([p.name for p in class_dirs], records, seed)


# ---------------------------------------------------------------------------
# PPM codec
# ---------------------------------------------------------------------------
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(raw: bytes) -> np.ndarray:
    """Binary P6 with maxval 255 -> uint8 array [H, W, 3]."""
    if raw[:2] != b"P6":
        raise DecodeError("not a binary PPM (magic must be P6)", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DecodeError(f"truncated header while reading {name}", pos)
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise DecodeError(f"bad {name} field {m.group(1)!r}", m.start(1)) from None
        pos = m.end(1)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise DecodeError(f"invalid image size {width}x{height}", 2)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} (only 255)", pos)
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after header", pos)
    pos += 1
    need = width * height * 3
    if len(raw) - pos < need:
        raise DecodeError(f"truncated pixel data: need {need} bytes, have {len(raw) - pos}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise ValueError("encode_ppm expects [H, W, 3] uint8 pixels")
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_image(path: str | Path) -> Tensor:
    """Read a PPM file into a channel-first tensor with values ``byte / 255``."""
    data = Path(path).read_bytes()
    try:
        pixels = decode_ppm(data)
    except DecodeError as exc:
        raise DecodeError(f"{path}: {exc}") from None
    return Tensor(pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------
def _axis_weights(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(x: Tensor, size: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> Tensor:
    """Bilinear resize of ``[C, H, W]`` using half-pixel centers (align_corners=False)."""
    c, h, w = x.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return Tensor(x.data)
    y0, y1, fy = _axis_weights(h, oh)
    x0, x1, fx = _axis_weights(w, ow)
    img = x.data.astype(np.float64)
    # lerp form a + f*(b - a) keeps constant regions exact
    a, b = img[:, y0, :], img[:, y1, :]
    top = a + fy[None, :, None] * (b - a)
    a, b = top[:, :, x0], top[:, :, x1]
    out = a + fx[None, None, :] * (b - a)
    return Tensor(out.astype(np.float32))


def normalize(x: Tensor) -> Tensor:
    return Tensor((x.data - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None])


def denormalize(x: Tensor) -> Tensor:
    return Tensor(x.data * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None])


def load_image(path: str | Path, size: int = IMAGE_SIZE) -> Tensor:
    """Decode, resize to ``size`` x ``size`` and normalize one image."""
    return normalize(resize_bilinear(decode_image(path), (size, size)))


def make_batches(
    index: DatasetIndex,
    split: str,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
    size: int = IMAGE_SIZE,
) -> Iterator[ImageBatch]:
    """Stream preprocessed batches.

    The train split is reshuffled from ``(seed, epoch)``; val keeps index order.
    The final partial batch is emitted.
    """
    records = index.split(split)
    if not records:
        raise IngestionError(f"split {split!r} is empty")
    if batch_size < 1:
        raise IngestionError("batch_size must be >= 1")
    order = make_rng(seed, epoch).permutation(len(records)) if split == "train" else np.arange(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        pixels = []
        for rec in chunk:
            try:
                pixels.append(load_image(rec.path, size).data)
            except (OSError, DecodeError) as exc:
                raise IngestionError(f"cannot read {rec.path}: {exc}") from exc
        yield ImageBatch(
            Tensor(np.stack(pixels)),
            np.array([r.class_id for r in chunk], dtype=np.int64),
            [r.path for r in chunk],
        )


# ---------------------------------------------------------------------------
# synthetic fixture
# ---------------------------------------------------------------------------
TOY_COLORS = {"blue": (40, 70, 200), "green": (50, 170, 60), "red": (200, 50, 40)}


def make_toy_dataset(root: str | Path, per_class: int = 64, size: int = IMAGE_SIZE, seed: int = 0) -> Path:
    """Write the 3-class color-patch fixture as PPM files under ``root``.

    Each image is a noisy grey background with one colored square whose
    position and size vary; the class is the square's color.
    """
    root = Path(root)
    rng = make_rng(seed)
    for name, color in TOY_COLORS.items():
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = rng.normal(128, 20, size=(size, size, 3))
            side = int(rng.integers(size // 3, size // 2 + 1))
            top = int(rng.integers(0, size - side + 1))
            left = int(rng.integers(0, size - side + 1))
            tint = np.array(color) + rng.normal(0, 10, size=3)
            img[top : top + side, left : left + side] = tint + rng.normal(0, 8, size=(side, side, 3))
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            (cdir / f"{name}_{i:03d}.ppm").write_bytes(encode_ppm(pixels))
    return root
