"""Image and label I/O, padding, augmentation and datasets."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, InvalidInputError

SPLITS = ("train", "validation", "test")


# -- PGM / PNG ----------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    data = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise DataError(f"{path}: not a grayscale PGM (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid PGM dimensions or maxval")
    count = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise DataError(f"{path}: truncated PGM raster")
        values = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    else:
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) < count:
            raise DataError(f"{path}: truncated ASCII PGM raster")
        values = np.array([int(v) for v in body[:count]], dtype=np.int64)
    return values.reshape(height, width), maxval


def _write_pgm(path: Path, values: np.ndarray, maxval: int) -> None:
    rows, cols = values.shape
    header = f"P5\n{cols} {rows}\n{maxval}\n".encode()
    dtype = ">u2" if maxval > 255 else "u1"
    path.write_bytes(header + values.astype(dtype).tobytes())


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.array(img, dtype=np.int64)
                maxval = 65535
            elif mode == "L":
                arr = np.array(img, dtype=np.int64)
                maxval = 255
            else:
                raise DataError(f"{path}: unsupported PNG mode {mode!r} (grayscale 8/16-bit only)")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return arr, maxval


def _read_raw(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return _read_pgm(path)
    if suffix == ".png":
        return _read_png(path)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def load_image(path) -> np.ndarray:
    """Load a grayscale PGM or PNG as float64 values scaled to [0, 1]."""
    values, maxval = _read_raw(path)
    return values.astype(np.float64) / maxval


def save_image(path, image, bits: int = 16) -> None:
    """Save values in [0, 1] as an 8- or 16-bit grayscale PNG or PGM."""
    path = Path(path)
    maxval = (1 << bits) - 1
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * maxval).astype(np.int64)
    _save_integers(path, q, maxval)


def _save_integers(path: Path, values: np.ndarray, maxval: int) -> None:
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        _write_pgm(path, values, maxval)
    elif suffix == ".png":
        dtype = np.uint16 if maxval > 255 else np.uint8
        Image.fromarray(values.astype(dtype)).save(path)
    else:
        raise DataError(f"{path}: unsupported image format {suffix!r}")


def load_labels(path) -> np.ndarray:
    """Label image: raw pixel value = class index."""
    values, _ = _read_raw(path)
    return values.astype(np.int64)


def save_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise InvalidInputError("label images hold class indices in [0, 255]")
    _save_integers(Path(path), labels.astype(np.int64), 255)


# -- geometry helpers ---------------------------------------------------------

def mirror_pad(image, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Reflect about the border pixel without repeating it: row -1 = row 1."""
    image = np.asarray(image)
    rows, cols = image.shape[-2:]
    for name, pad, size in (("top", top, rows), ("bottom", bottom, rows), ("left", left, cols), ("right", right, cols)):
        if pad < 0:
            raise InvalidInputError(f"negative {name} padding {pad}")
        if pad and pad >= size:
            raise InvalidInputError(f"{name} padding {pad} needs an image dimension > {pad}, got {size}")
    widths = [(0, 0)] * (image.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(image, widths, mode="reflect")


def dihedral_augment(image, labels, index: int):
    """Apply symmetry ``index`` of the square: rotate by ``index % 4`` quarter turns, then flip if ``index >= 4``."""
    if not 0 <= index < 8:
        raise InvalidInputError(f"dihedral index must be in [0, 8), got {index}")

    def apply(a):
        a = np.rot90(np.asarray(a), index % 4)
        return np.ascontiguousarray(a[:, ::-1] if index >= 4 else a)

    return apply(image), apply(labels)


def dihedral_inverse(index: int) -> int:
    if not 0 <= index < 8:
        raise InvalidInputError(f"dihedral index must be in [0, 8), got {index}")
    return index if index >= 4 else (4 - index) % 4


def downsample(image, factor: int) -> np.ndarray:
    """Block mean over ``factor x factor`` blocks; partial blocks are dropped."""
    if factor < 1:
        raise InvalidInputError(f"downsample factor must be >= 1, got {factor}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[0] // factor, image.shape[1] // factor
    if h == 0 or w == 0:
        raise InvalidInputError(f"image {image.shape} is smaller than factor {factor}")
    return image[:h * factor, :w * factor].reshape(h, factor, w, factor).mean(axis=(1, 3))


def downsample_labels(labels, factor: int, n_classes: int | None = None) -> np.ndarray:
    """Majority vote per block; ties go to the lowest class index."""
    if factor < 1:
        raise InvalidInputError(f"downsample factor must be >= 1, got {factor}")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    h, w = labels.shape[0] // factor, labels.shape[1] // factor
    blocks = labels[:h * factor, :w * factor].reshape(h, factor, w, factor).transpose(0, 2, 1, 3).reshape(h, w, -1)
    counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    return counts.argmax(axis=-1)


# -- datasets -----------------------------------------------------------------

@dataclass
class Item:
    image: np.ndarray
    labels: np.ndarray
    id: str
    split: str = "train"

    def __post_init__(self):
        if np.shape(self.image) != np.shape(self.labels):
            raise InvalidInputError(f"item {self.id}: image {np.shape(self.image)} and labels {np.shape(self.labels)} differ")
        if self.split not in SPLITS:
            raise InvalidInputError(f"item {self.id}: unknown split {self.split!r}")


@dataclass
class Dataset:
    items: list[Item] = field(default_factory=list)
    n_classes: int = 2

    def __post_init__(self):
        for it in self.items:
            if it.labels.size and (it.labels.min() < 0 or it.labels.max() >= self.n_classes):
                raise InvalidInputError(f"item {it.id}: labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.items)

    def split(self, name: str) -> list[Item]:
        return [it for it in self.items if it.split == name]


def split_dataset(items: Sequence[Item], fractions=(0.5, 0.25), seed: int = 0, n_classes: int = 2) -> Dataset:
    """Shuffle deterministically and assign train/validation/test.

    Train and validation sizes are floored; the remainder is test.
    """
    if not items:
        raise InvalidInputError("cannot split an empty item list")
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0 or f_train + f_val > 1:
        raise InvalidInputError(f"fractions must be positive with sum <= 1, got {fractions}")
    n = len(items)
    n_train = math.floor(f_train * n)
    n_val = math.floor(f_val * n)
    order = np.random.default_rng(seed).permutation(n)
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "validation"
    split[order[n_train + n_val:]] = "test"
    return Dataset([replace(it, split=str(s)) for it, s in zip(items, split)], n_classes)


def class_pixel_counts(items: Sequence[Item], n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for it in items:
        counts += np.bincount(it.labels.ravel(), minlength=n_classes)[:n_classes]
    return counts


# -- synthetic textures -------------------------------------------------------

def _stripes(rows, cols, vertical, rng, period=4.0, amplitude=0.35):
    phase = rng.uniform(0, 2 * np.pi)
    axis = np.arange(cols if vertical else rows)
    wave = 0.5 + amplitude * np.sin(2 * np.pi * axis / period + phase)
    return np.broadcast_to(wave[None, :] if vertical else wave[:, None], (rows, cols))


def _blob(rows, cols, rng, lo, hi):
    """Random ellipse mask whose area fraction lies in [lo, hi]."""
    yy, xx = np.mgrid[0:rows, 0:cols]
    while True:
        cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
        ry, rx = rng.uniform(0.15, 0.7) * rows, rng.uniform(0.15, 0.7) * cols
        theta = rng.uniform(0, np.pi)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        mask = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        if lo <= mask.mean() <= hi:
            return mask


def synth_texture_dataset(n_images: int, rows: int, cols: int, seed: int = 0, noise: float = 0.08,
                          defect_fraction: float | None = None) -> list[Item]:
    """Two-texture segmentation task with a known label map.

    Background (class 0) is horizontal stripes, the foreground blob (class 1)
    vertical stripes of the same period and mean, so single-pixel intensity
    carries no class information.  By default every image's foreground
    covers 20-80% of the pixels.  With ``defect_fraction`` set, only that
    share of images gets a (smaller, 3-15%) foreground blob and the rest are
    pure background, which models defect detection.
    """
    rng = np.random.default_rng(seed)
    items = []
    n_defect = None if defect_fraction is None else round(defect_fraction * n_images)
    for i in range(n_images):
        if n_defect is None:
            mask = _blob(rows, cols, rng, 0.2, 0.8)
        elif i < n_defect:
            mask = _blob(rows, cols, rng, 0.03, 0.15)
        else:
            mask = np.zeros((rows, cols), dtype=bool)
        horiz = _stripes(rows, cols, False, rng)
        vert = _stripes(rows, cols, True, rng)
        img = np.where(mask, vert, horiz) + noise * rng.standard_normal((rows, cols))
        items.append(Item(np.clip(img, 0.0, 1.0), mask.astype(np.int64), f"synth{i:04d}"))
    if n_defect is not None:
        order = rng.permutation(n_images)
        items = [replace(items[j], id=f"synth{i:04d}") for i, j in enumerate(order)]
    return items


# -- manifests ----------------------------------------------------------------

MANIFEST_COLUMNS = ("id", "imagePath", "labelPath", "split")


def read_manifest(path, n_classes: int = 2) -> Dataset:
    """Load every item listed in a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such manifest")
    base = path.parent
    items = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            image = load_image(base / row["imagePath"])
            labels = load_labels(base / row["labelPath"])
            if image.shape != labels.shape:
                raise DataError(f"{path}: item {row['id']} image {image.shape} vs labels {labels.shape}")
            split = row["split"] or "train"
            if split not in SPLITS:
                raise DataError(f"{path}: item {row['id']} has unknown split {split!r}")
            items.append(Item(image, labels, row["id"], split))
    if not items:
        raise DataError(f"{path}: manifest lists no items")
    try:
        return Dataset(items, n_classes)
    except InvalidInputError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_manifest(dataset: Dataset, directory, image_format: str = "png") -> Path:
    """Write images, labels and ``manifest.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for it in dataset.items:
            img_name = f"{it.id}.{image_format}"
            lab_name = f"{it.id}_labels.{image_format}"
            save_image(directory / img_name, it.image)
            save_labels(directory / lab_name, it.labels)
            writer.writerow((it.id, img_name, lab_name, it.split))
    return manifest
