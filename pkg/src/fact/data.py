"""Desk-scale datasets: a synthetic blob generator and a raw binary image format.

Binary image directory layout (all little-endian)::

    index.bin   u32 count, u32 height, u32 width, u32 channels
    images.bin  count * height * width * channels u8, HWC order per image
    labels.bin  count * u32
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Dataset spec or on-disk data is malformed."""


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int
    meta: dict = field(default_factory=dict)

    def train_plus_val(self):
        return Split(np.concatenate([self.train.x, self.val.x]), np.concatenate([self.train.y, self.val.y]))


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian blobs with an optional domain shift.

    Each class owns a fixed arrangement of coloured blobs. ``rotation``
    (degrees) turns the arrangement about the image centre, ``brightness``
    is added to every pixel, and ``contrast`` scales the blob amplitude.
    """

    seed: int = 0
    classes: int = 4
    image_size: int = 16
    channels: int = 3
    blobs: int = 3
    noise: float = 0.1
    jitter: float = 0.04
    rotation: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    train: int = 800
    val: int = 200
    test: int = 400
    normalize: bool = True
    mean: float = 0.5
    std: float = 0.5

    def shifted(self, **changes):
        return replace(self, **changes)


def _class_templates(spec):
    rng = np.random.default_rng([spec.seed, 0])
    centers = rng.uniform(0.2, 0.8, size=(spec.classes, spec.blobs, 2))
    colors = rng.uniform(0.2, 1.0, size=(spec.classes, spec.blobs, spec.channels))
    widths = rng.uniform(0.07, 0.14, size=(spec.classes, spec.blobs))
    return centers, colors, widths


def _render(spec, labels, rng):
    centers, colors, widths = _class_templates(spec)
    n, size = len(labels), spec.image_size
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    # per-sample randomness is drawn before any shift so shifted and unshifted
    # datasets share their draws
    jitter = rng.normal(0.0, spec.jitter, size=(n, spec.blobs, 2))
    amp = rng.uniform(0.7, 1.0, size=(n, spec.blobs))
    noise = rng.normal(0.0, spec.noise, size=(n, spec.channels, size, size))

    c = centers[labels] + jitter - 0.5
    theta = math.radians(spec.rotation)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    c = c @ rot.T + 0.5
    dy = yy[None, None] - c[:, :, 0, None, None]
    dx = xx[None, None] - c[:, :, 1, None, None]
    w = widths[labels][:, :, None, None]
    bumps = np.exp(-(dx**2 + dy**2) / (2 * w**2)) * (amp * spec.contrast)[:, :, None, None]
    img = np.einsum("nbhw,nbc->nchw", bumps, colors[labels])
    img = img + noise + spec.brightness
    return np.clip(img, 0.0, 1.0)


def _split_sizes(spec):
    return {"train": spec.train, "val": spec.val, "test": spec.test}


def generate_synthetic(spec):
    """Deterministic dataset for ``spec``; splits use disjoint random streams."""
    if spec.classes < 2:
        raise DataError(f"need at least 2 classes, got {spec.classes}")
    splits = {}
    for k, (name, n) in enumerate(_split_sizes(spec).items()):
        rng = np.random.default_rng([spec.seed, 1, k])
        labels = np.arange(n) % spec.classes
        rng.shuffle(labels)
        x = _render(spec, labels, rng)
        if spec.normalize:
            x = (x - spec.mean) / spec.std
        splits[name] = Split(x.astype(np.float32), labels.astype(np.int64))
    return Dataset(splits["train"], splits["val"], splits["test"], spec.classes,
                   {"source": "synthetic", **spec.__dict__})


# --------------------------------------------------------------------------
# binary image directories
# --------------------------------------------------------------------------


def write_binary_images(directory, images, labels):
    """Write ``images`` (``N x H x W x C`` uint8) and integer ``labels``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DataError(f"images must be uint8 N x H x W x C, got {images.dtype} {images.shape}")
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise DataError(f"{len(labels)} labels for {images.shape[0]} images")
    n, h, w, c = images.shape
    (directory / "index.bin").write_bytes(struct.pack("<4I", n, h, w, c))
    (directory / "images.bin").write_bytes(np.ascontiguousarray(images).tobytes())
    (directory / "labels.bin").write_bytes(labels.astype("<u4").tobytes())


def load_binary_images(directory, normalize=False, mean=0.5, std=0.5):
    """Return ``(x, y)`` with ``x`` as ``N x C x H x W`` float32 in ``[0, 1]``.

    With ``normalize`` each channel is mapped through ``(x - mean) / std``;
    ``mean``/``std`` may be scalars or per-channel sequences.
    """
    directory = Path(directory)
    try:
        header = (directory / "index.bin").read_bytes()
        raw = (directory / "images.bin").read_bytes()
        raw_labels = (directory / "labels.bin").read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read binary image directory {directory}: {exc}") from exc
    if len(header) != 16:
        raise DataError(f"{directory}/index.bin: expected 16 bytes, got {len(header)}")
    n, h, w, c = struct.unpack("<4I", header)
    if len(raw) != n * h * w * c:
        raise DataError(f"{directory}/images.bin: {len(raw)} bytes, expected {n * h * w * c}")
    if len(raw_labels) != 4 * n:
        raise DataError(f"{directory}/labels.bin: {len(raw_labels)} bytes, expected {4 * n}")
    x = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    x = x.astype(np.float32) / 255.0
    if normalize:
        m = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
        s = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
        x = (x - m) / s
    y = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
    return np.ascontiguousarray(x, dtype=np.float32), y


def split_arrays(x, y, train, val, test, seed=0):
    if train + val + test > len(y):
        raise DataError(f"splits {train}+{val}+{test} exceed {len(y)} samples")
    order = np.random.default_rng(seed).permutation(len(y))
    parts, start = [], 0
    for n in (train, val, test):
        idx = order[start:start + n]
        parts.append(Split(x[idx], y[idx]))
        start += n
    return parts


# --------------------------------------------------------------------------
# textual dataset specs (CLI / config files)
# --------------------------------------------------------------------------


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def parse_data_spec(text):
    """Parse ``synthetic:key=val,...`` or ``binary:PATH[,key=val...]``."""
    kind, _, rest = text.partition(":")
    parts = [p for p in rest.split(",") if p] if rest else []
    if kind == "synthetic":
        spec, defaults = {}, SyntheticSpec()
        for p in parts:
            key, sep, val = p.partition("=")
            if not sep or not hasattr(defaults, key):
                raise DataError(f"bad synthetic data option {p!r}")
            spec[key] = _coerce(val, getattr(defaults, key))
        return SyntheticSpec(**spec)
    if kind == "binary":
        if not parts:
            raise DataError("binary data spec needs a directory")
        opts = {"path": parts[0], "train": 800, "val": 200, "test": 0, "seed": 0,
                "normalize": True, "mean": 0.5, "std": 0.5, "classes": 0}
        for p in parts[1:]:
            key, sep, val = p.partition("=")
            if not sep or key not in opts:
                raise DataError(f"bad binary data option {p!r}")
            opts[key] = _coerce(val, opts[key])
        return opts
    raise DataError(f"unknown data spec {text!r}; use synthetic:... or binary:PATH")


def load_dataset(spec):
    """Materialize a data spec given as text or as a parsed object."""
    if isinstance(spec, str):
        spec = parse_data_spec(spec)
    if isinstance(spec, SyntheticSpec):
        return generate_synthetic(spec)
    x, y = load_binary_images(spec["path"], spec["normalize"], spec["mean"], spec["std"])
    train, val, test = split_arrays(x, y, spec["train"], spec["val"], spec["test"], spec["seed"])
    classes = spec["classes"] or int(y.max()) + 1
    return Dataset(train, val, test, classes, {"source": "binary", **spec})
