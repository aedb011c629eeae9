"""Digit dataset pipeline: IDX files, affine transforms, benchmark regeneration.

Everything downstream trains on 32x32 images in [0, 1]. Two benchmark-style
regenerators are provided: "affnist-style" (small random affine transforms on
a padded canvas) and "rot-style" (full random rotation). Both derive each
sample's RNG stream from (seed, sample index), so generation is reproducible
regardless of evaluation order.

No dataset downloads: a small procedural glyph source (`synthetic_digits`)
stands in for scanned digits so the whole pipeline is self-contained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """An IDX file is malformed or inconsistent with its sibling."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    provenance: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range for class_count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, note):
        prov = dict(self.provenance)
        prov["subset"] = note
        return Dataset(self.images[indices], self.labels[indices], self.class_count, prov)


@dataclass
class AffineParams:
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    angle: float = 0.0  # degrees; positive turns content clockwise on screen

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair (big-endian, magics 2051/2049)."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"{images_path}: truncated header")
        magic, n, h, w = struct.unpack(">iiii", header)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic {magic}")
        raw = f.read()
    if len(raw) != n * h * w:
        raise IdxFormatError(f"{images_path}: expected {n * h * w} pixel bytes, got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)

    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{labels_path}: truncated header")
        magic, n_labels = struct.unpack(">ii", header)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic {magic}")
        raw = f.read()
    if len(raw) != n_labels:
        raise IdxFormatError(f"{labels_path}: expected {n_labels} label bytes, got {len(raw)}")
    if n_labels != n:
        raise IdxFormatError(f"image count {n} != label count {n_labels}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    class_count = int(labels.max()) + 1 if n else 10
    return Dataset(
        images.astype(np.float32) / 255.0,
        labels,
        class_count,
        {"source": str(images_path)},
    )


def save_idx(dataset, images_path, labels_path):
    """Write a dataset back out as an IDX pair (pixels quantized to bytes)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX image files hold single-channel images")
    pixels = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def write_recipe(path, provenance):
    with open(path, "w") as f:
        for key in sorted(provenance):
            f.write(f"{key}={provenance[key]}\n")


def read_recipe(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def _bilinear_sample(images, src_r, src_c, fill):
    """Sample (N,C,H,W) images at per-sample source grids (N,Ho,Wo).

    fill="zero": out-of-canvas samples contribute 0 (affine transforms).
    fill="clamp": coordinates clamp to the border (resizing).
    """
    n, c, h, w = images.shape
    if fill == "clamp":
        src_r = np.clip(src_r, 0.0, h - 1.0)
        src_c = np.clip(src_c, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0).astype(images.dtype)
    fc = (src_c - c0).astype(images.dtype)

    flat = images.reshape(n, c, h * w)
    ho, wo = src_r.shape[1:]
    out = np.zeros((n, c, ho * wo), dtype=images.dtype)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        if fill == "zero":
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = wgt * valid
        idx = (np.clip(rr, 0, h - 1) * w + np.clip(cc, 0, w - 1)).reshape(n, 1, -1)
        out += np.take_along_axis(flat, idx, axis=2) * wgt.reshape(n, 1, -1)
    return out.reshape(n, c, ho, wo)


def _source_grid(h, w, tx, ty, scale, angle_deg):
    """Inverse-mapped source coordinates for each (N,) parameter vector."""
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = (rows - cy)[None, :, None] - np.asarray(ty, np.float64)[:, None, None]
    dx = (cols - cx)[None, None, :] - np.asarray(tx, np.float64)[:, None, None]
    rad = np.deg2rad(np.asarray(angle_deg, np.float64))[:, None, None]
    s = np.asarray(scale, np.float64)[:, None, None]
    cos_a, sin_a = np.cos(rad), np.sin(rad)
    src_c = cx + (cos_a * dx + sin_a * dy) / s
    src_r = cy + (cos_a * dy - sin_a * dx) / s
    return src_r, src_c


def affine_batch(images, tx, ty, scale, angle):
    """Affine-transform each image of a (N,C,H,W) batch by its own parameters.

    Rotation and scaling are about the image center; output pixels sample the
    source at the inverse-transformed coordinate with bilinear interpolation
    and zero fill outside the canvas.
    """
    n, _, h, w = images.shape
    src_r, src_c = _source_grid(
        h, w,
        np.broadcast_to(np.asarray(tx, np.float64), (n,)),
        np.broadcast_to(np.asarray(ty, np.float64), (n,)),
        np.broadcast_to(np.asarray(scale, np.float64), (n,)),
        np.broadcast_to(np.asarray(angle, np.float64), (n,)),
    )
    return _bilinear_sample(images, src_r, src_c, fill="zero")


def affine_transform(image, params):
    """Single-image (C,H,W) version of affine_batch; identity returns the input."""
    out = affine_batch(image[None], params.tx, params.ty, params.scale, params.angle)
    return out[0]


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of (C,H,W) with half-pixel centers and edge clamping."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    src_r = ((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5)[None, :, None]
    src_c = ((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5)[None, None, :]
    grid_r = np.broadcast_to(src_r, (1, out_h, out_w))
    grid_c = np.broadcast_to(src_c, (1, out_h, out_w))
    return _bilinear_sample(image[None], grid_r, grid_c, fill="clamp")[0]


def resize_batch(images, out_h, out_w):
    out = np.empty(images.shape[:2] + (out_h, out_w), dtype=images.dtype)
    for i in range(len(images)):
        out[i] = resize_bilinear(images[i], out_h, out_w)
    return out


def pad_centered(images, target):
    """Zero-pad (N,C,H,W) images to target x target, content centered."""
    n, c, h, w = images.shape
    if h > target or w > target:
        raise ValueError(f"cannot pad {h}x{w} down to {target}x{target}")
    top, left = (target - h) // 2, (target - w) // 2
    out = np.zeros((n, c, target, target), dtype=images.dtype)
    out[:, :, top : top + h, left : left + w] = images
    return out


@dataclass
class AffineRanges:
    tx: tuple = (-6.0, 6.0)
    ty: tuple = (-6.0, 6.0)
    angle: tuple = (-20.0, 20.0)
    scale: tuple = (0.8, 1.2)


def _sample_params(seed, index, ranges):
    rng = np.random.default_rng([seed, index])
    return (
        rng.uniform(*ranges.tx),
        rng.uniform(*ranges.ty),
        rng.uniform(*ranges.angle),
        rng.uniform(*ranges.scale),
    )


def make_affnist_style(dataset, seed, ranges=None, out_size=32):
    """Random small affine transform of every sample on a padded canvas.

    28x28 sources are padded to 40x40 (generally +6 px per border) before the
    transform, then resized to 32x32.
    """
    ranges = ranges or AffineRanges()
    n, _, h, w = dataset.images.shape
    canvas = max(h, w) + 12
    padded = pad_centered(dataset.images, canvas)
    params = np.array([_sample_params(seed, i, ranges) for i in range(n)], np.float64)
    if n:
        moved = affine_batch(padded, params[:, 0], params[:, 1], params[:, 3], params[:, 2])
    else:
        moved = padded
    images = resize_batch(moved, out_size, out_size)
    prov = dict(dataset.provenance)
    prov.update(
        transform="affnist-style",
        seed=str(seed),
        canvas=str(canvas),
        out_size=str(out_size),
        tx=f"{ranges.tx}", ty=f"{ranges.ty}",
        angle=f"{ranges.angle}", scale=f"{ranges.scale}",
    )
    return Dataset(images, dataset.labels.copy(), dataset.class_count, prov)


def rotation_angle(seed, index):
    """The rotation drawn for one rot-style sample: uniform in [0, 360)."""
    return np.random.default_rng([seed, index]).uniform(0.0, 360.0)


def make_rot_style(dataset, seed, out_size=32):
    """Rotate every sample by an angle uniform in [0, 360), then resize."""
    n = len(dataset)
    angles = np.array([rotation_angle(seed, i) for i in range(n)])
    rotated = affine_batch(dataset.images, 0.0, 0.0, 1.0, angles) if n else dataset.images
    images = resize_batch(rotated, out_size, out_size)
    prov = dict(dataset.provenance)
    prov.update(transform="rot-style", seed=str(seed), out_size=str(out_size))
    return Dataset(images, dataset.labels.copy(), dataset.class_count, prov)


def rotate_batch(images, rng):
    """Train-time augmentation: fresh uniform [0, 360) rotation per sample."""
    angles = rng.uniform(0.0, 360.0, size=len(images))
    return affine_batch(images, 0.0, 0.0, 1.0, angles)


def sample_few_shot(dataset, n_per_class, seed):
    """Exactly n_per_class samples per class, uniform without replacement."""
    rng = np.random.default_rng(seed)
    picks = []
    for cls in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < n_per_class:
            raise ValueError(
                f"class {cls} has {len(idx)} samples, need {n_per_class}"
            )
        picks.append(rng.choice(idx, size=n_per_class, replace=False))
    indices = np.concatenate(picks)
    return dataset.subset(indices, f"few-shot n={n_per_class} seed={seed}")


# 5x7 digit glyphs for the procedural source; '#' marks lit cells.
_GLYPHS = [
    " ### |#   #|#  ##|# # #|##  #|#   #| ### ",
    "  #  | ##  |  #  |  #  |  #  |  #  | ### ",
    " ### |#   #|    #|   # |  #  | #   |#####",
    " ### |#   #|    #|  ## |    #|#   #| ### ",
    "   # |  ## | # # |#  # |#####|   # |   # ",
    "#####|#    |#### |    #|    #|#   #| ### ",
    " ### |#    |#    |#### |#   #|#   #| ### ",
    "#####|    #|   # |  #  |  #  |  #  |  #  ",
    " ### |#   #|#   #| ### |#   #|#   #| ### ",
    " ### |#   #|#   #| ####|    #|    #| ### ",
]


def _glyph_array(digit):
    rows = _GLYPHS[digit].split("|")
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows], np.float32)


def synthetic_digits(n_per_class, seed, size=28, jitter=True):
    """Procedural stand-in for a scanned digit set.

    Each sample is a glyph upscaled onto a size x size canvas with a small
    random affine jitter and intensity variation, derived from
    (seed, class, index) so the set is reproducible sample by sample.
    """
    glyphs = [
        resize_bilinear(_glyph_array(d)[None], 20, 20 * 5 // 7)[0] for d in range(10)
    ]
    images = np.zeros((10 * n_per_class, 1, size, size), np.float32)
    labels = np.zeros(10 * n_per_class, np.int64)
    k = 0
    for digit in range(10):
        glyph = glyphs[digit]
        gh, gw = glyph.shape
        top, left = (size - gh) // 2, (size - gw) // 2
        base = np.zeros((1, size, size), np.float32)
        base[0, top : top + gh, left : left + gw] = glyph
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, digit, i])
            img = base
            if jitter:
                params = AffineParams(
                    tx=rng.uniform(-2, 2),
                    ty=rng.uniform(-2, 2),
                    scale=rng.uniform(0.9, 1.1),
                    angle=rng.uniform(-8, 8),
                )
                img = affine_transform(base, params).astype(np.float32)
            images[k] = img * rng.uniform(0.7, 1.0)
            labels[k] = digit
            k += 1
    return Dataset(
        images, labels, 10,
        {"source": "synthetic-glyphs", "seed": str(seed), "n_per_class": str(n_per_class)},
    )
