"""Dataset ingestion, stratified k-fold plans, augmentation, resizing and the
synthetic four-class texture dataset."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SYNTH_CLASSES = ("blob", "ring", "speckle", "stripe")


@dataclass
class DatasetManifest:
    class_names: list[str]
    samples: list[tuple[str, int]]
    seed: int = 42
    root: str | None = None
    norm_stats: dict | None = None
    rejects: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.samples = [(str(s), int(c)) for s, c in self.samples]
        ids = [s for s, _ in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("manifest source_ids must be unique")
        for sid, c in self.samples:
            if not 0 <= c < len(self.class_names):
                raise DataError(f"{sid}: class index {c} outside [0, {len(self.class_names)})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def source_ids(self) -> list[str]:
        return [s for s, _ in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(n) for name, n in zip(self.class_names, counts)}

    def image_path(self, source_id: str) -> Path:
        if self.root is None:
            raise DataError("manifest has no root directory")
        return Path(self.root) / source_id

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "samples": [list(s) for s in self.samples],
            "seed": self.seed,
            "root": self.root,
            "norm_stats": self.norm_stats,
            "rejects": self.rejects,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        d["samples"] = [tuple(s) for s in d["samples"]]
        return cls(**d)


def load_dataset(root, seed: int = 42) -> DatasetManifest:
    """Index ``root/<class_name>/*.png|jpg``; classes are numbered in sorted order.

    Files that fail to decode are listed in ``manifest.rejects``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class directories")
    samples, rejects = [], []
    for idx, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        good = 0
        for f in files:
            sid = f"{cdir.name}/{f.name}"
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                rejects.append(sid)
                continue
            samples.append((sid, idx))
            good += 1
        if good == 0:
            raise DataError(f"class directory {cdir} has no decodable images")
    return DatasetManifest([d.name for d in class_dirs], samples, seed, str(root), rejects=rejects)


def read_image(path) -> np.ndarray:
    """Decode an image file to float32 ``[3, H, W]`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_images(manifest: DatasetManifest, size: int) -> np.ndarray:
    """All manifest images resized to ``size`` (no normalization), ``[N, 3, size, size]``."""
    out = np.empty((len(manifest.samples), 3, size, size), dtype=np.float32)
    for i, (sid, _) in enumerate(manifest.samples):
        out[i] = resize(read_image(manifest.image_path(sid)), size)
    return out


# ---------------------------------------------------------------------------
# fold plans
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]
    seed: int = 42
    norm_stats: dict[int, dict] = field(default_factory=dict)

    def fold_ids(self, i: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == i]

    def train_ids(self, i: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f != i]

    def sizes(self) -> list[int]:
        return [int(n) for n in np.bincount(list(self.assignment.values()), minlength=self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": self.assignment,
                "norm_stats": {str(i): s for i, s in self.norm_stats.items()}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        d = json.loads(Path(path).read_text())
        return cls(d["k"], d["assignment"], d["seed"], {int(i): s for i, s in d["norm_stats"].items()})


def kfold_split(manifest: DatasetManifest, k: int, seed: int = 42) -> FoldPlan:
    """Stratified k-fold plan: shuffle each class with its own seeded stream, then
    deal all samples round-robin into folds.

    Dealing continues across class boundaries, so fold sizes differ by at most
    one overall and per-class counts per fold differ by at most one.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    labels = manifest.labels
    ids = manifest.source_ids
    assignment: dict[str, int] = {}
    pos = 0
    for c in range(manifest.num_classes):
        members = [ids[i] for i in np.flatnonzero(labels == c)]
        if len(members) < k:
            raise DataError(
                f"class {manifest.class_names[c]!r} has {len(members)} samples, fewer than k={k}; cannot stratify"
            )
        order = np.random.default_rng([seed, c]).permutation(len(members))
        for j in order:
            assignment[members[j]] = pos % k
            pos += 1
    # keep manifest order for a stable, readable plan
    return FoldPlan(k, {sid: assignment[sid] for sid in ids}, seed)


def channel_stats(images: np.ndarray) -> dict:
    """Per-channel mean/std over ``[N, 3, H, W]`` images, accumulated in float64."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return {"mean": mean.tolist(), "std": np.maximum(std, 1e-6).tolist()}


# ---------------------------------------------------------------------------
# image transforms
# ---------------------------------------------------------------------------


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    src = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (src - i0).astype(img.dtype)
    shape = [1] * img.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    return a + (b - a) * frac


def resize(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` to ``size`` (int for square, or ``(h, w)``).

    Sample positions are pixel-centre aligned, so an integer-factor downscale
    averages the two nearest source pixels along each axis.
    """
    h, w = (size, size) if np.isscalar(size) else size
    return _resize_axis(_resize_axis(img, int(h), 1), int(w), 2)


def resize_normalize(img: np.ndarray, size: int, mean, std) -> np.ndarray:
    """Resize to ``size`` x ``size`` and standardize each channel as ``(x - mean) / std``."""
    out = resize(np.asarray(img, dtype=np.float32), size)
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return (out - mean) / std


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    # kernel truncated at 4 sigma, edges replicated
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), truncate=4.0, mode="nearest")


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counterclockwise rotation about the image centre, bilinear, edge-replicate fill."""
    if degrees == 0:
        return img.copy()
    out = ndimage.rotate(img, degrees, axes=(2, 1), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def augment(img: np.ndarray, rng: np.random.Generator, *, flip: bool | None = None,
            blur_sigma: float | None = None, angle: float | None = None) -> np.ndarray:
    """Random horizontal flip (p=0.5), Gaussian blur (p=0.5, sigma ~ U[0.1, 2]) and
    rotation by U[0, 5] degrees.

    The keyword arguments force a component on/off (``blur_sigma=0`` disables
    blur); the random draws are made either way so forcing one component does
    not shift the others.
    """
    do_flip = rng.random() < 0.5
    do_blur = rng.random() < 0.5
    sigma = rng.uniform(0.1, 2.0)
    theta = rng.uniform(0.0, 5.0)
    if flip is not None:
        do_flip = flip
    if blur_sigma is not None:
        do_blur, sigma = blur_sigma > 0, blur_sigma
    if angle is not None:
        theta = angle
    out = img
    if do_flip:
        out = hflip(out)
    if do_blur:
        out = gaussian_blur(out, sigma)
    return rotate(out, theta).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    if kind == "blob":
        r = rng.uniform(0.12, 0.25) * size
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        # a second, fainter blob as nuisance
        cy2, cx2 = rng.uniform(0.1, 0.9, size=2) * size
        g += 0.5 * np.exp(-((yy - cy2) ** 2 + (xx - cx2) ** 2) / (2 * (0.6 * r) ** 2))
        return np.clip(g, 0, 1)
    if kind == "ring":
        radius = rng.uniform(0.2, 0.35) * size
        width = rng.uniform(0.03, 0.05) * size
        d = np.hypot(yy - cy, xx - cx)
        return (np.abs(d - radius) < width).astype(np.float64)
    if kind == "speckle":
        return (rng.random((size, size)) < rng.uniform(0.2, 0.4)).astype(np.float64)
    if kind == "stripe":
        period = rng.uniform(0.06, 0.1) * size
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return (np.sin(2 * np.pi * u / period + phase) > 0).astype(np.float64)
    raise ValueError(kind)


def synth_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``[3, size, size]`` uint8 texture image with brightness/colour nuisance."""
    tex = _texture(kind, size, rng)
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    tint = rng.uniform(0.8, 1.0, size=3)
    img = (lo + (hi - lo) * tex)[None] * tint[:, None, None]
    img += rng.normal(0, 0.02, size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synthesize_dataset(n_per_class: int, seed: int, out, size: int = 128) -> DatasetManifest:
    """Write ``n_per_class`` PNGs for each of four texture classes under ``out``."""
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    out = Path(out)
    for c, kind in enumerate(SYNTH_CLASSES):
        cdir = out / kind
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, c, i])
            arr = synth_image(kind, size, rng)
            Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(cdir / f"{kind}_{i:04d}.png", optimize=False)
    return load_dataset(out, seed)
