"""Synthetic salient-blob datasets, manifests, augmentation and batching."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from semaim.errors import ContractError
from semaim.imageio import read_ppm, write_ppm
from semaim.model import patchify

SHAPES = ("disc", "square", "ring", "cross")


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    blob_radius: tuple[float, float] = (3.0, 6.0)
    blob_intensity: tuple[float, float] = (0.7, 0.95)
    background_level: float = 0.2
    background_noise_std: float = 0.03
    num_classes: int = 4
    count: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blob_radius", tuple(float(r) for r in self.blob_radius))
        object.__setattr__(self, "blob_intensity", tuple(float(v) for v in self.blob_intensity))
        r_lo, r_hi = self.blob_radius
        if not 1.0 <= r_lo <= r_hi:
            raise ContractError(f"blob_radius range {self.blob_radius} is invalid")
        if 2 * math.ceil(r_hi) + 1 > self.image_size:
            raise ContractError(f"blob radius {r_hi} does not fit in a {self.image_size}px image")
        i_lo, i_hi = self.blob_intensity
        if not i_lo <= i_hi <= 1.0:
            raise ContractError(f"blob_intensity range {self.blob_intensity} is invalid")
        if i_lo <= self.background_level + 3 * self.background_noise_std:
            raise ContractError("blob intensity must exceed background level + 3 * noise std")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ContractError(f"num_classes must be in 1..{len(SHAPES)}")
        if self.count < 1:
            raise ContractError("count must be positive")


@dataclass(frozen=True)
class Record:
    image_id: str
    path: str
    label: int
    center: tuple[int, int]


@dataclass
class DatasetManifest:
    records: list[Record]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate image ids in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, record: Record) -> Path:
        return self.root / record.path

    def find(self, image_id: str) -> Record:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(f"image id {image_id!r} not in manifest")

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def load_images(self) -> np.ndarray:
        """All images as float (M, H, W, 3) arrays in [0, 1]."""
        return np.stack([load_image(self.image_path(r)) for r in self.records])

    def save(self, path) -> None:
        lines = [f"# split={self.split}", "# id path label center_y center_x"]
        lines += [f"{r.image_id} {r.path} {r.label} {r.center[0]} {r.center[1]}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    split, records = "train", []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("split="):
                split = line.split("=", 1)[1].strip()
            continue
        image_id, rel, label, cy, cx = line.split()
        records.append(Record(image_id, rel, int(label), (int(cy), int(cx))))
    manifest = DatasetManifest(records, split, path.parent)
    for r in records:
        if not manifest.image_path(r).exists():
            raise FileNotFoundError(f"manifest {path} references missing file {r.path}")
    return manifest


def load_image(path) -> np.ndarray:
    return read_ppm(path).astype(np.float64) / 255.0


def blob_mask(shape: str, size: int, center: tuple[int, int], radius: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - center[0], xx - center[1]
    if shape == "disc":
        return dy**2 + dx**2 <= radius**2
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= radius**2) & (d2 >= (radius / 2) ** 2)
    if shape == "cross":
        arm = max(radius / 3, 1.0)
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= radius) & (np.abs(dy) <= arm))
    raise ContractError(f"unknown blob shape {shape!r}")


def render_blob_image(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int, tuple[int, int]]:
    """Deterministic (image, label, blob center) for record ``index``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    label = index % spec.num_classes
    radius = rng.uniform(*spec.blob_radius)
    margin = int(math.ceil(radius))
    center = (int(rng.integers(margin, size - margin)), int(rng.integers(margin, size - margin)))
    intensity = rng.uniform(*spec.blob_intensity)
    tint = rng.uniform(0.85, 1.0, size=3)
    image = spec.background_level + spec.background_noise_std * rng.standard_normal((size, size, 3))
    mask = blob_mask(SHAPES[label], size, center, radius)
    image[mask] = intensity * tint + spec.background_noise_std * rng.standard_normal((int(mask.sum()), 3))
    return np.clip(image, 0.0, 1.0), label, center


def generate_blob_dataset(spec: SyntheticSpec, out_dir, split: str = "train") -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for index in range(spec.count):
        image, label, center = render_blob_image(spec, index)
        image_id = f"{split}{index:05d}"
        rel = f"images/{image_id}.ppm"
        write_ppm(out_dir / rel, image)
        records.append(Record(image_id, rel, label, center))
    manifest = DatasetManifest(records, split, out_dir)
    manifest.save(out_dir / f"{split}.manifest")
    (out_dir / f"{split}.spec.json").write_text(_spec_json(spec))
    return manifest


def _spec_json(spec: SyntheticSpec) -> str:
    import json

    return json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n"


_TEACHER_BASIS: dict[int, np.ndarray] = {}


def _teacher_basis(dim: int) -> np.ndarray:
    if dim not in _TEACHER_BASIS:
        q, _ = np.linalg.qr(np.random.default_rng(20240101).standard_normal((dim, dim)))
        _TEACHER_BASIS[dim] = q
    return _TEACHER_BASIS[dim]


def oracle_teacher_features(image, patch_size: int, target_dim: int | None = None) -> np.ndarray:
    """Analytic stand-in for a pretrained teacher, (N, target_dim).

    Row k is ``m_k * u + c * w_k`` where m_k is the mean intensity of patch k,
    c is the spread (std) of patch means over the image, and u, w_0, w_1, ...
    are fixed orthonormal directions. Rows are identical for a uniform image,
    the brightest patch has the largest norm, and the brightest patch is also
    the most cosine-similar to the mean-pooled feature.
    """
    patches = patchify(np.asarray(image, dtype=np.float64), patch_size)
    n = patches.shape[0]
    target_dim = target_dim or n + 1
    if target_dim < n + 1:
        raise ContractError(f"oracle teacher needs target_dim >= {n + 1}, got {target_dim}")
    means = patches.mean(axis=1)
    spread = means.std()
    basis = _teacher_basis(target_dim)
    return means[:, None] * basis[:, 0][None, :] + spread * basis[:, 1 : n + 1].T


def random_resize_crop(
    image: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random area/aspect window and resize it bilinearly to the input size."""
    if not 0 < scale[0] <= scale[1] <= 1:
        raise ContractError(f"scale range {scale} must lie in (0, 1]")
    h, w = image.shape[:2]
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    else:
        ch, cw, top, left = h, w, 0, 0
    return bilinear_resize(image[top : top + ch, left : left + cw], (h, w))


def bilinear_resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an (H, W, C) image."""
    in_h, in_w = image.shape[:2]
    out_h, out_w = size

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(out_h, in_h)
    x0, x1, fx = coords(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    ids: list[str]


def batches(
    manifest: DatasetManifest,
    batch_size: int,
    rng: np.random.Generator,
    augment: bool = False,
    epochs: int = 1,
    images: np.ndarray | None = None,
) -> Iterator[Batch]:
    """Shuffled batches over ``epochs`` passes; the last partial batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    if len(manifest) == 0:
        raise ContractError("cannot batch an empty manifest")
    if images is None:
        images = manifest.load_images()
    labels = manifest.labels()
    ids = manifest.ids()
    for _ in range(epochs):
        order = rng.permutation(len(manifest))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            chunk = images[idx]
            if augment:
                chunk = np.stack([random_resize_crop(im, rng) for im in chunk])
            yield Batch(chunk, labels[idx], [ids[i] for i in idx])
