"""Prediction targets and the regression loss."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semaim import numerics as nx
from semaim.errors import ContractError, DimensionError
from semaim.numerics import Tensor

TARGET_KINDS = ("rgb", "teacher_feature")


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "rgb"
    per_patch_normalize: bool = False
    teacher_source: str | None = None
    l2_normalize_teacher: bool = True

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ContractError(f"target kind must be one of {TARGET_KINDS}, got {self.kind!r}")
        if (self.kind == "teacher_feature") != (self.teacher_source is not None):
            raise ContractError("teacher_source is required exactly when kind is teacher_feature")


def rgb_targets(patches, spec: TargetSpec = TargetSpec()) -> Tensor:
    """Raw patch pixels, or per-patch standardized pixels when requested."""
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=nx.get_default_dtype())
    if not spec.per_patch_normalize:
        return Tensor(data.copy())
    mu = data.mean(axis=-1, keepdims=True)
    std = data.std(axis=-1, keepdims=True)
    # constant patches would otherwise keep the rounding residue of the mean
    centered = np.where(np.ptp(data, axis=-1, keepdims=True) > 0, data - mu, 0.0)
    return Tensor((centered / (std + 1e-6)).astype(data.dtype))


class TeacherArchive:
    """Directory of per-image feature tensors indexed by ``index.json``."""

    INDEX = "index.json"

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / self.INDEX
        if not index_path.exists():
            raise FileNotFoundError(f"no {self.INDEX} in teacher archive {self.root}")
        self.index: dict[str, dict] = json.loads(index_path.read_text())

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __len__(self) -> int:
        return len(self.index)

    def read(self, image_id: str) -> np.ndarray:
        try:
            entry = self.index[image_id]
        except KeyError:
            raise KeyError(f"image id {image_id!r} not in teacher archive {self.root}") from None
        array = nx.read_tensor(self.root / entry["file"])
        if list(array.shape) != list(entry["shape"]):
            raise DimensionError(f"{image_id}: stored shape {array.shape} != indexed shape {tuple(entry['shape'])}")
        return array

    @classmethod
    def write(cls, root, features: dict[str, np.ndarray]) -> TeacherArchive:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        index = {}
        for image_id, array in sorted(features.items()):
            name = f"{image_id}.semt"
            nx.write_tensor(root / name, np.asarray(array))
            index[image_id] = {"file": name, "shape": list(np.shape(array))}
        (root / cls.INDEX).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
        return cls(root)


def load_teacher_targets(
    archive,
    image_id: str,
    expected_shape: tuple[int, int] | None = None,
    normalize: bool = True,
) -> Tensor:
    archive = archive if isinstance(archive, TeacherArchive) else TeacherArchive(archive)
    values = archive.read(image_id)
    if expected_shape is not None and tuple(values.shape) != tuple(expected_shape):
        raise DimensionError(f"{image_id}: teacher features {values.shape} vs expected {tuple(expected_shape)}")
    if normalize:
        norms = np.linalg.norm(values, axis=-1, keepdims=True)
        values = values / np.maximum(norms, 1e-12)
    return Tensor(values.astype(nx.get_default_dtype()))


def build_targets(patches: np.ndarray, ids, spec: TargetSpec, target_dim: int, archive=None) -> Tensor:
    """Batched targets (B, N, target_dim) for either target kind."""
    if spec.kind == "rgb":
        return rgb_targets(patches, spec)
    archive = archive or TeacherArchive(spec.teacher_source)
    n = patches.shape[-2]
    rows = [
        load_teacher_targets(archive, i, (n, target_dim), spec.l2_normalize_teacher).data for i in ids
    ]
    return Tensor(np.stack(rows))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared errors over every batch, patch and feature entry."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - Tensor(target.data.astype(pred.dtype))
    return (diff * diff).mean()
