"""Binary PPM (P6) / PGM (P5) reading and writing, plus heatmap rendering."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from semaim.errors import ContractError


def _palette() -> np.ndarray:
    """256-entry cold (index 0, blue) to warm (index 255, red) colour map."""
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        seg, t = divmod(i, 64)
        ramp = min(4 * t, 255)
        if seg == 0:
            rgb = (0, ramp, 255)
        elif seg == 1:
            rgb = (0, 255, 255 - ramp)
        elif seg == 2:
            rgb = (ramp, 255, 0)
        else:
            rgb = (255, 255 - ramp, 0)
        table[i] = rgb
    return table


PALETTE = _palette()


def _to_uint8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write an (H, W, 3) image; floats are taken to lie in [0, 1]."""
    data = _to_uint8(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ContractError(f"PPM needs an (H, W, 3) image, got {data.shape}")
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def write_pgm(path, image) -> None:
    data = _to_uint8(image)
    if data.ndim != 2:
        raise ContractError(f"PGM needs an (H, W) image, got {data.shape}")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_netpbm(path) -> tuple[str, np.ndarray]:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = fields[0].decode("ascii")
    width, height, maxval = (int(f) for f in fields[1:])
    if magic not in ("P5", "P6"):
        raise ContractError(f"{path}: unsupported netpbm type {magic}")
    if maxval != 255:
        raise ContractError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == "P6" else 1
    count = width * height * channels
    raster = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic, raster.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    magic, data = _read_netpbm(path)
    if magic != "P6":
        raise ContractError(f"{path}: expected a P6 image, found {magic}")
    return data


def read_pgm(path) -> np.ndarray:
    magic, data = _read_netpbm(path)
    if magic != "P5":
        raise ContractError(f"{path}: expected a P5 image, found {magic}")
    return data


def normalize_to_byte(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def heatmap(values) -> np.ndarray:
    """Map a 2D field to RGB with the fixed palette (max value = warmest)."""
    return PALETTE[normalize_to_byte(values)]


def upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement of a patch grid to pixel resolution."""
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)
