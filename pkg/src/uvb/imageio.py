"""Binary PGM (P5) image grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(images: np.ndarray, value_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    lo, hi = value_range
    scaled = (np.asarray(images, dtype=float) - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def tile(grid: np.ndarray, pad: int = 1, fill: int = 0) -> np.ndarray:
    """(rows, cols, h, w) uint8 -> one (rows*(h+pad)+pad, cols*(w+pad)+pad) canvas."""
    rows, cols, h, w = grid.shape
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            top, left = pad + r * (h + pad), pad + c * (w + pad)
            canvas[top : top + h, left : left + w] = grid[r, c]
    return canvas


def pgm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM file")
    w, h = int(parts[1]), int(parts[2])
    if len(parts[4]) < w * h:
        raise ValueError(f"{path}: truncated PGM data")
    data = raw[len(raw) - w * h :]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_image_grid(path, rows: list[np.ndarray], image_shape: tuple[int, int],
                     value_range: tuple[float, float] = (0.0, 1.0), pad: int = 1) -> None:
    """Each entry of ``rows`` is an (n, h*w) matrix that becomes one grid row."""
    h, w = image_shape
    grid = np.stack([np.asarray(r, dtype=float).reshape(-1, h, w) for r in rows])
    write_pgm(path, tile(to_bytes(grid, value_range), pad=pad))


def square_shape(d: int) -> tuple[int, int] | None:
    side = int(round(np.sqrt(d)))
    return (side, side) if side * side == d and side >= 4 else None
