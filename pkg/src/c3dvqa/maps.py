"""Binary PGM output of intermediate network responses."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import C3DVQA

MAP_KINDS = ("distorted_branch", "residual_branch", "threshold", "masked")


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def to_gray(stack: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 255]; a constant stack maps to black."""
    stack = np.asarray(stack, dtype=np.float64)
    lo, hi = stack.min(), stack.max()
    if hi <= lo:
        return np.zeros(stack.shape, dtype=np.uint8)
    return np.rint((stack - lo) / (hi - lo) * 255.0).astype(np.uint8)


def response_maps(model: C3DVQA, distorted: np.ndarray, residual: np.ndarray) -> dict:
    """Per-frame response stacks ``(D, H/4, W/4)`` for a single clip ``(1, D, H, W)``."""
    out = model(distorted, residual)
    return {
        "distorted_branch": out.distorted_features.data[0].mean(axis=0),
        "residual_branch": out.residual_features.data[0].mean(axis=0),
        "threshold": out.threshold.data[0, 0],
        "masked": out.masked.data[0, 0],
    }


def dump_maps(model: C3DVQA, distorted: np.ndarray, residual: np.ndarray, out_dir,
              frames: Optional[Sequence[int]] = None, prefix: str = "") -> dict:
    """Write one PGM per requested frame and map kind; returns {kind: [paths]}.

    Each kind is min-max normalized over the dumped frames jointly, so
    brightness is comparable across frames of the same map.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = response_maps(model, distorted, residual)
    D = maps["threshold"].shape[0]
    frames = list(range(D)) if frames is None else list(frames)
    for t in frames:
        if not 0 <= t < D:
            raise ValueError(f"frame {t} outside clip of {D} frames")
    written = {}
    for kind in MAP_KINDS:
        gray = to_gray(maps[kind][frames])
        paths = []
        for img, t in zip(gray, frames):
            p = out_dir / f"{prefix}{kind}_f{t:03d}.pgm"
            write_pgm(p, img)
            paths.append(p)
        written[kind] = paths
    return written
