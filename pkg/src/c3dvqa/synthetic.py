"""Procedural moving-texture videos with graded noise, for tests and demos."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, DistortedEntry, RawVideo, ReferenceEntry, save_manifest, write_raw_video

NOISE_SIGMAS = (3.0, 6.0, 12.0, 24.0, 48.0)


def procedural_video(height: int, width: int, frames: int, rng: np.random.Generator) -> RawVideo:
    """Periodic texture (gratings plus smoothed noise) translating at a constant velocity."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    canvas = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.integers(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        canvas += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy / height + fx * xx / width) + phase)
    blobs = gaussian_filter(rng.standard_normal((height, width)), sigma=rng.uniform(1.0, 4.0), mode="wrap")
    canvas += blobs / (blobs.std() + 1e-12)
    canvas = (canvas - canvas.min()) / (np.ptp(canvas) + 1e-12)
    canvas = 30.0 + 195.0 * canvas

    vy, vx = rng.integers(-2, 3, size=2)
    if vy == 0 and vx == 0:
        vx = 1
    luma = np.stack([np.roll(canvas, (int(vy) * t, int(vx) * t), axis=(0, 1)) for t in range(frames)])
    return RawVideo.from_array(np.clip(np.rint(luma), 0, 255).astype(np.uint8))


def add_noise(video: RawVideo, sigma: float, rng: np.random.Generator) -> RawVideo:
    noisy = video.luma.astype(np.float64) + rng.normal(0.0, sigma, video.luma.shape)
    return RawVideo.from_array(np.clip(np.rint(noisy), 0, 255).astype(np.uint8))


def noise_dmos(sigma: float) -> float:
    """Monotone stand-in for a subjective DMOS (0 = pristine, 100 = worst)."""
    return float(100.0 * (1.0 - np.exp(-sigma / 20.0)))


def make_synthetic_dataset(
    out_dir,
    n_refs: int = 6,
    sigmas: Sequence[float] = NOISE_SIGMAS,
    width: int = 64,
    height: int = 64,
    frames: int = 16,
    seed: int = 0,
) -> Path:
    """Write reference/noisy videos and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    refs, dists = [], []
    for i in range(n_refs):
        ref_id = f"src{i:02d}"
        ref = procedural_video(height, width, frames, rng)
        write_raw_video(out_dir / f"{ref_id}.y", ref)
        refs.append(ReferenceEntry(id=ref_id, file=f"{ref_id}.y"))
        for j, sigma in enumerate(sigmas):
            dist_id = f"{ref_id}_n{j}"
            write_raw_video(out_dir / f"{dist_id}.y", add_noise(ref, sigma, rng))
            dists.append(DistortedEntry(id=dist_id, reference_id=ref_id, file=f"{dist_id}.y",
                                        score=noise_dmos(sigma), distortion=f"noise{sigma:g}"))
    manifest = DatasetManifest(refs, dists, polarity="lower-is-better", base_dir=out_dir)
    path = out_dir / "manifest.json"
    save_manifest(path, manifest)
    return path
