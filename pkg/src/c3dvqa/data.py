"""Raw luma video I/O, clip sampling, dataset manifests and content splits.

Videos are stored as planar 8-bit Y frames (frame-major, row-major) with a
JSON sidecar ``<file>.json``::

    {"width": 768, "height": 432, "frames": 150, "bitdepth": 8}

A manifest is JSON::

    {
      "polarity": "lower-is-better",
      "references": [{"id": "bs", "file": "bs_ref.y"}],
      "distorted": [
        {"id": "bs_n1", "reference_id": "bs", "file": "bs_n1.y",
         "score": 42.1, "distortion": "noise"}
      ]
    }

Relative file paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

POLARITIES = ("higher-is-better", "lower-is-better")


class VideoFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RawVideo:
    width: int
    height: int
    frames: int
    luma: np.ndarray  # uint8, (frames, height, width)

    def __post_init__(self):
        if min(self.width, self.height, self.frames) < 1:
            raise VideoFormatError("width, height and frames must be positive")
        if self.luma.shape != (self.frames, self.height, self.width) or self.luma.dtype != np.uint8:
            raise VideoFormatError(
                f"luma must be uint8 of shape {(self.frames, self.height, self.width)}, "
                f"got {self.luma.dtype} {self.luma.shape}"
            )

    @classmethod
    def from_array(cls, luma: np.ndarray) -> "RawVideo":
        luma = np.ascontiguousarray(luma, dtype=np.uint8)
        if luma.ndim != 3:
            raise VideoFormatError(f"expected (frames, height, width), got {luma.shape}")
        f, h, w = luma.shape
        return cls(width=w, height=h, frames=f, luma=luma)

    @property
    def shape(self) -> tuple:
        return self.luma.shape


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def read_sidecar(path) -> dict:
    with open(path) as fh:
        meta = json.load(fh)
    for key in ("width", "height", "frames"):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise VideoFormatError(f"sidecar {path}: {key!r} must be a positive integer")
    if meta.get("bitdepth", 8) != 8:
        raise VideoFormatError(f"sidecar {path}: only 8-bit luma is supported")
    return meta


def load_raw_video(path, sidecar=None) -> RawVideo:
    """Read a raw Y file; ``sidecar`` is a dict or a path (default ``path + '.json'``)."""
    meta = sidecar if isinstance(sidecar, dict) else read_sidecar(sidecar or sidecar_path(path))
    w, h, f = meta["width"], meta["height"], meta["frames"]
    expected = w * h * f
    size = os.path.getsize(path)
    if size != expected:
        raise VideoFormatError(f"{path}: {size} bytes, sidecar {w}x{h}x{f} needs {expected}")
    luma = np.fromfile(path, dtype=np.uint8).reshape(f, h, w)
    return RawVideo(width=w, height=h, frames=f, luma=luma)


def write_raw_video(path, video: RawVideo) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    video.luma.tofile(path)
    with open(sidecar_path(path), "w") as fh:
        json.dump({"width": video.width, "height": video.height,
                   "frames": video.frames, "bitdepth": 8}, fh)


# ---------------------------------------------------------------------------
# clips


@dataclass
class ClipPair:
    distorted: np.ndarray  # float32 (1, D, h, w) in [0, 1]
    residual: np.ndarray  # float32 (1, D, h, w) in [-1, 1]
    label: float
    origin: tuple  # (video_id, frame_offset, row, col)


def _check_congruent(ref: RawVideo, dist: RawVideo, frames: int, window: int) -> None:
    if ref.shape != dist.shape:
        raise VideoFormatError(f"reference {ref.shape} and distorted {dist.shape} differ")
    if dist.frames < frames:
        raise VideoFormatError(f"video has {dist.frames} frames, segment needs {frames}")
    if dist.width < window or dist.height < window:
        raise VideoFormatError(f"frame {dist.width}x{dist.height} smaller than {window}x{window} window")


def spatial_anchors(height: int, width: int, window: int) -> list[tuple[int, int]]:
    """Non-overlapping windows anchored at (0, 0); remainders are dropped."""
    return [(r * window, c * window) for r in range(height // window) for c in range(width // window)]


def make_clip(ref: RawVideo, dist: RawVideo, t: int, row: int, col: int, frames: int,
              window: int, label: float = 0.0, video_id: str = "") -> ClipPair:
    sl = (slice(t, t + frames), slice(row, row + window), slice(col, col + window))
    d = dist.luma[sl].astype(np.float32) / np.float32(255)
    r = ref.luma[sl].astype(np.float32) / np.float32(255)
    return ClipPair(
        distorted=d[None],
        residual=(r - d)[None],
        label=float(label),
        origin=(video_id, t, row, col),
    )


def sample_training_clips(ref: RawVideo, dist: RawVideo, frames: int, window: int,
                          rng: np.random.Generator, label: float = 0.0,
                          video_id: str = "") -> list[ClipPair]:
    """One random temporal offset, then every spatial window at that offset."""
    _check_congruent(ref, dist, frames, window)
    t = int(rng.integers(0, dist.frames - frames + 1))
    return [make_clip(ref, dist, t, r, c, frames, window, label, video_id)
            for r, c in spatial_anchors(dist.height, dist.width, window)]


def sample_eval_segments(ref: RawVideo, dist: RawVideo, frames: int, window: int,
                         label: float = 0.0, video_id: str = "") -> list[ClipPair]:
    """Deterministic tiling: temporal stride ``frames`` from 0 times spatial tiles."""
    _check_congruent(ref, dist, frames, window)
    return [make_clip(ref, dist, t, r, c, frames, window, label, video_id)
            for t in range(0, dist.frames - frames + 1, frames)
            for r, c in spatial_anchors(dist.height, dist.width, window)]


def stack_clips(clips: Sequence[ClipPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not clips:
        raise ValueError("no clips to stack")
    dist = np.stack([c.distorted for c in clips])
    res = np.stack([c.residual for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.float64)
    return dist, res, labels


def video_rng(seed: int, video_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-video generator so parallel sampling cannot change the sample set."""
    return np.random.default_rng([seed, zlib.crc32(video_id.encode("utf-8")), epoch])


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ReferenceEntry:
    id: str
    file: str


@dataclass(frozen=True)
class DistortedEntry:
    id: str
    reference_id: str
    file: str
    score: float
    distortion: str = ""


@dataclass
class DatasetManifest:
    references: list[ReferenceEntry]
    distorted: list[DistortedEntry]
    polarity: str = "lower-is-better"
    base_dir: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        if self.polarity not in POLARITIES:
            raise ManifestError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        ids = [r.id for r in self.references]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate reference ids")
        dids = [d.id for d in self.distorted]
        if len(set(dids)) != len(dids):
            raise ManifestError("duplicate distorted ids")
        known = set(ids)
        for d in self.distorted:
            if d.reference_id not in known:
                raise ManifestError(f"distorted {d.id!r} names unknown reference {d.reference_id!r}")
            if not math.isfinite(d.score):
                raise ManifestError(f"distorted {d.id!r} has non-finite score")

    @classmethod
    def from_dict(cls, obj: dict, base_dir=".") -> "DatasetManifest":
        try:
            refs = [ReferenceEntry(id=str(r["id"]), file=str(r["file"])) for r in obj["references"]]
            dists = [
                DistortedEntry(
                    id=str(d["id"]),
                    reference_id=str(d["reference_id"]),
                    file=str(d["file"]),
                    score=float(d["score"]),
                    distortion=str(d.get("distortion", "")),
                )
                for d in obj["distorted"]
            ]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc
        return cls(refs, dists, obj.get("polarity", "lower-is-better"), Path(base_dir))

    def to_dict(self) -> dict:
        return {
            "polarity": self.polarity,
            "references": [{"id": r.id, "file": r.file} for r in self.references],
            "distorted": [
                {"id": d.id, "reference_id": d.reference_id, "file": d.file,
                 "score": d.score, "distortion": d.distortion}
                for d in self.distorted
            ],
        }

    def reference(self, ref_id: str) -> ReferenceEntry:
        for r in self.references:
            if r.id == ref_id:
                return r
        raise KeyError(ref_id)

    def distorted_of(self, ref_ids) -> list[DistortedEntry]:
        ref_ids = set(ref_ids)
        return [d for d in self.distorted if d.reference_id in ref_ids]

    def resolve(self, file: str) -> Path:
        p = Path(file)
        return p if p.is_absolute() else self.base_dir / p

    def load_video(self, file: str) -> RawVideo:
        if file not in self._cache:
            self._cache[file] = load_raw_video(self.resolve(file))
        return self._cache[file]

    def video_pair(self, entry: DistortedEntry) -> tuple[RawVideo, RawVideo]:
        ref = self.load_video(self.reference(entry.reference_id).file)
        return ref, self.load_video(entry.file)

    def aligned_score(self, score: float) -> float:
        """Score oriented so that larger means better quality."""
        return score if self.polarity == "higher-is-better" else -score


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        obj = json.load(fh)
    return DatasetManifest.from_dict(obj, base_dir=path.parent)


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)


def label_normalizer(manifest: DatasetManifest, entries: Sequence[DistortedEntry]) -> Callable[[float], float]:
    """Min-max map over ``entries`` to [0, 1] with 1 = best quality."""
    aligned = [manifest.aligned_score(e.score) for e in entries]
    lo, hi = min(aligned), max(aligned)
    span = hi - lo

    def norm(score: float) -> float:
        if span == 0:
            return 0.5
        return (manifest.aligned_score(score) - lo) / span

    return norm


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train: tuple
    test: tuple

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "test": list(self.test)}


def make_split(manifest: DatasetManifest, fraction: float = 0.8, seed: int = 0) -> SplitPlan:
    """Random content split of reference videos; distorted videos follow their reference."""
    ids = [r.id for r in manifest.references]
    n = len(ids)
    if n < 2:
        raise ManifestError("a split needs at least two reference videos")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_train = int(math.floor(fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(ids[i] for i in order[:n_train]))
    test = tuple(sorted(ids[i] for i in order[n_train:]))
    return SplitPlan(seed=seed, train=train, test=test)
