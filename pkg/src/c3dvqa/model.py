"""The C3DVQA network: twin 2-D branches, a 3-D threshold trunk, masking and regression."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .layers import Conv2D, Conv3D, Linear, avg_pool_spatial, global_avg_pool
from .tensor import Tensor

VARIANTS = ("c3d", "2d")
DOWNSAMPLE = 4  # two stride-2 branch convolutions


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 60
    patch: int = 112
    branch_channels: int = 16
    trunk_channels: tuple = (64, 64, 32, 1)
    fc_hidden: int = 64
    variant: str = "c3d"

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(int(c) for c in self.trunk_channels))
        if self.frames < 1:
            raise ValueError(f"frames must be positive, got {self.frames}")
        if self.patch < DOWNSAMPLE or self.patch % DOWNSAMPLE:
            raise ValueError(f"patch size must be a positive multiple of {DOWNSAMPLE}, got {self.patch}")
        if not self.trunk_channels or self.trunk_channels[-1] != 1:
            raise ValueError("trunk channel list must end in 1 (single-channel threshold)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fc_hidden < 1 or self.branch_channels < 1:
            raise ValueError("fc_hidden and branch_channels must be positive")


@dataclass
class ForwardResult:
    score: Tensor  # (B,) or () for an unbatched clip
    threshold: Tensor  # (B, 1, D, H/4, W/4)
    masked: Tensor  # (B, 1, D, H/4, W/4)
    distorted_features: Tensor  # (B, 16, D, H/4, W/4)
    residual_features: Tensor
    frame_scores: Optional[Tensor] = None  # (B, D), 2-D variant only


def _frames_to_batch(x: Tensor) -> Tensor:
    # (B, C, D, H, W) -> (B*D, C, H, W)
    B, C, D, H, W = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3, 4)), (B * D, C, H, W))


def _batch_to_frames(x: Tensor, B: int, D: int) -> Tensor:
    # (B*D, C, H, W) -> (B, C, D, H, W)
    _, C, H, W = x.shape
    return T.permute(T.reshape(x, (B, D, C, H, W)), (0, 2, 1, 3, 4))


def mask_residual(residual: Tensor, threshold: Tensor) -> Tensor:
    """Pool |residual| down to threshold resolution and gate it elementwise."""
    pooled = avg_pool_spatial(T.abs(residual), DOWNSAMPLE)
    return T.mul(pooled, threshold)


class C3DVQA:
    """All learnable parameters of the network plus its forward pass."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bc = cfg.branch_channels

        def branch():
            return [
                Conv2D(1, bc, 3, stride=2, padding=1, rng=rng, dtype=dtype),
                Conv2D(bc, bc, 3, stride=2, padding=1, rng=rng, dtype=dtype),
            ]

        self.distorted_branch = branch()
        self.residual_branch = branch()

        conv = Conv3D if cfg.variant == "c3d" else Conv2D
        self.trunk = []
        c_in = 2 * bc
        for c_out in cfg.trunk_channels:
            self.trunk.append(conv(c_in, c_out, 3, stride=1, padding=1, rng=rng, dtype=dtype))
            c_in = c_out

        head_in = cfg.frames if cfg.variant == "c3d" else 1
        self.fc1 = Linear(head_in, cfg.fc_hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(cfg.fc_hidden, 1, rng=rng, dtype=dtype)

    # -- parameters -----------------------------------------------------------

    def _modules(self):
        for i, m in enumerate(self.distorted_branch):
            yield f"distorted_branch.{i}", m
        for i, m in enumerate(self.residual_branch):
            yield f"residual_branch.{i}", m
        for i, m in enumerate(self.trunk):
            yield f"trunk.{i}", m
        yield "fc1", self.fc1
        yield "fc2", self.fc2

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, m in self._modules():
            out[f"{name}.weight"] = m.weight
            out[f"{name}.bias"] = m.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def weights(self) -> list[Tensor]:
        """Weight tensors covered by the L2 penalty (biases excluded)."""
        return [m.weight for _, m in self._modules()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.named_parameters()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = None

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray], patch: int = 112,
                        frames: Optional[int] = None) -> "C3DVQA":
        """Rebuild a model, inferring its configuration from parameter shapes.

        The 2-D variant is frame-count agnostic, so ``frames`` only sets its
        segment length; for the 3-D variant it must match the checkpoint.
        """
        n_trunk = len({k.split(".")[1] for k in state if k.startswith("trunk.")})
        trunk_w0 = state["trunk.0.weight"]
        variant = "c3d" if trunk_w0.ndim == 5 else "2d"
        fc1 = state["fc1.weight"]
        if variant == "c3d" and frames is not None and frames != fc1.shape[1]:
            raise ValueError(f"checkpoint was trained on {fc1.shape[1]}-frame segments, not {frames}")
        cfg = ModelConfig(
            frames=fc1.shape[1] if variant == "c3d" else (frames or 60),
            patch=patch,
            branch_channels=state["distorted_branch.0.weight"].shape[0],
            trunk_channels=tuple(state[f"trunk.{i}.weight"].shape[0] for i in range(n_trunk)),
            fc_hidden=fc1.shape[0],
            variant=variant,
        )
        model = cls(cfg)
        model.load_state_dict(state)
        return model

    def astype(self, dtype) -> "C3DVQA":
        clone = C3DVQA.__new__(C3DVQA)
        clone.__dict__.update(self.__dict__)
        clone.distorted_branch = [_cast(m, dtype) for m in self.distorted_branch]
        clone.residual_branch = [_cast(m, dtype) for m in self.residual_branch]
        clone.trunk = [_cast(m, dtype) for m in self.trunk]
        clone.fc1 = _cast(self.fc1, dtype)
        clone.fc2 = _cast(self.fc2, dtype)
        return clone

    # -- forward ----------------------------------------------------------------

    def _branch(self, layers, x: Tensor) -> Tensor:
        B, _, D = x.shape[:3]
        y = _frames_to_batch(x)
        for conv in layers:
            y = T.relu(conv(y))
        return _batch_to_frames(y, B, D)

    def _trunk(self, feats: Tensor) -> Tensor:
        B, _, D = feats.shape[:3]
        if self.cfg.variant == "2d":
            y = _frames_to_batch(feats)
        else:
            y = feats
        for i, conv in enumerate(self.trunk):
            y = conv(y)
            if i < len(self.trunk) - 1:
                y = T.relu(y)
        y = T.sigmoid(y)
        if self.cfg.variant == "2d":
            y = _batch_to_frames(y, B, D)
        return y

    def _check_inputs(self, distorted: Tensor, residual: Tensor) -> None:
        if distorted.shape != residual.shape:
            raise ValueError(f"distorted {distorted.shape} and residual {residual.shape} differ")
        if distorted.ndim != 5 or distorted.shape[1] != 1:
            raise ValueError(f"expected (1, D, H, W) or (B, 1, D, H, W), got {distorted.shape}")
        D, H, W = distorted.shape[2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ValueError(f"frame size {(H, W)} must be divisible by {DOWNSAMPLE}")
        if self.cfg.variant == "c3d" and D != self.cfg.frames:
            raise ValueError(f"model was built for {self.cfg.frames} frames, clip has {D}")

    def forward(self, distorted, residual) -> ForwardResult:
        distorted = _to_tensor(distorted, self.fc1.weight.dtype)
        residual = _to_tensor(residual, self.fc1.weight.dtype)
        unbatched = distorted.ndim == 4
        if unbatched:
            distorted = T.reshape(distorted, (1,) + distorted.shape)
            residual = T.reshape(residual, (1,) + residual.shape)
        self._check_inputs(distorted, residual)
        B, _, D = distorted.shape[:3]

        f_dist = self._branch(self.distorted_branch, distorted)
        f_res = self._branch(self.residual_branch, residual)
        threshold = self._trunk(T.concat([f_dist, f_res], axis=1))
        masked = mask_residual(residual, threshold)
        pooled = global_avg_pool(masked, "spatial")  # (B, 1, D)

        frame_scores = None
        if self.cfg.variant == "c3d":
            h = T.relu(self.fc1(T.reshape(pooled, (B, D))))
            score = T.reshape(self.fc2(h), (B,))
        else:
            h = T.relu(self.fc1(T.reshape(pooled, (B * D, 1))))
            frame_scores = T.reshape(self.fc2(h), (B, D))
            score = T.mean(frame_scores, axes=1)
        if unbatched:
            score = T.reshape(score, ())
        return ForwardResult(score, threshold, masked, f_dist, f_res, frame_scores)

    __call__ = forward

    def forward_2d_ablation(self, distorted, residual) -> Tensor:
        if self.cfg.variant != "2d":
            raise ValueError("forward_2d_ablation needs a model built with variant='2d'")
        return self.forward(distorted, residual).score


def _cast(layer, dtype):
    clone = type(layer).__new__(type(layer))
    clone.__dict__.update(layer.__dict__)
    clone.weight = Tensor(layer.weight.data.astype(dtype), requires_grad=True)
    clone.bias = Tensor(layer.bias.data.astype(dtype), requires_grad=True)
    return clone


def _to_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=T.DEFAULT_DTYPE) -> C3DVQA:
    return C3DVQA(cfg, seed=seed, dtype=dtype)


def forward(model: C3DVQA, distorted, residual) -> ForwardResult:
    return model.forward(distorted, residual)


def predict_clips(model: C3DVQA, distorted: np.ndarray, residual: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Score a stack of clips ``(N, 1, D, H, W)`` in inference mode."""
    out = []
    for lo in range(0, len(distorted), batch_size):
        res = model.forward(distorted[lo:lo + batch_size], residual[lo:lo + batch_size])
        out.append(np.asarray(res.score.data, dtype=np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def predict_video(model: C3DVQA, reference, distorted, window: Optional[int] = None,
                  batch_size: int = 4) -> tuple[float, np.ndarray]:
    """Average segment scores over the deterministic evaluation tiling.

    Returns ``(video_score, segment_scores)``.
    """
    from .data import sample_eval_segments, stack_clips

    frames = model.cfg.frames
    segments = sample_eval_segments(reference, distorted, frames, window or model.cfg.patch)
    dist, res, _ = stack_clips(segments)
    scores = predict_clips(model, dist, res, batch_size)
    return float(np.mean(scores)), scores
