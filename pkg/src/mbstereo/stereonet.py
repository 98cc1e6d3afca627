"""Minimal differentiable stereo network.

A shared convolutional encoder produces per-pixel features for both views;
matching cost is the negative normalized cross-correlation between the
reference feature at x and the target feature at x - k for every candidate
shift k, and the disparity is the soft-argmin expectation over the candidate
axis.  Same-resolution throughout, so no disparity rescaling across scales.

Parameters live in plain name->tensor maps (ParamSet); forward is a pure
function of (params, inputs), and updates produce new ParamSets, so student
and teacher can be read concurrently.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ArchConfig

CHECKPOINT_SCHEMA = 1


@dataclass
class ParamSet:
    """Named, shaped parameter collection plus its architecture metadata."""

    tensors: dict
    arch: ArchConfig

    def detached_copy(self) -> "ParamSet":
        return ParamSet({k: v.detach().clone() for k, v in self.tensors.items()}, self.arch)

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    @property
    def count(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def names(self):
        return list(self.tensors)


@dataclass
class NetOutput:
    disparity: torch.Tensor          # (B, H, W) in [0, d_max - 1]
    cost_volume: torch.Tensor | None  # (B, D, H, W) when retained


def init_params(seed: int, arch: ArchConfig, dtype=torch.float32) -> ParamSet:
    """Deterministic fan-in-scaled init: He-normal weights, zero biases."""
    if arch.layers < 1 or arch.channels < 1 or arch.d_max < 1:
        raise ValueError(f"invalid architecture config {arch}")
    g = torch.Generator().manual_seed(seed)
    tensors = {}
    c_in = 3
    for i in range(arch.layers):
        fan_in = c_in * 9
        w = torch.randn(arch.channels, c_in, 3, 3, generator=g, dtype=torch.float64)
        tensors[f"enc{i}.weight"] = (w * (2.0 / fan_in) ** 0.5).to(dtype)
        tensors[f"enc{i}.bias"] = torch.zeros(arch.channels, dtype=dtype)
        c_in = arch.channels
    return ParamSet(tensors=tensors, arch=arch)


def encode(params: ParamSet, image: torch.Tensor) -> torch.Tensor:
    x = image
    n = params.arch.layers
    for i in range(n):
        x = F.conv2d(x, params.tensors[f"enc{i}.weight"], params.tensors[f"enc{i}.bias"],
                     padding=1)
        if i < n - 1:
            x = F.leaky_relu(x, params.arch.negative_slope)
    return x


def correlation_band(feat_ref: torch.Tensor, feat_tgt: torch.Tensor, d_max: int) -> torch.Tensor:
    """NCC between ref(x) and tgt(x - k) for k in [0, d_max); edge clamp.

    Implemented as a per-row Gram matrix (one batched matmul) followed by a
    gather of the clamped diagonal band; (B, D, H, W).
    """
    b, c, h, w = feat_ref.shape
    a = F.normalize(feat_ref, dim=1, eps=1e-8)
    t = F.normalize(feat_tgt, dim=1, eps=1e-8)
    am = a.permute(0, 2, 3, 1).reshape(b * h, w, c)
    tm = t.permute(0, 2, 1, 3).reshape(b * h, c, w)
    gram = torch.bmm(am, tm)
    xs = torch.arange(w, device=feat_ref.device).view(-1, 1)
    ks = torch.arange(d_max, device=feat_ref.device).view(1, -1)
    band_idx = (xs - ks).clamp(min=0)
    band = torch.gather(gram, 2, band_idx.unsqueeze(0).expand(b * h, w, d_max))
    return band.reshape(b, h, w, d_max).permute(0, 3, 1, 2)


def soft_argmin(cost: torch.Tensor, temperature: float, dim: int = -1) -> torch.Tensor:
    """Expectation of the candidate index under softmax(-cost / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if cost.shape[dim] < 1:
        raise ValueError("cost volume needs at least one candidate")
    p = torch.softmax(-cost / temperature, dim=dim)
    d = cost.shape[dim]
    shape = [1] * cost.dim()
    shape[dim] = d
    idx = torch.arange(d, dtype=cost.dtype, device=cost.device).view(shape)
    return (p * idx).sum(dim=dim)


def forward(params: ParamSet, ref: torch.Tensor, tgt: torch.Tensor,
            keep_cost_volume: bool = False) -> NetOutput:
    """Predict the disparity of ``ref`` against a right-side ``tgt``."""
    squeeze = ref.dim() == 3
    if squeeze:
        ref = ref.unsqueeze(0)
        tgt = tgt.unsqueeze(0)
    arch = params.arch
    if arch.d_max >= ref.shape[-1]:
        raise ValueError(f"d_max={arch.d_max} must be below image width {ref.shape[-1]}")
    feats = encode(params, torch.cat([ref, tgt], dim=0))
    b = ref.shape[0]
    corr = correlation_band(feats[:b], feats[b:], arch.d_max)
    cost = -corr
    disparity = soft_argmin(cost, arch.temperature, dim=1)
    if squeeze:
        disparity = disparity.squeeze(0)
        cost = cost.squeeze(0)
    return NetOutput(disparity=disparity, cost_volume=cost if keep_cost_volume else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, *, student: ParamSet, teacher: ParamSet, step: int,
                    optimizer_state: dict | None, config_json: str,
                    config_hash: str) -> None:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "step": step,
        "arch": dataclasses.asdict(student.arch),
        "student": {k: v.detach().cpu() for k, v in student.tensors.items()},
        "teacher": {k: v.detach().cpu() for k, v in teacher.tensors.items()},
        "optimizer": optimizer_state,
        "config_json": config_json,
        "config_hash": config_hash,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    arch = ArchConfig(**payload["arch"])
    payload["student"] = ParamSet(payload["student"], arch)
    payload["teacher"] = ParamSet(payload["teacher"], arch)
    return payload
