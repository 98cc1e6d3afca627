"""Differentiable image geometry: horizontal bilinear sampling, disparity
warping, and flip canonicalization for left-side targets.

Sign convention: the reference is the left camera of a canonical pair and
correspondence is ``x_tgt = x_ref - d`` with ``d >= 0``, so warping the target
back to the reference is a single horizontal gather.  Pairs whose target lies
left of the reference are mirrored first (and predictions mirrored back).

Tensors are float (B, C, H, W) or (C, H, W) images and (B, H, W) or (H, W)
disparities; all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class WarpResult:
    recon: torch.Tensor      # same shape as the target image, values clamped samples
    validity: torch.Tensor   # bool (..., H, W), False where the source column left the image


def bilinear_sample(image: torch.Tensor, x_coords: torch.Tensor):
    """Sample image columns at fractional positions along each row.

    Rectified geometry needs horizontal-only interpolation: the two
    neighbours on the same row are blended linearly.  Out-of-bounds
    coordinates clamp to the edge column and are reported invalid.
    Differentiable w.r.t. ``x_coords`` away from integer knots.
    """
    if torch.isnan(x_coords).any():
        raise ValueError("NaN sampling coordinate")
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
        x_coords = x_coords.unsqueeze(0)
    b, c, h, w = image.shape
    if x_coords.shape != (b, h, w):
        raise ValueError(f"coordinate shape {tuple(x_coords.shape)} does not match image {image.shape}")

    validity = (x_coords >= 0) & (x_coords <= w - 1)
    x = x_coords.clamp(0, w - 1)
    x0 = x.floor()
    frac = (x - x0).unsqueeze(1)
    i0 = x0.long().unsqueeze(1).expand(b, c, h, w)
    i1 = (i0 + 1).clamp(max=w - 1)
    left = torch.gather(image, 3, i0)
    right = torch.gather(image, 3, i1)
    out = left + (right - left) * frac
    if squeeze:
        return out.squeeze(0), validity.squeeze(0)
    return out, validity


def warp_target_to_ref(target: torch.Tensor, disparity: torch.Tensor) -> WarpResult:
    """Reconstruct the reference view by sampling the target at ``x - d``."""
    squeeze = target.dim() == 3
    timg = target.unsqueeze(0) if squeeze else target
    disp = disparity.unsqueeze(0) if disparity.dim() == 2 else disparity
    b, c, h, w = timg.shape
    if disp.shape != (b, h, w):
        raise ValueError(f"disparity shape {tuple(disparity.shape)} does not match target {target.shape}")
    xs = torch.arange(w, dtype=timg.dtype, device=timg.device).view(1, 1, w)
    recon, validity = bilinear_sample(timg, xs - disp)
    if squeeze:
        return WarpResult(recon=recon.squeeze(0), validity=validity.squeeze(0))
    return WarpResult(recon=recon, validity=validity)


def hflip(x: torch.Tensor) -> torch.Tensor:
    """Mirror the last (width) axis; exact involution."""
    return torch.flip(x, dims=(-1,))


def canonicalize_pair(ref: torch.Tensor, tgt: torch.Tensor, tgt_on_left: bool):
    """Mirror both images when the target sits left of the reference."""
    if tgt_on_left:
        return hflip(ref), hflip(tgt), True
    return ref, tgt, False


def decanonicalize_disparity(disparity: torch.Tensor, flipped: bool) -> torch.Tensor:
    """Map a prediction on canonicalized inputs back to the original frame.

    Disparity magnitudes are mirror-invariant, so only the pixel grid flips.
    """
    return hflip(disparity) if flipped else disparity
