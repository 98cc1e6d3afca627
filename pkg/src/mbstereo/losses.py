"""Loss stack: SSIM-blended photometric error, edge-aware smoothness,
baseline-rescaled contrastive supervision, validity masks (photometric
threshold + auto-masking), the occlusion-aware attention map, and the
composite total.

All functions are pure and differentiable where it matters; the teacher
branch is detached inside ``contrastive_map`` so no gradient can reach
teacher parameters.  Maps are (B, H, W) or (H, W) float tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LossConfig
from .imgeom import warp_target_to_ref

log = logging.getLogger(__name__)


@dataclass
class ValidMask:
    """True where a pixel participates in supervision."""

    mask: torch.Tensor


@dataclass
class AttentionMap:
    """Per-pixel weight in {0, 1, 2} applied to the contrastive map."""

    weights: torch.Tensor


@dataclass
class LossReport:
    contrastive: torch.Tensor
    photometric: torch.Tensor
    smoothness: torch.Tensor
    total: torch.Tensor
    maps: dict = field(default_factory=dict)


def _as_mask(m) -> torch.Tensor:
    return m.mask if isinstance(m, ValidMask) else m


def _batched(img: torch.Tensor) -> torch.Tensor:
    return img.unsqueeze(0) if img.dim() == 3 else img


def ssim_map(a: torch.Tensor, b: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Windowed SSIM with box statistics and replicate boundary padding.

    Channel-averaged; the result lies in [-1, 1].
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() == 3
    a = _batched(a)
    b = _batched(b)
    w = cfg.ssim_window
    if w > min(a.shape[-2:]):
        raise ValueError(f"ssim window {w} larger than image {tuple(a.shape[-2:])}")
    p = w // 2

    def box(x):
        return F.avg_pool2d(F.pad(x, (p, p, p, p), mode="replicate"), w, stride=1)

    mu_a = box(a)
    mu_b = box(b)
    sigma_a = box(a * a) - mu_a * mu_a
    sigma_b = box(b * b) - mu_b * mu_b
    sigma_ab = box(a * b) - mu_a * mu_b
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sigma_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (sigma_a + sigma_b + c2)
    out = (num / den).mean(dim=1)
    return out.squeeze(0) if squeeze else out


def photometric_map(ref: torch.Tensor, recon: torch.Tensor, alpha: float,
                    cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel (alpha/2)(1 - SSIM) + (1 - alpha) * mean_c |ref - recon|."""
    if ref.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(ref.shape)} vs {tuple(recon.shape)}")
    ssim = ssim_map(ref, recon, cfg)
    l1 = (ref - recon).abs().mean(dim=-3)
    return (alpha / 2.0) * (1.0 - ssim) + (1.0 - alpha) * l1


def smoothness_loss(disp: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness: forward-difference disparity gradients damped
    by the exponent of the channel-mean image gradient."""
    d = disp.unsqueeze(0) if disp.dim() == 2 else disp
    img = _batched(ref)
    if d.shape[-2:] != img.shape[-2:]:
        raise ValueError("disparity and image sizes differ")
    dx_d = (d[..., :, 1:] - d[..., :, :-1]).abs()
    dy_d = (d[..., 1:, :] - d[..., :-1, :]).abs()
    dx_i = (img[..., :, 1:] - img[..., :, :-1]).abs().mean(dim=1)
    dy_i = (img[..., 1:, :] - img[..., :-1, :]).abs().mean(dim=1)
    term_x = (dx_d * torch.exp(-dx_i)).mean()
    term_y = (dy_d * torch.exp(-dy_i)).mean()
    return term_x + term_y


def contrastive_map(d_student: torch.Tensor, d_teacher: torch.Tensor, r) -> torch.Tensor:
    """Per-pixel |d_s - r * d_t| with the teacher branch stop-gradiented.

    ``r`` rescales the teacher's baseline to the student's; it may be a
    scalar or a per-sample tensor broadcastable over (B, H, W).
    """
    r_t = torch.as_tensor(r, dtype=d_student.dtype, device=d_student.device)
    if (r_t <= 0).any():
        raise ValueError("baseline ratio r must be positive")
    while r_t.dim() < d_student.dim():
        r_t = r_t.unsqueeze(-1)
    return (d_student - r_t * d_teacher.detach()).abs()


def valid_mask(photo_map: torch.Tensor, identity_photo_map: torch.Tensor,
               warp_validity: torch.Tensor, tau: float,
               use_threshold: bool = True, use_automask: bool = True) -> ValidMask:
    """Threshold pass AND auto-mask pass AND in-bounds warp.

    The threshold drops occluded pixels (their reconstruction error is
    inherently high); the auto-mask drops pixels whose warped reconstruction
    is no better than comparing the reference against the raw target.
    """
    if photo_map.shape != identity_photo_map.shape:
        raise ValueError("photometric maps must share a shape")
    mask = warp_validity.clone()
    if use_threshold:
        mask = mask & (photo_map < tau)
    if use_automask:
        mask = mask & (photo_map < identity_photo_map)
    return ValidMask(mask=mask)


def attention_map(mask_teacher, mask_student, occ_aware: bool = True) -> AttentionMap:
    """0 where the teacher is invalid, 1 where both pass, 2 where only the
    teacher passes (student-occluded territory gets doubled supervision)."""
    mt = _as_mask(mask_teacher)
    ms = _as_mask(mask_student)
    if mt.shape != ms.shape:
        raise ValueError("masks must share a shape")
    weights = (mt & ms).to(torch.get_default_dtype())
    only_teacher = mt & ~ms
    weights = weights + only_teacher.to(weights.dtype) * (2.0 if occ_aware else 1.0)
    return AttentionMap(weights=weights)


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask.to(values.dtype)).sum() / count.to(values.dtype)


def total_loss(d_student: torch.Tensor, d_teacher: torch.Tensor, r,
               ref: torch.Tensor, tgt_student: torch.Tensor, cfg: LossConfig,
               tgt_teacher: torch.Tensor | None = None,
               teacher_mask=None) -> LossReport:
    """Composite loss on one canonical-orientation sample or batch.

    ``d_teacher`` is the teacher's prediction at its own baseline, expressed
    on the student's pixel grid; ``r`` converts its scale.  The teacher mask
    comes either from ``tgt_teacher`` (shared-orientation triplets) or
    precomputed via ``teacher_mask`` when the training loop already
    transported it across a flip.  Gradients flow only through ``d_student``
    and the student photometric path.
    """
    cfg.validate()
    if (tgt_teacher is None) == (teacher_mask is None):
        raise ValueError("pass exactly one of tgt_teacher or teacher_mask")

    zero = d_student.sum() * 0.0

    # student photometric map doubles as the mask evidence and the loss term
    warp_s = warp_target_to_ref(tgt_student, d_student)
    photo_s = photometric_map(ref, warp_s.recon, cfg.alpha, cfg)
    with torch.no_grad():
        identity_s = photometric_map(ref, tgt_student, cfg.alpha, cfg)
    m_student = valid_mask(photo_s.detach(), identity_s, warp_s.validity, cfg.tau,
                           cfg.use_threshold, cfg.use_automask)

    if teacher_mask is None:
        with torch.no_grad():
            d_t = d_teacher.detach()
            warp_t = warp_target_to_ref(tgt_teacher, d_t)
            photo_t = photometric_map(ref, warp_t.recon, cfg.alpha, cfg)
            identity_t = photometric_map(ref, tgt_teacher, cfg.alpha, cfg)
            m_teacher = valid_mask(photo_t, identity_t, warp_t.validity, cfg.tau,
                                   cfg.use_threshold, cfg.use_automask)
    else:
        m_teacher = teacher_mask if isinstance(teacher_mask, ValidMask) else ValidMask(teacher_mask)

    attention = attention_map(m_teacher, m_student, cfg.use_occlusion_attention)

    if cfg.use_contrastive:
        c_map = contrastive_map(d_student, d_teacher, r)
        # normalized by total pixel count so weight 2 genuinely doubles the
        # per-pixel penalty instead of being renormalized away
        contrastive = (c_map * attention.weights.to(c_map.dtype)).mean()
    else:
        c_map = torch.zeros_like(d_student)
        contrastive = zero

    if cfg.use_photometric:
        if cfg.photometric_norm == "masked":
            if not m_student.mask.any():
                log.warning("empty student mask: photometric term contributes 0 (degenerate batch)")
                photometric = zero
            else:
                photometric = masked_mean(photo_s, m_student.mask)
        else:
            photometric = (photo_s * m_student.mask.to(photo_s.dtype)).mean()
    else:
        photometric = zero

    smoothness = smoothness_loss(d_student, ref) if cfg.use_smoothness else zero

    total = contrastive + cfg.lambda_p * photometric + cfg.lambda_s * smoothness
    return LossReport(
        contrastive=contrastive,
        photometric=photometric,
        smoothness=smoothness,
        total=total,
        maps={
            "photometric": photo_s.detach(),
            "contrastive": c_map.detach(),
            "attention": attention.weights,
            "student_mask": m_student.mask,
            "teacher_mask": m_teacher.mask,
        },
    )
