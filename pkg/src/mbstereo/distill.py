"""Teacher-student training: triplet sampling with the left-target flip rule,
student-only augmentation, EMA teacher on a cosine momentum ramp, and the
per-iteration step.

Both pairs of a triplet share the reference view.  The teacher consumes the
clean canonicalized pair; its disparity (and validity mask) is mapped back to
the shared reference orientation, rescaled by the baseline ratio, and
supervises the student through the occlusion-aware contrastive loss.  Only
the teacher performs inference after training.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import stereonet
from .config import AugmentConfig, RunConfig, config_hash, to_json
from .imgeom import canonicalize_pair, hflip, warp_target_to_ref
from .losses import total_loss, photometric_map, valid_mask
from .stereonet import ParamSet, init_params

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# triplets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Triplet:
    ref_idx: int
    student_tgt_idx: int
    teacher_tgt_idx: int
    baseline_student: float
    baseline_teacher: float
    ratio: Fraction              # baseline_student / baseline_teacher, exact
    flip_student: bool           # target lies left of the reference
    flip_teacher: bool

    @property
    def r(self) -> float:
        return float(self.ratio)


def sample_triplet(frame, rng: np.random.Generator) -> Triplet:
    """Reference uniform over views, two distinct targets over the rest,
    student/teacher assignment uniform; targets may lie on either side."""
    k = frame.n_views
    if k < 3:
        raise ValueError(f"triplet sampling needs at least 3 views, frame has {k}")
    ref = int(rng.integers(0, k))
    rest = [i for i in range(k) if i != ref]
    s_idx, t_idx = (int(v) for v in rng.choice(rest, size=2, replace=False))
    offsets = frame.camera_offsets
    return Triplet(
        ref_idx=ref,
        student_tgt_idx=s_idx,
        teacher_tgt_idx=t_idx,
        baseline_student=abs(offsets[ref] - offsets[s_idx]),
        baseline_teacher=abs(offsets[ref] - offsets[t_idx]),
        ratio=Fraction(abs(ref - s_idx), abs(ref - t_idx)),
        flip_student=offsets[s_idx] < offsets[ref],
        flip_teacher=offsets[t_idx] < offsets[ref],
    )


# ---------------------------------------------------------------------------
# student augmentation
# ---------------------------------------------------------------------------

_RGB_TO_YIQ = np.array([[0.299, 0.587, 0.114],
                        [0.596, -0.274, -0.322],
                        [0.211, -0.523, 0.312]])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def _hue_matrix(cycles: float) -> np.ndarray:
    th = 2.0 * math.pi * cycles
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, math.cos(th), -math.sin(th)],
                    [0.0, math.sin(th), math.cos(th)]])
    return _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ


def _erase(img: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    n = int(rng.integers(0, cfg.erase_max + 1))
    _, h, w = img.shape
    for _ in range(n):
        eh = max(1, int(round(float(rng.uniform(cfg.erase_frac_min, cfg.erase_frac_max)) * h)))
        ew = max(1, int(round(float(rng.uniform(cfg.erase_frac_min, cfg.erase_frac_max)) * w)))
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        noise = torch.from_numpy(rng.random((3, eh, ew))).to(img.dtype)
        img[:, y0:y0 + eh, x0:x0 + ew] = noise
    return img


def augment_student(ref: torch.Tensor, tgt: torch.Tensor, rng: np.random.Generator,
                    cfg: AugmentConfig = AugmentConfig()):
    """Identical photometric jitter on both images; independent random
    erasing per image; outputs clipped to [0, 1].  Teacher inputs never pass
    through here."""
    if not cfg.enabled:
        return ref, tgt
    b = float(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness))
    c = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
    s = float(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation))
    hue = float(rng.uniform(-cfg.hue, cfg.hue))
    hm = torch.from_numpy(_hue_matrix(hue)).to(ref.dtype)

    def jitter(img: torch.Tensor) -> torch.Tensor:
        x = img * b
        x = (x - x.mean()) * c + x.mean()
        gray = x.mean(dim=0, keepdim=True)
        x = gray + (x - gray) * s
        x = torch.einsum("ij,jhw->ihw", hm, x)
        return x

    out_ref = _erase(jitter(ref).clone(), rng, cfg).clamp_(0.0, 1.0)
    out_tgt = _erase(jitter(tgt).clone(), rng, cfg).clamp_(0.0, 1.0)
    return out_ref, out_tgt


# ---------------------------------------------------------------------------
# momentum schedule / EMA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentumSchedule:
    m_base: float
    total_steps: int


def momentum_at(schedule: MomentumSchedule, step: int) -> float:
    """m = 1 - (1 - m_base) * (cos(pi * step / total) + 1) / 2; ramps the
    teacher momentum from m_base to exactly 1."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = (math.cos(math.pi * step / schedule.total_steps) + 1.0) / 2.0
    return 1.0 - (1.0 - schedule.m_base) * w


def ema_update(theta_t: ParamSet, theta_s: ParamSet, m: float) -> ParamSet:
    """Elementwise m * teacher + (1 - m) * student; returns a fresh ParamSet
    with no gradient association."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    t_names, s_names = set(theta_t.tensors), set(theta_s.tensors)
    if t_names != s_names:
        missing = t_names.symmetric_difference(s_names)
        raise ValueError(f"parameter sets are not EMA-compatible: mismatched names {sorted(missing)}")
    out = {}
    with torch.no_grad():
        for name, t in theta_t.tensors.items():
            s = theta_s.tensors[name]
            if t.shape != s.shape:
                raise ValueError(f"parameter {name!r} shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
            out[name] = m * t + (1.0 - m) * s.detach()
    return ParamSet(out, theta_t.arch)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    contrastive: float
    photometric: float
    smoothness: float
    total: float
    momentum: float
    lr: float
    finite: bool


def _make_net_fn(arch, compile_flag: bool):
    def net(tensors, ref, tgt):
        return stereonet.forward(ParamSet(tensors, arch), ref, tgt).disparity

    if compile_flag:
        try:
            return torch.compile(net, dynamic=False)
        except Exception as exc:  # pragma: no cover - environment dependent
            log.warning("torch.compile unavailable (%s); running eager", exc)
    return net


class Trainer:
    """Owns the student/teacher ParamSets, optimizer, schedules, and logs.

    The per-step flow: sample triplets -> canonicalize both pairs -> augment
    the student inputs -> teacher forward (detached) on the clean pair ->
    map the teacher disparity back to the shared orientation and rescale ->
    student forward on augmented inputs -> composite loss -> Adam step on
    the student -> EMA update of the teacher.
    """

    def __init__(self, cfg: RunConfig, dataset, eval_dataset=None, out_dir=None,
                 dtype=torch.float32, debug_taint: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.loss_cfg = cfg.effective_loss()
        self.sched_cfg = cfg.effective_schedule()
        self.dataset = dataset
        self.eval_dataset = eval_dataset
        self.out_dir = Path(out_dir) if out_dir else None
        self.dtype = dtype
        self.debug_taint = debug_taint

        tr = cfg.training
        self.student = init_params(tr.seed, cfg.arch, dtype=dtype).requires_grad_(True)
        self.teacher = self.student.detached_copy()
        self.optimizer = torch.optim.Adam(list(self.student.tensors.values()), lr=tr.lr_max)
        self.scheduler = torch.optim.lr_scheduler.OneCycleLR(
            self.optimizer, max_lr=tr.lr_max, total_steps=tr.steps)
        self.momentum_schedule = MomentumSchedule(self.sched_cfg.m_base, tr.steps)
        self.step_count = 0
        self._nonfinite_run = 0
        self._net = _make_net_fn(cfg.arch, tr.compile and dtype == torch.float32)
        self._holdout = None
        self.history: list[StepRecord] = []

    # -- data ---------------------------------------------------------------

    def _to_tensor(self, img: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(self.dtype)

    def _sample_batch(self, step: int):
        tr = self.cfg.training
        rng = np.random.default_rng([tr.seed, step])
        idxs = rng.integers(0, len(self.dataset), size=tr.batch)
        samples = []
        for slot, frame_idx in enumerate(idxs):
            srng = np.random.default_rng([tr.seed, step, slot])
            frame = self.dataset.load(int(frame_idx))
            trip = sample_triplet(frame, srng)
            h, w = frame.shape
            ch, cw = min(tr.crop_h, h), min(tr.crop_w, w)
            y0 = int(srng.integers(0, h - ch + 1))
            x0 = int(srng.integers(0, w - cw + 1))

            def crop(view_idx):
                return self._to_tensor(frame.views[view_idx][y0:y0 + ch, x0:x0 + cw])

            ref = crop(trip.ref_idx)
            tgt_s = crop(trip.student_tgt_idx)
            tgt_t = crop(trip.teacher_tgt_idx)
            ref_s, tgt_s, _ = canonicalize_pair(ref, tgt_s, trip.flip_student)
            ref_t, tgt_t, _ = canonicalize_pair(ref, tgt_t, trip.flip_teacher)
            aug_ref, aug_tgt = augment_student(ref_s, tgt_s, srng, tr.augment)
            samples.append({
                "triplet": trip,
                "ref_s": ref_s, "tgt_s": tgt_s,
                "aug_ref": aug_ref, "aug_tgt": aug_tgt,
                "ref_t": ref_t, "tgt_t": tgt_t,
            })
        return samples

    # -- core step ----------------------------------------------------------

    def train_step(self, samples=None) -> StepRecord:
        step = self.step_count
        tr = self.cfg.training
        if step >= tr.steps:
            raise RuntimeError("training schedule exhausted")
        if samples is None:
            samples = self._sample_batch(step)

        ref_s = torch.stack([s["ref_s"] for s in samples])
        tgt_s = torch.stack([s["tgt_s"] for s in samples])
        aug_ref = torch.stack([s["aug_ref"] for s in samples])
        aug_tgt = torch.stack([s["aug_tgt"] for s in samples])
        ref_t = torch.stack([s["ref_t"] for s in samples])
        tgt_t = torch.stack([s["tgt_t"] for s in samples])
        if self.debug_taint:
            aug_ref._augmented = True
            aug_tgt._augmented = True
            for t in (ref_t, tgt_t):
                if getattr(t, "_augmented", False):
                    raise AssertionError("teacher drew an augmented image")
        trips = [s["triplet"] for s in samples]
        r = torch.tensor([t.r for t in trips], dtype=self.dtype)
        cross_flip = torch.tensor(
            [t.flip_student != t.flip_teacher for t in trips], dtype=torch.bool)

        # teacher path: clean canonical pair, gradients truncated
        with torch.no_grad():
            d_t = self._net(self.teacher.tensors, ref_t, tgt_t)
            warp_t = warp_target_to_ref(tgt_t, d_t)
            photo_t = photometric_map(ref_t, warp_t.recon, self.loss_cfg.alpha, self.loss_cfg)
            identity_t = photometric_map(ref_t, tgt_t, self.loss_cfg.alpha, self.loss_cfg)
            m_t = valid_mask(photo_t, identity_t, warp_t.validity, self.loss_cfg.tau,
                             self.loss_cfg.use_threshold, self.loss_cfg.use_automask).mask
            # express the teacher's prediction and mask on the student's grid:
            # a flip is needed exactly when the two pairs face opposite ways
            d_t_s = torch.where(cross_flip.view(-1, 1, 1), hflip(d_t), d_t)
            m_t_s = torch.where(cross_flip.view(-1, 1, 1), hflip(m_t), m_t)

        d_s = self._net(self.student.tensors, aug_ref, aug_tgt)
        loss_ref, loss_tgt = (ref_s, tgt_s) if self.loss_cfg.photometric_on_clean \
            else (aug_ref, aug_tgt)
        report = total_loss(d_s, d_t_s, r, loss_ref, loss_tgt, self.loss_cfg,
                            teacher_mask=m_t_s)

        finite = bool(torch.isfinite(report.total))
        if not finite:
            self._nonfinite_run += 1
            log.warning("non-finite loss at step %d (run of %d); step skipped",
                        step, self._nonfinite_run)
            if self._nonfinite_run > 10:
                raise RuntimeError(
                    f"more than 10 consecutive non-finite losses (last at step {step})")
        else:
            self._nonfinite_run = 0
            self.optimizer.zero_grad()
            report.total.backward()
            self.optimizer.step()
        lr = self.scheduler.get_last_lr()[0]
        self.scheduler.step()

        m = momentum_at(self.momentum_schedule, step)
        if self.sched_cfg.ema:
            self.teacher = ema_update(self.teacher, self.student, m)
        self.step_count += 1

        rec = StepRecord(
            step=step,
            contrastive=float(report.contrastive),
            photometric=float(report.photometric),
            smoothness=float(report.smoothness),
            total=float(report.total),
            momentum=m,
            lr=lr,
            finite=finite,
        )
        self.history.append(rec)
        return rec

    # -- monitoring ---------------------------------------------------------

    def holdout_mean_disparity(self) -> float:
        """Mean teacher disparity on a fixed held-out batch (collapse guard)."""
        if self._holdout is None:
            src = self.eval_dataset if self.eval_dataset is not None else self.dataset
            tr = self.cfg.training
            pairs = []
            for i in range(min(2, len(src))):
                frame = src.load(i)
                h, w = frame.shape
                ch, cw = min(tr.crop_h, h), min(tr.crop_w, w)
                y0, x0 = (h - ch) // 2, (w - cw) // 2
                pairs.append((self._to_tensor(frame.views[0][y0:y0 + ch, x0:x0 + cw]),
                              self._to_tensor(frame.views[1][y0:y0 + ch, x0:x0 + cw])))
            self._holdout = (torch.stack([p[0] for p in pairs]),
                             torch.stack([p[1] for p in pairs]))
        with torch.no_grad():
            d = self._net(self.teacher.tensors, *self._holdout)
        return float(d.mean())

    # -- loop / persistence ---------------------------------------------------

    def save_checkpoint(self, path) -> None:
        stereonet.save_checkpoint(
            path, student=self.student, teacher=self.teacher, step=self.step_count,
            optimizer_state=self.optimizer.state_dict(),
            config_json=to_json(self.cfg), config_hash=config_hash(self.cfg))

    def run(self, metrics_path=None, checkpoint_path=None) -> None:
        tr = self.cfg.training
        writer = None
        fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["step", "contrastive", "photometric", "smoothness",
                             "total", "momentum", "lr", "holdout_mean_disp"])
        try:
            while self.step_count < tr.steps:
                rec = self.train_step()
                if writer and (rec.step % tr.log_interval == 0 or rec.step == tr.steps - 1):
                    writer.writerow([rec.step, f"{rec.contrastive:.6g}",
                                     f"{rec.photometric:.6g}", f"{rec.smoothness:.6g}",
                                     f"{rec.total:.6g}", f"{rec.momentum:.8f}",
                                     f"{rec.lr:.6g}", f"{self.holdout_mean_disparity():.4f}"])
                    fh.flush()
                if checkpoint_path and rec.step > 0 and rec.step % tr.checkpoint_interval == 0:
                    self.save_checkpoint(checkpoint_path)
            if checkpoint_path:
                self.save_checkpoint(checkpoint_path)
        finally:
            if fh:
                fh.close()
