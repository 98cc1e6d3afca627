"""Run configuration: dataclasses, JSON round-trip, ablation presets, config hashing.

A single JSON document drives every command.  Desk-scale overrides (crop,
batch, channels, step counts) are explicit fields, never silent rescaling.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class DatasetConfig:
    path: str = "data/train"
    n_frames: int = 200
    seed: int = 1000
    width: int = 256
    height: int = 128
    n_views: int = 5
    baseline_step: float = 0.5           # meters between adjacent cameras
    focal: float = 480.0                 # pixels
    depth_min: float = 4.0               # meters, requested; clipped so the widest
    depth_max: float = 40.0              # baseline stays inside the network range
    layers_min: int = 2
    layers_max: int = 4
    min_contrast_px: int = 4             # min foreground/background disparity gap
    eval_path: str = "data/eval"
    eval_n_frames: int = 40
    eval_seed: int = 900000


@dataclass(frozen=True)
class AugmentConfig:
    """Student-only photometric jitter and random erasing.

    Magnitudes are not prescribed anywhere upstream; these defaults are part
    of the reported configuration.
    """

    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05                    # fraction of a full hue cycle
    erase_max: int = 2                   # 0..erase_max rectangles per image
    erase_frac_min: float = 0.05         # rectangle side as fraction of the image side
    erase_frac_max: float = 0.25
    enabled: bool = True


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 5000
    batch: int = 4
    crop_h: int = 128
    crop_w: int = 256
    lr_max: float = 2e-4                 # one-cycle peak
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 1000
    compile: bool = True                 # torch.compile the network forward
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85                  # SSIM/L1 blend
    tau: float = 0.1                     # photometric threshold for occlusion filtering
    lambda_p: float = 10.0
    lambda_s: float = 0.01               # 0.001 * lambda_p under the default profile
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    photometric_norm: str = "masked"     # "masked": mean over mask-true pixels; "all": mean over all
    photometric_on_clean: bool = True    # loss images are the un-augmented pair
    use_contrastive: bool = True
    use_photometric: bool = True
    use_smoothness: bool = True
    use_threshold: bool = True
    use_automask: bool = True
    use_occlusion_attention: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_p < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ssim_window % 2 != 1:
            raise ValueError("ssim_window must be odd")
        if self.photometric_norm not in ("masked", "all"):
            raise ValueError(f"unknown photometric_norm {self.photometric_norm!r}")


@dataclass(frozen=True)
class ScheduleConfig:
    m_base: float = 0.996                # momentum at step 0; cosine ramp to 1
    ema: bool = True                     # False: teacher frozen after the init copy


@dataclass(frozen=True)
class ArchConfig:
    d_max: int = 64                      # disparity candidates 0..d_max-1
    channels: int = 16
    layers: int = 4
    temperature: float = 0.05            # soft-argmin softmax temperature on NCC costs
    negative_slope: float = 0.1


@dataclass(frozen=True)
class AblationConfig:
    """Switches mirroring the loss-term and mask ablation rows."""

    loss_terms: tuple = ("contrastive", "photometric", "smoothness")
    ema: bool = True
    threshold: bool = True
    automask: bool = True
    occ_aware: bool = True


# Named presets: rows A..E ablate loss terms, E* freezes the teacher, the
# mask rows ablate threshold / auto-mask / occlusion attention.
ABLATION_PRESETS = {
    "A": AblationConfig(loss_terms=("photometric", "smoothness")),
    "B": AblationConfig(loss_terms=("contrastive",)),
    "C": AblationConfig(loss_terms=("contrastive", "photometric")),
    "D": AblationConfig(loss_terms=("contrastive", "smoothness")),
    "E": AblationConfig(),
    "E_star": AblationConfig(ema=False),
    "mask_none": AblationConfig(threshold=False, automask=False, occ_aware=False),
    "mask_threshold": AblationConfig(automask=False, occ_aware=False),
    "mask_automask": AblationConfig(threshold=False, occ_aware=False),
    "mask_uniform": AblationConfig(occ_aware=False),
    "mask_full": AblationConfig(),
}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def effective_loss(self) -> LossConfig:
        """Loss config with the ablation switches applied."""
        ab = self.ablation
        return dataclasses.replace(
            self.loss,
            use_contrastive="contrastive" in ab.loss_terms,
            use_photometric="photometric" in ab.loss_terms,
            use_smoothness="smoothness" in ab.loss_terms,
            use_threshold=ab.threshold,
            use_automask=ab.automask,
            use_occlusion_attention=ab.occ_aware,
        )

    def effective_schedule(self) -> ScheduleConfig:
        return dataclasses.replace(self.schedule, ema=self.ablation.ema)

    def validate(self) -> None:
        self.loss.validate()
        ds, arch = self.dataset, self.arch
        if ds.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if ds.baseline_step <= 0:
            raise ValueError("baseline_step must be positive")
        if not 0 < ds.depth_min <= ds.depth_max:
            raise ValueError("depth range must satisfy 0 < depth_min <= depth_max")
        if arch.d_max >= self.training.crop_w:
            raise ValueError("d_max must be smaller than the crop width")
        widest = (ds.n_views - 1) * ds.baseline_step
        if widest * ds.focal / ds.depth_min > arch.d_max:
            # the scene sampler clips depth_min up to this bound; reject only
            # when even depth_max cannot fit
            if widest * ds.focal / ds.depth_max > arch.d_max:
                raise ValueError(
                    "disparity overflow: depth range implies widest-baseline "
                    f"disparity above d_max={arch.d_max}"
                )


def _to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) if isinstance(f.type, type) else False:
            value = _from_dict(f.type, value)
        elif f.name in _NESTED:
            value = _from_dict(_NESTED[f.name], value)
        elif f.name == "loss_terms":
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


_NESTED = {
    "dataset": DatasetConfig,
    "training": TrainingConfig,
    "loss": LossConfig,
    "schedule": ScheduleConfig,
    "arch": ArchConfig,
    "ablation": AblationConfig,
    "augment": AugmentConfig,
}


def to_json(cfg: RunConfig, indent: int = 2) -> str:
    return json.dumps(_to_dict(cfg), indent=indent, sort_keys=True)


def from_json(text: str) -> RunConfig:
    return _from_dict(RunConfig, json.loads(text))


def load_config(path) -> RunConfig:
    cfg = from_json(Path(path).read_text())
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_json(cfg) + "\n")


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the canonical JSON form, embedded in all outputs."""
    canon = json.dumps(_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATION_PRESETS:
        raise KeyError(f"unknown ablation preset {name!r}; choose from {sorted(ABLATION_PRESETS)}")
    return dataclasses.replace(cfg, ablation=ABLATION_PRESETS[name])
