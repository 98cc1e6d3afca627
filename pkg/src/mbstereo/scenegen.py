"""Procedural multi-baseline stereo frames with analytic ground truth.

Scenes are layered fronto-parallel textured rectangles over a textured
background plane, Lambertian, rendered for K horizontally displaced cameras.
Surface depths are snapped to the integer-disparity lattice (adjacent-baseline
disparity is a whole number of pixels), so corresponding non-occluded pixels
across views receive bit-identical texture arguments and therefore
bit-identical color.  That makes photometric identities testable exactly:
warping a target view back to the reference with the ground-truth disparity
reproduces the reference on non-occluded pixels.

Textures are continuous procedural functions (value noise, checker patterns,
low-frequency gradients) evaluated analytically at each pixel's ray/scene
intersection; there is no image resampling anywhere in the renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TEXTURE_FAMILIES = ("noise", "checker", "gradient-mix")

# far-plane stand-in for "infinite" background; never an actual infinity
FAR_PLANE_M = 1000.0


class DisparityOverflowError(ValueError):
    """Scene would produce disparities beyond the configured network range."""


# ---------------------------------------------------------------------------
# deterministic hashing / procedural textures
# ---------------------------------------------------------------------------

_P1 = np.uint64(0x9E3779B97F4A7C15)
_P2 = np.uint64(0xC2B2AE3D27D4EB4F)
_P3 = np.uint64(0x165667B19E3779F9)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = float(2.0 ** -53)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + _P1).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0,1) from integer lattice coordinates; wraps silently on overflow."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.int64).view(np.uint64) * _P1
            ^ iy.astype(np.int64).view(np.uint64) * _P2
            ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _P3
        )
        h = _splitmix(h)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(u: np.ndarray, v: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Band-limited value noise: smoothstep-interpolated lattice hashes."""
    gu = u / scale
    gv = v / scale
    i0 = np.floor(gu)
    j0 = np.floor(gv)
    fu = _smoothstep(gu - i0)
    fv = _smoothstep(gv - j0)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    h00 = _hash01(i0, j0, seed)
    h10 = _hash01(i0 + 1, j0, seed)
    h01 = _hash01(i0, j0 + 1, seed)
    h11 = _hash01(i0 + 1, j0 + 1, seed)
    top = h00 + (h10 - h00) * fu
    bot = h01 + (h11 - h01) * fu
    return top + (bot - top) * fv


def _octave_noise(u, v, seed, scales=(16.0, 7.0, 3.0), weights=(0.55, 0.3, 0.15)):
    out = np.zeros(u.shape, dtype=np.float64)
    for k, (s, w) in enumerate(zip(scales, weights)):
        out += w * _value_noise(u, v, s, seed + 7919 * k)
    return out


def texture_rgb(u: np.ndarray, v: np.ndarray, family: str, seed: int) -> np.ndarray:
    """Evaluate a texture family at (possibly non-integer) plane coordinates.

    Returns (..., 3) float64 in [0, 1].  Purely a function of its arguments,
    so equal inputs give bit-identical colors.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(u.shape + (3,), dtype=np.float64)
    if family == "noise":
        for c in range(3):
            out[..., c] = 0.12 + 0.76 * _octave_noise(u, v, seed + 104729 * c)
    elif family == "checker":
        cell = 9.0
        cu = np.floor(u / cell).astype(np.int64)
        cv = np.floor(v / cell).astype(np.int64)
        parity = ((cu + cv) & 1).astype(np.float64)
        base0 = np.array([0.25, 0.3, 0.55])
        base1 = np.array([0.75, 0.6, 0.3])
        tone = _hash01(cu, cv, seed)  # per-cell shade variation
        for c in range(3):
            col = base0[c] + (base1[c] - base0[c]) * parity
            out[..., c] = np.clip(col * (0.75 + 0.5 * tone), 0.0, 1.0)
        # fine noise on top keeps cells locally matchable
        fine = _octave_noise(u, v, seed + 31, scales=(3.0,), weights=(1.0,))
        out += (0.12 * (fine - 0.5))[..., None]
        np.clip(out, 0.0, 1.0, out=out)
    elif family == "gradient-mix":
        # smooth low-texture ramps mixed with a noise octave; the flat areas
        # exercise the auto-masking path downstream
        ang = 2.0 * math.pi * (_hash01(np.array(0), np.array(0), seed) )
        wave = 0.5 + 0.35 * np.sin((u * math.cos(ang) + v * math.sin(ang)) / 23.0)
        fine = _octave_noise(u, v, seed + 53)
        mix = _smoothstep(np.clip(_value_noise(u, v, 40.0, seed + 97) * 1.6 - 0.3, 0.0, 1.0))
        for c in range(3):
            grad_c = np.clip(wave + 0.12 * (c - 1), 0.0, 1.0)
            noise_c = 0.15 + 0.7 * _octave_noise(u, v, seed + 104729 * c + 13)
            out[..., c] = grad_c * (1.0 - mix) + noise_c * mix
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return out


# ---------------------------------------------------------------------------
# scene specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    rect: tuple            # (x0, y0, x1, y1) in image-plane meters at unit depth
    depth: float           # meters
    texture_seed: int


@dataclass(frozen=True)
class SceneSpec:
    background_depth: float
    layers: tuple = ()
    focal: float = 480.0
    width: int = 256
    height: int = 128
    texture_family: str = "noise"
    background_seed: int = 0

    def validate(self) -> None:
        if self.background_depth <= 0:
            raise ValueError("background depth must be positive")
        if self.width < 32 or self.height < 32:
            raise ValueError("frame must be at least 32x32")
        if self.texture_family not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.texture_family!r}")
        for i, layer in enumerate(self.layers):
            if layer.depth <= 0:
                raise ValueError(f"layer {i} depth must be positive")
            if layer.depth >= self.background_depth:
                raise ValueError(f"layer {i} must be nearer than the background")
            x0, y0, x1, y1 = layer.rect
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"layer {i} rect is empty")


@dataclass
class DisparityMap:
    """Per-pixel horizontal displacement in pixels for one (baseline, focal) pair."""

    values: np.ndarray     # (H, W) float64, >= 0
    baseline: float        # meters
    focal: float           # pixels


def gt_disparity_from_depth(depth: np.ndarray, baseline: float, focal: float) -> DisparityMap:
    """disparity = baseline * focal / depth, elementwise."""
    depth = np.asarray(depth, dtype=np.float64)
    if baseline < 0:
        raise ValueError("baseline must be non-negative")
    if np.any(depth <= 0):
        raise ValueError("depth must be positive everywhere")
    with np.errstate(divide="ignore"):
        values = baseline * focal / depth
    return DisparityMap(values=np.where(np.isfinite(values), values, 0.0),
                        baseline=baseline, focal=focal)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass
class MultiBaselineFrame:
    """K rectified views of one scene plus analytic ground truth.

    ``unit_disp[k]`` holds, per pixel of view k, the disparity of the visible
    surface for one baseline step; the pair (i, j) disparity is then
    ``|i - j| * unit_disp[i]`` exactly.  ``entity[k]`` identifies the visible
    surface (0 = background, n = layer n-1) and is only present on freshly
    rendered frames; frames read from disk carry precomputed occlusion masks
    instead.
    """

    views: list            # K arrays (H, W, 3) float64 in [0, 1]
    camera_offsets: list   # K floats, strictly increasing, uniform step
    focal: float
    baseline_step: float
    unit_disp: list        # K arrays (H, W) float64
    entity: list | None = None
    occlusion: dict = field(default_factory=dict)   # (i, j) -> (H, W) bool
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def shape(self) -> tuple:
        return self.views[0].shape[:2]

    def _check_pair(self, ref_idx: int, tgt_idx: int) -> None:
        k = self.n_views
        if not (0 <= ref_idx < k and 0 <= tgt_idx < k):
            raise IndexError(f"view index out of range for {k} views")
        if ref_idx == tgt_idx:
            raise ValueError("reference and target views must differ")

    def baseline(self, i: int, j: int) -> float:
        return abs(self.camera_offsets[i] - self.camera_offsets[j])

    def gt_depth(self, view_idx: int) -> np.ndarray:
        return self.baseline_step * self.focal / self.unit_disp[view_idx]

    def gt_disparity(self, ref_idx: int, tgt_idx: int) -> DisparityMap:
        self._check_pair(ref_idx, tgt_idx)
        steps = abs(ref_idx - tgt_idx)
        return DisparityMap(values=steps * self.unit_disp[ref_idx],
                            baseline=self.baseline(ref_idx, tgt_idx),
                            focal=self.focal)

    def gt_occlusion(self, ref_idx: int, tgt_idx: int) -> np.ndarray:
        self._check_pair(ref_idx, tgt_idx)
        key = (ref_idx, tgt_idx)
        if key not in self.occlusion:
            if self.entity is None:
                raise KeyError(f"occlusion mask {key} not available on this frame")
            self.occlusion[key] = _occlusion_zbuffer(self, ref_idx, tgt_idx)
        return self.occlusion[key]


def gt_occlusion_mask(frame: MultiBaselineFrame, ref_idx: int, tgt_idx: int) -> np.ndarray:
    """Pixels of the reference view with no valid correspondence in the target."""
    return frame.gt_occlusion(ref_idx, tgt_idx)


def _occlusion_zbuffer(frame: MultiBaselineFrame, i: int, j: int) -> np.ndarray:
    """Forward z-buffer test at 1-px resolution.

    The target view's own visibility buffer (entity map) already encodes
    nearest-depth-wins with lower-layer-index tie-breaking; a reference pixel
    is occluded iff its projection lands out of bounds or on a different
    surface.
    """
    h, w = frame.shape
    x = np.arange(w, dtype=np.float64)[None, :]
    xp = x - (j - i) * frame.unit_disp[i]
    xi = np.rint(xp).astype(np.int64)
    inside = (xi >= 0) & (xi <= w - 1)
    xi_c = np.clip(xi, 0, w - 1)
    tgt_entity = np.take_along_axis(frame.entity[j], xi_c, axis=1)
    return ~inside | (tgt_entity != frame.entity[i])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _unit_disparity(depth: float, focal: float, baseline_step: float) -> float:
    """Adjacent-baseline disparity; snapped to the integer lattice when close."""
    d = baseline_step * focal / depth
    if abs(d - round(d)) < 1e-9:
        return float(round(d))
    return d


def render_frame(spec: SceneSpec, n_views: int, baseline_step: float,
                 rng_seed: int, max_disparity: float | None = None) -> MultiBaselineFrame:
    """Render all views of a scene and populate ground truth for every pair.

    Deterministic in (spec, n_views, baseline_step, rng_seed).  Raises
    DisparityOverflowError when the widest-baseline disparity would exceed
    ``max_disparity``.
    """
    spec.validate()
    if n_views < 2:
        raise ValueError("need at least two views")
    if baseline_step <= 0:
        raise ValueError("baseline step must be positive")

    f = spec.focal
    h, w = spec.height, spec.width
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0

    d0_bg = _unit_disparity(spec.background_depth, f, baseline_step)
    d0_layers = [_unit_disparity(l.depth, f, baseline_step) for l in spec.layers]
    d0_max = max([d0_bg] + d0_layers)
    if max_disparity is not None and (n_views - 1) * d0_max > max_disparity:
        raise DisparityOverflowError(
            f"disparity overflow: widest baseline reaches {(n_views - 1) * d0_max:.1f} px "
            f"> allowed {max_disparity}")

    # layer projections in view 0 (pixel bounds); view k shifts left by k * d0
    proj = []
    for layer in spec.layers:
        x0, y0, x1, y1 = layer.rect
        proj.append((f * x0 + cx, f * x1 + cx, f * y0 + cy, f * y1 + cy))

    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]

    views, unit_disp, entity = [], [], []
    for k in range(n_views):
        ent = np.zeros((h, w), dtype=np.int16)
        d0m = np.full((h, w), d0_bg, dtype=np.float64)
        for idx, (layer, d0l) in enumerate(zip(spec.layers, d0_layers)):
            px0, px1, py0, py1 = proj[idx]
            shift = k * d0l
            cover = (xs >= px0 - shift) & (xs < px1 - shift) & (ys >= py0) & (ys < py1)
            # nearer surface wins; strict > keeps the lower index on depth ties
            vis = cover & (d0l > d0m)
            ent[vis] = idx + 1
            d0m[vis] = d0l

        img = np.empty((h, w, 3), dtype=np.float64)
        bg_mask = ent == 0
        u = xs + k * d0_bg  # texture-lattice coordinate, shared across views
        tex = texture_rgb(np.broadcast_to(u, (h, w)), np.broadcast_to(ys, (h, w)),
                          spec.texture_family, _mix_seed(rng_seed, spec.background_seed))
        img[bg_mask] = tex[bg_mask]
        for idx, (layer, d0l) in enumerate(zip(spec.layers, d0_layers)):
            mask = ent == idx + 1
            if not mask.any():
                continue
            u = xs + k * d0l
            tex = texture_rgb(np.broadcast_to(u, (h, w)), np.broadcast_to(ys, (h, w)),
                              spec.texture_family, _mix_seed(rng_seed, layer.texture_seed))
            img[mask] = tex[mask]

        views.append(img)
        unit_disp.append(d0m)
        entity.append(ent)

    frame = MultiBaselineFrame(
        views=views,
        camera_offsets=[k * baseline_step for k in range(n_views)],
        focal=f,
        baseline_step=baseline_step,
        unit_disp=unit_disp,
        entity=entity,
        meta={"seed": rng_seed, "spec": spec_to_dict(spec)},
    )
    for i in range(n_views):
        for j in range(n_views):
            if i != j:
                frame.gt_occlusion(i, j)
    return frame


def _mix_seed(rng_seed: int, texture_seed: int) -> int:
    return (rng_seed * 0x9E3779B9 + texture_seed * 0x85EBCA77) & 0xFFFFFFFFFFFFFFFF


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "background_depth": spec.background_depth,
        "background_seed": spec.background_seed,
        "layers": [{"rect": list(l.rect), "depth": l.depth, "texture_seed": l.texture_seed}
                   for l in spec.layers],
        "focal": spec.focal,
        "width": spec.width,
        "height": spec.height,
        "texture_family": spec.texture_family,
    }


def spec_from_dict(data: dict) -> SceneSpec:
    return SceneSpec(
        background_depth=data["background_depth"],
        background_seed=data.get("background_seed", 0),
        layers=tuple(LayerSpec(rect=tuple(l["rect"]), depth=l["depth"],
                               texture_seed=l["texture_seed"]) for l in data["layers"]),
        focal=data["focal"],
        width=data["width"],
        height=data["height"],
        texture_family=data["texture_family"],
    )


# ---------------------------------------------------------------------------
# random scene sampling on the integer-disparity lattice
# ---------------------------------------------------------------------------

def lattice_bounds(cfg, d_max: int) -> tuple:
    """Valid integer adjacent-baseline disparities for a dataset config.

    The requested depth range [depth_min, depth_max] maps to disparities
    [f*B/depth_max, f*B/depth_min]; the upper end is clipped so the widest
    baseline (n_views - 1 steps) stays within the network range d_max.
    """
    fb = cfg.focal * cfg.baseline_step
    d_lo = max(1, math.ceil(fb / cfg.depth_max))
    d_hi = math.floor(min(fb / cfg.depth_min, d_max / (cfg.n_views - 1)))
    if d_hi < d_lo:
        raise DisparityOverflowError(
            f"disparity overflow: no integer disparity in [{fb / cfg.depth_max:.2f}, "
            f"min({fb / cfg.depth_min:.2f}, {d_max / (cfg.n_views - 1):.2f})]")
    return d_lo, d_hi


def sample_scene_spec(rng: np.random.Generator, cfg, d_max: int) -> SceneSpec:
    """Draw a random layered scene whose depths sit on the disparity lattice."""
    d_lo, d_hi = lattice_bounds(cfg, d_max)
    fb = cfg.focal * cfg.baseline_step

    # background stays in the far third so foreground layers keep a clear
    # disparity contrast above the outlier threshold
    bg_hi = min(d_lo + 2, max(d_lo, d_hi - cfg.min_contrast_px))
    d0_bg = int(rng.integers(d_lo, bg_hi + 1))
    layer_lo = min(d0_bg + cfg.min_contrast_px, d_hi)

    n_layers = int(rng.integers(cfg.layers_min, cfg.layers_max + 1))
    cx = (cfg.width - 1) / 2.0
    cy = (cfg.height - 1) / 2.0
    layers = []
    for _ in range(n_layers):
        d0 = int(rng.integers(layer_lo, d_hi + 1))
        lw = int(rng.integers(40, min(110, cfg.width // 2) + 1))
        lh = int(rng.integers(28, min(84, cfg.height - 20) + 1))
        px0 = int(rng.integers(6, cfg.width - lw - 6 + 1))
        py0 = int(rng.integers(4, cfg.height - lh - 4 + 1))
        rect = ((px0 - cx) / cfg.focal, (py0 - cy) / cfg.focal,
                (px0 + lw - cx) / cfg.focal, (py0 + lh - cy) / cfg.focal)
        layers.append(LayerSpec(rect=rect, depth=fb / d0,
                                texture_seed=int(rng.integers(0, 2 ** 31))))

    return SceneSpec(
        background_depth=fb / d0_bg,
        background_seed=int(rng.integers(0, 2 ** 31)),
        layers=tuple(layers),
        focal=cfg.focal,
        width=cfg.width,
        height=cfg.height,
        texture_family=TEXTURE_FAMILIES[int(rng.integers(0, len(TEXTURE_FAMILIES)))],
    )


def render_random_frame(cfg, frame_seed: int, d_max: int) -> MultiBaselineFrame:
    """Sample a scene and render it; pure function of (cfg, frame_seed, d_max)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, frame_seed]))
    spec = sample_scene_spec(rng, cfg, d_max)
    return render_frame(spec, cfg.n_views, cfg.baseline_step,
                        rng_seed=int(rng.integers(0, 2 ** 31)), max_disparity=d_max)
