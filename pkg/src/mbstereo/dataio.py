"""Dataset persistence: PFM disparity maps, PNG views/masks, JSON manifests.

Layout, one folder per frame::

    <root>/manifest.json
    <root>/frame_00000/view_{k}.png        8-bit RGB
                       disp_{i}_{j}.pfm    32-bit float, little-endian (negative scale)
                       occ_{i}_{j}.png     8-bit, 0/255
                       meta.json           offsets, focal, seed, spec echo

Disparities are stored for the adjacent pairs that determine every view's
per-pixel unit disparity; all other pair disparities are exact multiples and
are reconstructed on read.  Occlusion masks are stored for every ordered pair.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scenegen import MultiBaselineFrame, spec_from_dict


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, bottom-up rows, negative scale header (little-endian)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise DatasetError(f"{path}: not a grayscale PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DatasetError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        buf = fh.read(w * h * 4)
        if len(buf) != w * h * 4:
            raise DatasetError(f"{path}: corrupt frame (truncated PFM payload)")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=endian).reshape(h, w)
    return np.flipud(data).astype(np.float64)


# ---------------------------------------------------------------------------
# frame folders
# ---------------------------------------------------------------------------

def _adjacent_pairs(k: int) -> list:
    """Pairs whose stored disparity covers every view's unit-disparity map."""
    pairs = [(i, i + 1) for i in range(k - 1)]
    pairs.append((k - 1, k - 2))
    return pairs


def write_frame(frame: MultiBaselineFrame, folder) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    k = frame.n_views
    for v in range(k):
        img = np.clip(np.rint(frame.views[v] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(folder / f"view_{v}.png")
    for i, j in _adjacent_pairs(k):
        write_pfm(folder / f"disp_{i}_{j}.pfm", frame.gt_disparity(i, j).values)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            occ = frame.gt_occlusion(i, j)
            Image.fromarray((occ.astype(np.uint8)) * 255, mode="L").save(
                folder / f"occ_{i}_{j}.png")
    meta = {
        "camera_offsets": list(map(float, frame.camera_offsets)),
        "focal": float(frame.focal),
        "baseline_step": float(frame.baseline_step),
        "seed": frame.meta.get("seed"),
        "spec": frame.meta.get("spec"),
    }
    (folder / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_frame(folder) -> MultiBaselineFrame:
    folder = Path(folder)
    meta_path = folder / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"corrupt frame {folder.name}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    offsets = meta["camera_offsets"]
    k = len(offsets)
    step = meta["baseline_step"]

    views = []
    for v in range(k):
        p = folder / f"view_{v}.png"
        if not p.exists():
            raise DatasetError(f"corrupt frame {folder.name}: missing view_{v}.png")
        views.append(np.asarray(Image.open(p), dtype=np.float64) / 255.0)

    unit_disp = [None] * k
    for i, j in _adjacent_pairs(k):
        p = folder / f"disp_{i}_{j}.pfm"
        if not p.exists():
            raise DatasetError(f"corrupt frame {folder.name}: missing disp_{i}_{j}.pfm")
        try:
            unit_disp[i] = read_pfm(p)
        except DatasetError as exc:
            raise DatasetError(f"corrupt frame {folder.name}: field disp_{i}_{j}: {exc}") from exc

    occlusion = {}
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            p = folder / f"occ_{i}_{j}.png"
            if not p.exists():
                raise DatasetError(f"corrupt frame {folder.name}: missing occ_{i}_{j}.png")
            occlusion[(i, j)] = np.asarray(Image.open(p)) > 127

    return MultiBaselineFrame(
        views=views,
        camera_offsets=offsets,
        focal=meta["focal"],
        baseline_step=step,
        unit_disp=unit_disp,
        entity=None,
        occlusion=occlusion,
        meta={"seed": meta.get("seed"), "spec": meta.get("spec"), "folder": str(folder)},
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def write_dataset(frames, path, *, extra_manifest: dict | None = None) -> dict:
    """Write frames (any iterable) and a manifest; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for idx, frame in enumerate(frames):
        name = f"frame_{idx:05d}"
        write_frame(frame, root / name)
        names.append(name)
    manifest = {"schema": 1, "frames": names, "n_frames": len(names)}
    if extra_manifest:
        manifest.update(extra_manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    """Lazy view of an on-disk dataset; frames load on demand."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"{self.root}: missing manifest.json")
        self.manifest = json.loads(manifest_path.read_text())
        self.frame_names = self.manifest["frames"]
        self._cache: dict[int, MultiBaselineFrame] = {}
        self._cache_order: list[int] = []
        self.cache_size = 32

    def __len__(self) -> int:
        return len(self.frame_names)

    def load(self, idx: int) -> MultiBaselineFrame:
        if idx in self._cache:
            return self._cache[idx]
        frame = read_frame(self.root / self.frame_names[idx])
        self._cache[idx] = frame
        self._cache_order.append(idx)
        if len(self._cache_order) > self.cache_size:
            evict = self._cache_order.pop(0)
            self._cache.pop(evict, None)
        return frame

    def __iter__(self):
        for i in range(len(self)):
            yield self.load(i)


def read_dataset(path) -> Dataset:
    return Dataset(path)


def generate_dataset(dataset_cfg, d_max: int, path=None, *, n_frames=None,
                     seed=None, extra_manifest=None) -> dict:
    """Render and persist a dataset; streaming, one frame in memory at a time."""
    from .scenegen import render_random_frame
    import dataclasses

    cfg = dataset_cfg
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    root = Path(path if path is not None else cfg.path)
    n = n_frames if n_frames is not None else cfg.n_frames

    def frames():
        for i in range(n):
            yield render_random_frame(cfg, i, d_max)

    extra = {
        "dataset_seed": cfg.seed,
        "n_views": cfg.n_views,
        "baseline_step": cfg.baseline_step,
        "focal": cfg.focal,
        "d_max": d_max,
    }
    if extra_manifest:
        extra.update(extra_manifest)
    return write_dataset(frames(), root, extra_manifest=extra)
