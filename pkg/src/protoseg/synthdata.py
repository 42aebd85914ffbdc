"""Synthetic image-text scenes with known segmentation.

A scene is an h x w grid of patch features.  A few classes are placed as
non-overlapping axis-aligned rectangles; every patch is its class code
vector (class 0 is background) plus Gaussian noise.  The caption is the list
of class ids present in the scene.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    grid: tuple[int, int] = (8, 8)
    d_raw: int = 16
    num_classes: int = 6
    classes_per_scene: tuple[int, int] = (1, 2)
    codebook_seed: int = 0
    blobs_per_class: tuple[int, int] = (1, 1)
    blob_size: tuple[int, int] = (3, 5)
    feature_noise: float = 0.1
    caption_noise: float = 0.0  # mean number of extra repeats per caption token
    max_tries: int = 200

    def __post_init__(self):
        self.grid = tuple(int(x) for x in self.grid)
        self.classes_per_scene = tuple(int(x) for x in self.classes_per_scene)
        self.blobs_per_class = tuple(int(x) for x in self.blobs_per_class)
        self.blob_size = tuple(int(x) for x in self.blob_size)
        lo, hi = self.classes_per_scene
        if min(self.grid) < 1 or self.d_raw < 1 or self.num_classes < 1:
            raise SceneError("grid, d_raw and num_classes must be positive")
        if not 1 <= lo <= hi <= self.num_classes:
            raise SceneError("classes_per_scene must satisfy 1 <= lo <= hi <= num_classes")
        if not 1 <= self.blobs_per_class[0] <= self.blobs_per_class[1]:
            raise SceneError("invalid blobs_per_class range")
        if not 1 <= self.blob_size[0] <= self.blob_size[1]:
            raise SceneError("invalid blob_size range")
        if self.feature_noise < 0 or self.caption_noise < 0:
            raise SceneError("noise levels must be nonnegative")

    @property
    def m(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SyntheticScene:
    patches: np.ndarray  # (m, d_raw)
    caption: list[int]
    gt_mask: np.ndarray  # (m,) ints in 0..K


@dataclass
class SceneSet:
    patches: np.ndarray  # (N, m, d_raw)
    masks: np.ndarray  # (N, m)
    captions: list[list[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captions)

    def subset(self, idx) -> "SceneSet":
        idx = np.asarray(idx)
        return SceneSet(self.patches[idx], self.masks[idx], [self.captions[i] for i in idx])


def codebook(cfg: SceneConfig) -> np.ndarray:
    """(K+1, d_raw) code vectors; row 0 is background."""
    return np.random.default_rng([cfg.codebook_seed, 0xC0DE]).normal(size=(cfg.num_classes + 1, cfg.d_raw))


def _place_blobs(cfg: SceneConfig, classes, counts, rng) -> np.ndarray | None:
    """One rejection-sampling pass; None when some blob overlaps everywhere tried."""
    h, w = cfg.grid
    mask = np.zeros((h, w), dtype=np.int64)
    for cls, count in zip(classes, counts):
        for _ in range(count):
            bh = int(rng.integers(cfg.blob_size[0], min(cfg.blob_size[1], h) + 1))
            bw = int(rng.integers(cfg.blob_size[0], min(cfg.blob_size[1], w) + 1))
            for _ in range(20):
                r0 = int(rng.integers(0, h - bh + 1))
                c0 = int(rng.integers(0, w - bw + 1))
                if not mask[r0:r0 + bh, c0:c0 + bw].any():
                    mask[r0:r0 + bh, c0:c0 + bw] = cls
                    break
            else:
                return None
    return mask


def gen_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    h, w = cfg.grid
    if cfg.blob_size[0] > min(h, w):
        raise SceneError("scene overconstrained: smallest blob does not fit the grid")
    rng = np.random.default_rng([seed])
    k = int(rng.integers(cfg.classes_per_scene[0], cfg.classes_per_scene[1] + 1))
    classes = sorted(int(c) for c in rng.choice(np.arange(1, cfg.num_classes + 1), size=k, replace=False))
    counts = [int(rng.integers(cfg.blobs_per_class[0], cfg.blobs_per_class[1] + 1)) for _ in classes]
    for _ in range(cfg.max_tries):
        mask = _place_blobs(cfg, classes, counts, rng)
        if mask is not None:
            break
    else:
        raise SceneError(f"scene overconstrained: blobs do not fit the grid (seed {seed})")
    flat = mask.ravel()
    patches = codebook(cfg)[flat] + cfg.feature_noise * rng.normal(size=(flat.size, cfg.d_raw))
    caption = []
    for cls in classes:
        caption.extend([cls] * (1 + int(rng.poisson(cfg.caption_noise))))
    return SyntheticScene(patches, caption, flat)


def gen_scenes(cfg: SceneConfig, n_scenes: int, seed: int) -> SceneSet:
    scenes = [gen_scene(cfg, seed + i) for i in range(n_scenes)]
    if not scenes:
        return SceneSet(np.zeros((0, cfg.m, cfg.d_raw)), np.zeros((0, cfg.m), dtype=np.int64), [])
    return SceneSet(np.stack([s.patches for s in scenes]),
                    np.stack([s.gt_mask for s in scenes]),
                    [s.caption for s in scenes])


def to_tensors(scenes: SceneSet) -> dict[str, np.ndarray]:
    offsets = np.cumsum([0] + [len(c) for c in scenes.captions])
    flat = [t for c in scenes.captions for t in c]
    return {
        "patches": scenes.patches,
        "masks": scenes.masks.astype(np.float64),
        "caption_tokens": np.asarray(flat, dtype=np.float64),
        "caption_offsets": offsets.astype(np.float64),
    }


def from_tensors(t: dict[str, np.ndarray]) -> SceneSet:
    off = t["caption_offsets"].astype(np.int64)
    tok = t["caption_tokens"].astype(np.int64)
    captions = [tok[off[i]:off[i + 1]].tolist() for i in range(len(off) - 1)]
    return SceneSet(t["patches"], t["masks"].astype(np.int64), captions)


def gen_dataset(cfg: SceneConfig, n_scenes: int, seed: int, out_path) -> dict:
    """Write ``scenes.pgt`` and ``manifest.json`` under ``out_path``; returns the manifest."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    scenes = gen_scenes(cfg, n_scenes, seed)
    container.save(out / "scenes.pgt", to_tensors(scenes))
    manifest = {
        "format": "PGT1",
        "n_scenes": n_scenes,
        "seed": seed,
        "scene_config": cfg.to_dict(),
        "scenes": [{"index": i, "seed": seed + i, "caption": c} for i, c in enumerate(scenes.captions)],
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest


def load_dataset(path) -> tuple[dict, SceneSet]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return manifest, from_tensors(container.load(path / "scenes.pgt"))
