"""Desk-scale proxy corpora.

``photographic`` images pass a smooth, colour-correlated scene through Bayer
sampling and bilinear demosaicing; ``generated`` images are synthesised
directly in RGB, either with independent per-channel content or at half
resolution followed by bilinear upsampling. Nothing here aims at realism;
the two classes differ, by construction, in the CFA interpolation trace.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import cfa

CLASS_CODES = {"photographic": 0, "generated": 1}
SPLIT_CODES = {"train": 0, "test": 1, "calib": 2, "val": 3}
AI_MODES = ("independent", "upsampled")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 128
    width: int = 128
    n_blobs: int = 12
    blob_scale: tuple = (4.0, 24.0)
    smooth: float = 0.7          # Gaussian sigma of the texture noise
    contrast: float = 0.25       # blob amplitude scale
    noise_std: float = 0.06      # texture noise std before clamping
    chroma: float = 1.0          # per-channel texture noise relative to the shared part

    def __post_init__(self):
        if self.height % 2 or self.width % 2:
            raise ValueError(f"scene extents must be even, got {self.height}x{self.width}")


def _blob_layer(rng, h, w, n, scale_range):
    """n Gaussian blobs: returns per-blob fields (n x h x w)."""
    if n == 0:
        return np.zeros((0, h, w))
    cy = rng.uniform(0, h, n)
    cx = rng.uniform(0, w, n)
    sig = rng.uniform(*scale_range, n)[:, None]
    # isotropic Gaussians are separable: outer product of row and column profiles
    gy = np.exp(-0.5 * ((np.arange(h)[None] - cy[:, None]) / sig) ** 2)
    gx = np.exp(-0.5 * ((np.arange(w)[None] - cx[:, None]) / sig) ** 2)
    return gy[:, :, None] * gx[:, None, :]


def _texture(rng, h, w, smooth, std):
    if std == 0:
        return np.zeros((h, w))
    n = rng.normal(size=(h, w))
    if smooth > 0:
        n = ndimage.gaussian_filter(n, smooth, mode="wrap")
    return n * (std / max(n.std(), 1e-12))


def gen_scene(spec: SceneSpec) -> np.ndarray:
    """Smooth RGB field with blobs at shared centres and mostly shared texture."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    blobs = _blob_layer(rng, h, w, spec.n_blobs, spec.blob_scale)
    amp = rng.normal(0, spec.contrast, size=(spec.n_blobs, 1))
    amp = amp * (1.0 + 0.3 * rng.normal(size=(spec.n_blobs, 3)))
    img = 0.5 + np.tensordot(blobs, amp, axes=(0, 0))
    lum = _texture(rng, h, w, spec.smooth, spec.noise_std)
    gains = 1.0 + 0.2 * rng.normal(size=3)
    for c in range(3):
        own = _texture(rng, h, w, spec.smooth, spec.noise_std * spec.chroma)
        img[..., c] += gains[c] * lum + own
    return np.clip(img, 0.0, 1.0)


def gen_photographic(scene, sigma: float = 0.0, seed=None, pattern=cfa.RGGB) -> np.ndarray:
    raw = cfa.mosaic(scene, sigma=sigma, seed=seed, pattern=pattern)
    return np.clip(cfa.demosaic_bilinear(raw), 0.0, 1.0)


def gen_ai_like(spec: SceneSpec, mode: str = "independent") -> np.ndarray:
    if mode == "independent":
        # one scene per channel, each from its own seed stream
        ss = np.random.SeedSequence(spec.seed).spawn(3)
        chans = [gen_scene(replace(spec, seed=int(s.generate_state(1)[0])))[..., c] for c, s in enumerate(ss)]
        return np.stack(chans, axis=-1)
    if mode == "upsampled":
        half = replace(spec, height=spec.height // 2, width=spec.width // 2,
                       blob_scale=tuple(v / 2 for v in spec.blob_scale))
        small = gen_scene(half)
        big = ndimage.zoom(small, (2, 2, 1), order=1, mode="nearest", grid_mode=True)
        return np.clip(big[:spec.height, :spec.width], 0.0, 1.0)
    raise ValueError(f"unknown generation mode {mode!r}; choose from {AI_MODES}")


def quantize8(image) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory images match their on-disk form."""
    return np.round(np.clip(image, 0, 1) * 255.0) / 255.0


@dataclass
class CorpusManifest:
    class_tag: str
    count: int
    generator: dict
    seeds: list
    files: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        return cls(**json.loads(text))


def corpus_seeds(seed: int, class_tag: str, split: str, n: int) -> list:
    if n >= 100_000:
        raise ValueError("corpus too large for the seed layout")
    base = seed * 10_000_000 + SPLIT_CODES[split] * 1_000_000 + CLASS_CODES[class_tag] * 100_000
    return [base + i for i in range(n)]


def make_corpus(class_tag: str, n: int, seed: int = 0, split: str = "train", size: int = 128,
                mode: str = "independent", sigma: float = 0.0, **scene_kw):
    """Generate ``n`` images of one class. Returns ``(images, manifest)``."""
    if class_tag not in CLASS_CODES:
        raise ValueError(f"class tag must be one of {sorted(CLASS_CODES)}")
    seeds = corpus_seeds(seed, class_tag, split, n)
    images = []
    for s in seeds:
        spec = SceneSpec(seed=s, height=size, width=size, **scene_kw)
        if class_tag == "photographic":
            img = gen_photographic(gen_scene(spec), sigma=sigma, seed=s)
        else:
            img = gen_ai_like(spec, mode)
        images.append(quantize8(img))
    gen = {"size": size, "split": split, "seed": seed, "sigma": sigma, **scene_kw}
    if class_tag == "generated":
        gen["mode"] = mode
    return images, CorpusManifest(class_tag, n, gen, seeds)


def write_corpus(root, images, manifest: CorpusManifest, subdir=None) -> CorpusManifest:
    from .io import save_image

    out = Path(root) / (subdir or manifest.class_tag)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for s, img in zip(manifest.seeds, images):
        name = f"{manifest.class_tag}_{s}.ppm"
        save_image(img, out / name)
        files.append(name)
    manifest = replace(manifest, files=files)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest
