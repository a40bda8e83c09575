"""Bayer colour-filter-array sampling, bilinear demosaicing and the
CFA-aligned single/dual channel split used as the pretext task."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNELS = "RGB"


class SizeError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class BayerPattern:
    """2x2 tile of channel tags, row-major: ((top-left, top-right), (bottom-left, bottom-right))."""

    grid: tuple = (("R", "G"), ("G", "B"))

    def __post_init__(self):
        tags = [c for row in self.grid for c in row]
        if len(self.grid) != 2 or any(len(r) != 2 for r in self.grid):
            raise ValueError("Bayer tile must be 2x2")
        if sorted(tags) != ["B", "G", "G", "R"]:
            raise ValueError(f"Bayer tile needs one R, one B and two G, got {tags}")

    @classmethod
    def from_string(cls, code: str) -> "BayerPattern":
        code = code.upper()
        if len(code) != 4:
            raise ValueError(f"pattern code must have 4 letters, got {code!r}")
        return cls(((code[0], code[1]), (code[2], code[3])))

    @property
    def code(self) -> str:
        return "".join(c for row in self.grid for c in row)

    def tag_index(self) -> np.ndarray:
        """2x2 array of channel indices (R=0, G=1, B=2)."""
        return np.array([[CHANNELS.index(c) for c in row] for row in self.grid])


RGGB = BayerPattern()


@dataclass(frozen=True)
class CfaMaskSet:
    r: np.ndarray
    g: np.ndarray
    b: np.ndarray

    @property
    def shape(self):
        return self.r.shape

    def stack(self) -> np.ndarray:
        """H x W x 3 float array with masks in R, G, B order."""
        return np.stack([self.r, self.g, self.b], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class RawMosaic:
    z: np.ndarray
    pattern: BayerPattern
    sigma: float = 0.0


@dataclass(frozen=True)
class ChannelDecomposition:
    x: np.ndarray         # H x W, the channel the tile samples at each site
    y: np.ndarray         # H x W x 2, the two remaining channels in R<G<B order
    x_tags: np.ndarray    # H x W channel index of x
    y_tags: np.ndarray    # H x W x 2 channel indices of y


def _as_pattern(pattern) -> BayerPattern:
    if isinstance(pattern, BayerPattern):
        return pattern
    return BayerPattern.from_string(pattern)


def tag_map(h: int, w: int, pattern=RGGB) -> np.ndarray:
    """H x W array of sampled channel indices from periodic tiling."""
    idx = _as_pattern(pattern).tag_index()
    return np.tile(idx, ((h + 1) // 2, (w + 1) // 2))[:h, :w]


def make_bayer_masks(h: int, w: int, pattern=RGGB) -> CfaMaskSet:
    if h < 2 or w < 2:
        raise SizeError(f"mask extents must be at least 2x2, got {h}x{w}")
    tags = tag_map(h, w, pattern)
    return CfaMaskSet(*((tags == c).astype(np.uint8) for c in range(3)))


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {image.shape}")
    return image


def mosaic(image, masks: CfaMaskSet | None = None, sigma: float = 0.0, seed=None, pattern=RGGB) -> RawMosaic:
    """Single-sensor RAW: per-site sampled channel plus optional Gaussian read noise."""
    image = _check_image(image)
    pattern = _as_pattern(pattern)
    if masks is None:
        masks = make_bayer_masks(*image.shape[:2], pattern)
    if masks.shape != image.shape[:2]:
        raise DimensionError(f"mask extents {masks.shape} differ from image extents {image.shape[:2]}")
    if sigma < 0:
        raise ValueError("noise scale must be non-negative")
    z = (masks.stack() * image).sum(axis=2)
    if sigma > 0:
        z = z + np.random.default_rng(seed).normal(0.0, sigma, size=z.shape)
    return RawMosaic(z, pattern, float(sigma))


# Bilinear weights: G from the 4-neighbour cross, R/B from the full 3x3 ring.
BILINEAR_KERNELS = {
    "G": np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64),
    "R": np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64),
    "B": np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64),
}


def demosaic_bilinear(raw: RawMosaic, kernels=None) -> np.ndarray:
    """Fill each missing channel with the weighted mean of its sampled
    neighbours in the 3x3 window; borders are replicate padded."""
    z = np.asarray(raw.z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 4 or z.shape[1] < 4:
        raise SizeError(f"demosaicing needs at least 4x4 input, got {z.shape}")
    kernels = kernels or BILINEAR_KERNELS
    tags = tag_map(*z.shape, raw.pattern)
    h, w = z.shape
    out = np.empty(z.shape + (3,))
    for c, name in enumerate(CHANNELS):
        m = (tags == c).astype(np.float64)
        k = np.asarray(kernels[name], dtype=np.float64)
        ph, pw = k.shape[0] // 2, k.shape[1] // 2
        zp = np.pad(z, ((ph, ph), (pw, pw)), mode="edge")
        mp = np.pad(m, ((ph, ph), (pw, pw)), mode="edge")
        # weighted mean written as z + mean(z_nb - z) so constants stay bit-exact
        num = np.zeros_like(z)
        den = np.zeros_like(z)
        for i in range(k.shape[0]):
            for j in range(k.shape[1]):
                if k[i, j] == 0:
                    continue
                ms = mp[i:i + h, j:j + w]
                num += k[i, j] * ms * (zp[i:i + h, j:j + w] - z)
                den += k[i, j] * ms
        out[..., c] = np.where(m > 0, z, z + num / np.maximum(den, 1e-300))
    return out


def decompose_patch(patch, pattern=RGGB, mode: str = "bayer", seed=None) -> ChannelDecomposition:
    """Split an RGB patch into the sampled channel ``x`` and the two missing ones ``y``.

    ``mode="random"`` draws the kept channel uniformly per pixel instead of
    following the Bayer tile (mask ablation).
    """
    patch = _check_image(patch)
    h, w = patch.shape[:2]
    if h % 2 or w % 2:
        raise SizeError(f"patch extents must be even, got {h}x{w}")
    if mode == "bayer":
        x_tags = tag_map(h, w, pattern)
    elif mode == "random":
        x_tags = np.random.default_rng(seed).integers(0, 3, size=(h, w))
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    # remaining two channels in ascending order
    y_tags = np.stack([np.where(x_tags == 0, 1, 0), np.where(x_tags == 2, 1, 2)], axis=-1)
    rows, cols = np.indices((h, w))
    x = patch[rows, cols, x_tags]
    y = np.stack([patch[rows, cols, y_tags[..., k]] for k in range(2)], axis=-1)
    return ChannelDecomposition(x, y, x_tags, y_tags)


def recombine(dec: ChannelDecomposition) -> np.ndarray:
    h, w = dec.x.shape
    out = np.empty((h, w, 3), dtype=np.result_type(dec.x, dec.y))
    rows, cols = np.indices((h, w))
    out[rows, cols, dec.x_tags] = dec.x
    for k in range(2):
        out[rows, cols, dec.y_tags[..., k]] = dec.y[..., k]
    return out


def decompose_batch(patches: np.ndarray, pattern=RGGB, mode="bayer", rng=None):
    """Vectorised :func:`decompose_patch` for an N x H x W x 3 stack.

    Returns ``(x, y)`` with shapes N x H x W and N x H x W x 2.
    """
    n, h, w, _ = patches.shape
    if h % 2 or w % 2:
        raise SizeError(f"patch extents must be even, got {h}x{w}")
    if mode == "bayer":
        x_tags = np.broadcast_to(tag_map(h, w, pattern), (n, h, w))
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        x_tags = rng.integers(0, 3, size=(n, h, w))
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    y0 = np.where(x_tags == 0, 1, 0)
    y1 = np.where(x_tags == 2, 1, 2)
    x = np.take_along_axis(patches, x_tags[..., None], axis=3)[..., 0]
    y = np.concatenate([np.take_along_axis(patches, y0[..., None], axis=3),
                        np.take_along_axis(patches, y1[..., None], axis=3)], axis=3)
    return x, y


@dataclass(frozen=True)
class SpectrumCheck:
    spectrum: np.ndarray          # DFT of the green-sampled scene
    baseband: np.ndarray          # half-amplitude copy of the scene spectrum
    alias: np.ndarray             # half-amplitude copy shifted by (pi, pi)
    baseband_energy: np.ndarray   # |baseband|^2 per bin
    alias_energy_at_nyquist: float  # |alias|^2 at the (pi, pi) bin
    alias_energy: float           # total energy of the shifted replica
    max_rel_error: float          # superposition residual relative to max |spectrum|


def cfa_spectrum_check(scene) -> SpectrumCheck:
    """Split the DFT of the checkerboard-sampled scene into its baseband and
    (pi, pi)-shifted replica and measure how well they add back up.

    The green sampling field is 1/2 [1 + cos(pi i + pi j)].
    """
    s = np.asarray(scene, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] % 2:
        raise SizeError(f"spectrum check needs a square field with even extents, got {s.shape}")
    n = s.shape[0]
    i, j = np.indices(s.shape)
    m_g = 0.5 * (1.0 + np.cos(np.pi * i + np.pi * j))
    spectrum = np.fft.fft2(m_g * s)
    s_hat = np.fft.fft2(s)
    baseband = 0.5 * s_hat
    alias = 0.5 * np.roll(s_hat, (n // 2, n // 2), axis=(0, 1))
    scale = max(np.abs(spectrum).max(), np.abs(baseband).max(), 1e-300)
    err = np.abs(spectrum - baseband - alias).max() / scale
    return SpectrumCheck(
        spectrum=spectrum,
        baseband=baseband,
        alias=alias,
        baseband_energy=np.abs(baseband) ** 2,
        alias_energy_at_nyquist=float(np.abs(alias[n // 2, n // 2]) ** 2),
        alias_energy=float((np.abs(alias) ** 2).sum()),
        max_rel_error=float(err),
    )
