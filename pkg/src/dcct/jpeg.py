"""Simplified JPEG round trip: per-channel 8x8 DCT quantisation with the
standard luminance table (no colour transform, no entropy coding)."""
from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(qf: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must lie in [1, 100], got {qf}")
    scale = 5000.0 / qf if qf < 50 else 200.0 - 2.0 * qf
    return np.clip(np.floor((LUMA_TABLE * scale + 50.0) / 100.0), 1, 255)


def jpeg_augment(image, qf: int, seed=None) -> np.ndarray:
    """Compress/decompress an H x W x 3 image in [0, 1].

    ``seed`` is accepted for interface symmetry; the round trip is
    deterministic.
    """
    q = quant_table(int(qf))
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0 - 128.0
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(hb, 8, wb, 8, 3).transpose(0, 2, 4, 1, 3)  # hb, wb, c, 8, 8
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(hb * 8, wb * 8, 3)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)
