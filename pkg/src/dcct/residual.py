"""Fixed 5x5 high-pass residual filter bank and integer residual truncation.

The bank follows the rich-models steganalysis construction: seven prototype
kernels expanded by discrete rotations into 30 filters. All coefficients are
integers; each kernel carries its own integer normalisation divisor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Compass directions as (row, col) unit steps, in the order
#   NE, E, SE, S, SW, W, NW, N.
COMPASS8 = (("ne", (-1, 1)), ("e", (0, 1)), ("se", (1, 1)), ("s", (1, 0)),
            ("sw", (1, -1)), ("w", (0, -1)), ("nw", (-1, -1)), ("n", (-1, 0)))
# Line kernels where opposite directions coincide: E, S, NE, SE.
COMPASS4_LINE = (("e", (0, 1)), ("s", (1, 0)), ("ne", (-1, 1)), ("se", (1, 1)))

# Directional prototypes: coefficient per step along the ray (0 is the centre).
FIRST_ORDER = {0: -1, 1: 1}
SECOND_ORDER = {-1: 1, 0: -2, 1: 1}
THIRD_ORDER = {-1: 1, 0: -3, 1: 3, 2: -1}

EDGE3 = np.array([[-1, 2, -1],
                  [2, -4, 2],
                  [0, 0, 0]])
EDGE5 = np.array([[-1, 2, -2, 2, -1],
                  [2, -6, 8, -6, 2],
                  [-2, 8, -12, 8, -2],
                  [0, 0, 0, 0, 0],
                  [0, 0, 0, 0, 0]])
SQUARE3 = np.array([[-1, 2, -1],
                    [2, -4, 2],
                    [-1, 2, -1]])
SQUARE5 = np.array([[-1, 2, -2, 2, -1],
                    [2, -6, 8, -6, 2],
                    [-2, 8, -12, 8, -2],
                    [2, -6, 8, -6, 2],
                    [-1, 2, -2, 2, -1]])

# Names of the 8 filters kept in the reduced desk-scale bank.
REDUCED = ("1st_e", "1st_s", "3rd_e", "3rd_s", "2nd_e", "2nd_s", "square3", "square5")


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FilterBank:
    kernels: np.ndarray   # M x 5 x 5 integers
    divisors: np.ndarray  # M integers
    names: tuple

    def __len__(self):
        return len(self.names)

    @property
    def identifier(self) -> str:
        if self.names == ("identity",):
            return "identity"
        return f"srm{len(self)}"

    def subset(self, names) -> "FilterBank":
        idx = [self.names.index(n) for n in names]
        return FilterBank(self.kernels[idx], self.divisors[idx], tuple(names))


def _embed(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    out = np.zeros((5, 5), dtype=np.int64)
    off = (5 - k.shape[0]) // 2
    out[off:off + k.shape[0], off:off + k.shape[1]] = k
    return out


def line_kernel(coeffs: dict, step) -> np.ndarray:
    """Place ray coefficients on the 5x5 grid along direction ``step``."""
    out = np.zeros((5, 5), dtype=np.int64)
    for k, c in coeffs.items():
        out[2 + k * step[0], 2 + k * step[1]] += c
    return out


def build_srm_bank() -> FilterBank:
    """The 30-kernel bank: 2x8 + 1x4 + 2x4 + 2."""
    kernels, divisors, names = [], [], []

    def put(name, k, d):
        names.append(name)
        kernels.append(_embed(k))
        divisors.append(d)

    for tag, step in COMPASS8:
        put(f"1st_{tag}", line_kernel(FIRST_ORDER, step), 1)
    for tag, step in COMPASS8:
        put(f"3rd_{tag}", line_kernel(THIRD_ORDER, step), 3)
    for tag, step in COMPASS4_LINE:
        put(f"2nd_{tag}", line_kernel(SECOND_ORDER, step), 2)
    # cardinal rotations: the prototype's zero rows face down, then turn by 90 deg
    for q, tag in enumerate(("n", "w", "s", "e")):
        put(f"edge3_{tag}", np.rot90(EDGE3, q), 4)
    for q, tag in enumerate(("n", "w", "s", "e")):
        put(f"edge5_{tag}", np.rot90(EDGE5, q), 12)
    put("square3", SQUARE3, 4)
    put("square5", SQUARE5, 12)
    return FilterBank(np.stack(kernels), np.array(divisors, dtype=np.int64), tuple(names))


def build_bank(kind="30") -> FilterBank:
    """``"30"`` / ``"srm30"`` for the full bank, ``"reduced"`` for 8 kernels,
    ``"identity"`` for the high-pass-off ablation."""
    kind = str(kind)
    if kind in ("30", "srm30", "full"):
        return build_srm_bank()
    if kind in ("reduced", "8", "srm8"):
        return build_srm_bank().subset(REDUCED)
    if kind == "identity":
        return FilterBank(_embed([[1]])[None], np.array([1]), ("identity",))
    raise ParameterError(f"unknown filter bank {kind!r}")


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class ResidualStack:
    values: np.ndarray  # H x W x (M*C) integers in [-t, t]
    t: int
    source_channels: int


def _filter_fields(fields: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Replicate-padded correlation of ... x H x W fields with every kernel.

    Returns ... x M x H x W floats (already divided by the per-kernel divisor).
    """
    pad = [(0, 0)] * (fields.ndim - 2) + [(2, 2), (2, 2)]
    padded = np.pad(fields.astype(np.float64), pad, mode="edge")
    win = sliding_window_view(padded, (5, 5), axis=(-2, -1))
    raw = np.tensordot(win, bank.kernels.astype(np.float64), axes=([-2, -1], [1, 2]))
    raw = np.moveaxis(raw, -1, -3)
    return raw / bank.divisors.reshape((-1, 1, 1))


def spatial_residual(fields: np.ndarray, t: int) -> np.ndarray:
    """High-pass-off substitute: 8-bit intensities linearly requantised onto [-t, t]."""
    return round_half_away(np.asarray(fields, dtype=np.float64) * (2 * t) / 255.0) - t


def residual_fields(fields, bank: FilterBank, t: int) -> np.ndarray:
    """Filter, round and clamp integer fields.

    ``fields`` is ... x H x W with 8-bit values; the result is
    ... x M x H x W int8 in [-t, t].
    """
    if t < 1:
        raise ParameterError(f"truncation threshold must be >= 1, got {t}")
    fields = np.asarray(fields)
    if bank.identifier == "identity":
        r = spatial_residual(fields, t)[..., None, :, :]
    else:
        r = round_half_away(_filter_fields(fields, bank))
    return np.clip(r, -t, t).astype(np.int8)


def residuals(channel_field, bank: FilterBank, t: int) -> ResidualStack:
    """Residual stack of an H x W (or H x W x C) 8-bit field.

    Channels are ordered source-channel major: all kernels of channel 0, then
    all kernels of channel 1, ...
    """
    if t < 1:
        raise ParameterError(f"truncation threshold must be >= 1, got {t}")
    f = np.asarray(channel_field)
    if f.ndim == 2:
        f = f[..., None]
    h, w, c = f.shape
    if h < 5 or w < 5:
        raise ParameterError(f"field extents must be at least 5x5, got {h}x{w}")
    r = residual_fields(np.moveaxis(f, -1, 0), bank, t)  # C x M x H x W
    values = np.moveaxis(r.reshape(c * r.shape[1], h, w), 0, -1)
    return ResidualStack(values, int(t), c)


def to_uint8(v) -> np.ndarray:
    """[0, 1] intensities to integer 0..255 (round half away from zero)."""
    return np.clip(round_half_away(np.asarray(v, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# plain-text kernel table


def dump_bank(bank: FilterBank) -> str:
    """One block per kernel: header ``# <name> divisor=<d>`` then five rows."""
    blocks = []
    for name, k, d in zip(bank.names, bank.kernels, bank.divisors):
        rows = "\n".join(" ".join(f"{int(v):d}" for v in row) for row in k)
        blocks.append(f"# {name} divisor={int(d)}\n{rows}")
    return "\n\n".join(blocks) + "\n"


def load_bank(text: str) -> FilterBank:
    kernels, divisors, names = [], [], []
    for block in text.strip().split("\n\n"):
        lines = [ln for ln in block.strip().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ParameterError("kernel block must start with a '# name divisor=d' header")
        head = lines[0][1:].split()
        if len(head) != 2 or not head[1].startswith("divisor="):
            raise ParameterError(f"malformed kernel header {lines[0]!r}")
        rows = [[int(v) for v in ln.split()] for ln in lines[1:]]
        k = np.array(rows, dtype=np.int64)
        if k.shape != (5, 5):
            raise ParameterError(f"kernel {head[0]} is {k.shape}, expected 5x5")
        names.append(head[0])
        divisors.append(int(head[1].split("=", 1)[1]))
        kernels.append(k)
    return FilterBank(np.stack(kernels), np.array(divisors, dtype=np.int64), tuple(names))
