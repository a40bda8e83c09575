"""Executable diagnostics for the CFA distribution-gap argument.

The camera pipeline is periodically shift-varying on the pixel grid but
shift-invariant on the 2x2 polyphase lattice, so on that lattice the
conditional mean of y' given x' acts per frequency bin as a matrix T(w).
This module estimates T per bin for two corpora, measures the smallest
singular value of their difference over the aliasing band near (pi, pi),
and turns it into the Wasserstein lower bound delta = gamma * sqrt(c_x / N).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cfa
from .residual import build_srm_bank, to_uint8, _filter_fields


class ConditioningError(ValueError):
    pass


class DataError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ParameterError(ValueError):
    pass


# ----------------------------------------------------------------------------
# linear responses


@dataclass(frozen=True)
class LinearResponse:
    T: np.ndarray        # (..., d_y, d_x), real or complex
    n_samples: int
    fit_error: np.ndarray  # relative residual energy per leading index

    @property
    def shape(self):
        return self.T.shape


def _ridge_solve(sxx, syx):
    d = sxx.shape[-1]
    tr = np.real(np.trace(sxx, axis1=-2, axis2=-1))
    lam = 1e-6 * tr / d
    a = sxx + lam[..., None, None] * np.eye(d)
    cond = np.linalg.cond(a)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e12):
        raise ConditioningError("x covariance is singular even after the ridge term")
    # T a = syx  <=>  a^H T^H = syx^H (a is Hermitian)
    return np.swapaxes(np.linalg.solve(a, np.swapaxes(syx, -1, -2).conj()), -1, -2).conj()


def estimate_linear_response(x, y) -> LinearResponse:
    """Ridge estimate T = S_yx (S_xx + lam I)^-1 on mean-removed samples.

    ``x`` is N x d_x and ``y`` is N x d_y; a leading batch axis
    (N x B x d) fits B independent responses at once. Complex samples use
    conjugate-transposed covariances.
    """
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise DataError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    n, dx = x.shape[0], x.shape[-1]
    if n < dx:
        raise ConditioningError(f"{n} samples cannot determine a {dx}-dimensional response")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    # move samples behind the batch axes: (..., N, d)
    xb = np.moveaxis(xc, 0, -2)
    yb = np.moveaxis(yc, 0, -2)
    sxx = np.swapaxes(xb, -1, -2) @ xb.conj() / n
    syx = np.swapaxes(yb, -1, -2) @ xb.conj() / n
    T = _ridge_solve(sxx, syx)
    resid = yb - xb @ np.swapaxes(T, -1, -2)
    denom = np.maximum((np.abs(yb) ** 2).sum(axis=(-2, -1)), 1e-300)
    err = (np.abs(resid) ** 2).sum(axis=(-2, -1)) / denom
    return LinearResponse(T, n, err)


# ----------------------------------------------------------------------------
# polyphase lattice


PHASES = ((0, 0), (0, 1), (1, 0), (1, 1))


def polyphase_decompose(field) -> np.ndarray:
    """Four half-resolution subfields, ``out[k] = field[a::2, b::2]`` for (a, b) in PHASES."""
    f = np.asarray(field)
    if f.ndim < 2 or f.shape[-2] % 2 or f.shape[-1] % 2:
        raise cfa.SizeError(f"polyphase split needs even extents, got {f.shape}")
    return np.stack([f[..., a::2, b::2] for a, b in PHASES], axis=-3)


def polyphase_recompose(sub) -> np.ndarray:
    sub = np.asarray(sub)
    if sub.shape[-3] != 4:
        raise ValueError("expected four polyphase components")
    h, w = sub.shape[-2:]
    out = np.empty(sub.shape[:-3] + (2 * h, 2 * w), dtype=sub.dtype)
    for k, (a, b) in enumerate(PHASES):
        out[..., a::2, b::2] = sub[..., k, :, :]
    return out


@dataclass(frozen=True)
class AliasingBand:
    bins: np.ndarray      # B x 2 integer DFT indices on the coarse lattice
    grid: tuple           # coarse lattice extents
    radius: float
    c_x: float = float("nan")

    def __len__(self):
        return len(self.bins)

    def frequencies(self) -> np.ndarray:
        return 2 * np.pi * self.bins / np.asarray(self.grid)


def aliasing_band(h: int, w: int, radius: float = np.pi / 4) -> AliasingBand:
    """DFT bins of an h x w lattice with |w_i - pi| <= radius and |w_j - pi| <= radius."""
    if radius <= 0:
        raise ParameterError("band radius must be positive")
    ki = np.arange(h)
    kj = np.arange(w)
    oi = np.abs(2 * np.pi * ki / h - np.pi) <= radius + 1e-12
    oj = np.abs(2 * np.pi * kj / w - np.pi) <= radius + 1e-12
    bins = np.array([(i, j) for i in ki[oi] for j in kj[oj]], dtype=int).reshape(-1, 2)
    if len(bins) == 0:
        raise ParameterError(f"no DFT bin of a {h}x{w} lattice lies within {radius:.3f} of (pi, pi)")
    return AliasingBand(bins, (h, w), float(radius))


def band_energy(spectra, band: AliasingBand) -> np.ndarray:
    """Per-sample sum over the band of ||x_hat(w)||^2. ``spectra`` is N x d x h x w."""
    sel = spectra[..., band.bins[:, 0], band.bins[:, 1]]
    return (np.abs(sel) ** 2).sum(axis=(-2, -1))


# ----------------------------------------------------------------------------
# singular values and the gap


def realify(m) -> np.ndarray:
    """Real 2m x 2n embedding [[Re, -Im], [Im, Re]] of a complex m x n matrix.

    Its singular values are those of ``m``, each repeated twice.
    """
    m = np.asarray(m, dtype=complex)
    re, im = m.real, m.imag
    top = np.concatenate([re, -im], axis=-1)
    bot = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def sigma_min(m) -> np.ndarray:
    """Smallest singular value of each trailing matrix (min(d_y, d_x)-th)."""
    m = np.asarray(m)
    if m.ndim < 2:
        return np.abs(m)
    if np.iscomplexobj(m):
        m = realify(m)
    return np.linalg.svd(m, compute_uv=False)[..., -1]


def _per_bin(T, band):
    T = T.T if isinstance(T, LinearResponse) else np.asarray(T)
    if T.shape[0] != len(band):
        raise DomainError(f"response has {T.shape[0]} bins, band has {len(band)}")
    return T


def spectral_gap(T_cfa, T_gen, band: AliasingBand) -> float:
    """gamma = min over the band of sigma_min(T_cfa(w) - T_gen(w))."""
    a, b = _per_bin(T_cfa, band), _per_bin(T_gen, band)
    if a.shape != b.shape:
        raise DomainError(f"response shapes differ: {a.shape} vs {b.shape}")
    return float(np.min(sigma_min(a - b)))


def prop1_delta(gamma: float, c_x: float, n: int) -> float:
    if n < 1:
        raise ParameterError("sample count N must be >= 1")
    if gamma < 0 or c_x < 0:
        raise ParameterError("gamma and c_x must be non-negative")
    return float(gamma * math.sqrt(c_x / n))


# ----------------------------------------------------------------------------
# Wasserstein checks


def w1_mean_bound(samples_p, samples_q) -> float:
    """||mean(P) - mean(Q)||_2, the bound attained by a linear 1-Lipschitz test function."""
    p, q = np.asarray(samples_p, dtype=np.float64), np.asarray(samples_q, dtype=np.float64)
    if p.size == 0 or q.size == 0:
        raise DataError("empty sample set")
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    if p.shape[1] != q.shape[1]:
        raise DataError(f"sample dimensions differ: {p.shape[1]} vs {q.shape[1]}")
    return float(np.linalg.norm(p.mean(axis=0) - q.mean(axis=0)))


def w1_exact_1d(samples_p, samples_q) -> float:
    """Exact empirical W1 of two equal-size 1-D samples (sorted pairing)."""
    p = np.sort(np.asarray(samples_p, dtype=np.float64).reshape(-1))
    q = np.sort(np.asarray(samples_q, dtype=np.float64).reshape(-1))
    if p.size != q.size:
        raise DataError(f"sample sizes differ ({p.size} vs {q.size}); resample to a common size first")
    if p.size == 0:
        raise DataError("empty sample set")
    return float(np.abs(p - q).mean())


def mean_diff_se(samples_p, samples_q) -> float:
    p, q = np.asarray(samples_p, float).reshape(-1), np.asarray(samples_q, float).reshape(-1)
    return float(math.sqrt(p.var(ddof=1) / p.size + q.var(ddof=1) / q.size))


@dataclass(frozen=True)
class ProjectionCheck:
    bound: float
    exact: float
    se: float

    @property
    def ok(self) -> bool:
        return self.bound <= self.exact + 2 * self.se


# ----------------------------------------------------------------------------
# corpora -> spectra


def residual_fields(images, kernel: str = "square3"):
    """Untruncated real-valued high-pass fields of the Bayer decomposition.

    Returns ``(x, y)`` shaped N x H x W and N x 2 x H x W. Values stay real so
    the linear analysis is not distorted by rounding and clamping.
    """
    bank = build_srm_bank().subset([kernel])
    imgs = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    x, y = cfa.decompose_batch(imgs)
    xr = _filter_fields(to_uint8(x).astype(np.float64), bank)[:, 0]
    yr = _filter_fields(to_uint8(np.moveaxis(y, -1, 1)).astype(np.float64), bank)[:, :, 0]
    return xr, yr


def polyphase_spectra(x, y):
    """Unnormalised DFTs of the polyphase vector fields.

    Returns ``X`` (N x 4 x h x w) and ``Y`` (N x 8 x h x w) on the coarse lattice.
    """
    px = polyphase_decompose(x)                       # N x 4 x h x w
    py = polyphase_decompose(y)                       # N x 2 x 4 x h x w
    py = py.reshape(py.shape[0], -1, *py.shape[-2:])  # N x 8 x h x w
    return np.fft.fft2(px), np.fft.fft2(py)


def band_responses(X, Y, band: AliasingBand) -> LinearResponse:
    """Per-bin responses over the band: T is B x 8 x 4 complex."""
    xs = np.moveaxis(X[..., band.bins[:, 0], band.bins[:, 1]], -1, 1)  # N x B x 4
    ys = np.moveaxis(Y[..., band.bins[:, 0], band.bins[:, 1]], -1, 1)  # N x B x 8
    return estimate_linear_response(xs, ys)


@dataclass
class GapReport:
    gamma: float
    c_x: float
    n: int
    delta: float
    n_bins: int
    n_images: tuple
    min_mean_gap: float          # smallest ||mu_p - mu_q|| over probe inputs (should be >= delta)
    projections: list = field(default_factory=list)

    @property
    def bound_ordering_ok(self) -> bool:
        return all(pc.ok for pc in self.projections)

    def as_rows(self):
        rows = [("gamma", self.gamma), ("c_x", self.c_x), ("N", self.n), ("delta", self.delta),
                ("bins", self.n_bins), ("images_p", self.n_images[0]), ("images_q", self.n_images[1]),
                ("min_mean_gap", self.min_mean_gap)]
        for i, pc in enumerate(self.projections):
            rows += [(f"proj{i}_bound", pc.bound), (f"proj{i}_w1", pc.exact), (f"proj{i}_se", pc.se)]
        return rows


def project_checks(Yp, Yq, count: int, rng) -> list[ProjectionCheck]:
    """1-D checks of the mean bound against exact W1 along random unit directions
    of the polyphase y' vector at each coarse site."""
    a = np.moveaxis(np.real(Yp), 1, -1).reshape(-1, Yp.shape[1])
    b = np.moveaxis(np.real(Yq), 1, -1).reshape(-1, Yq.shape[1])
    m = min(len(a), len(b))
    a = a[rng.permutation(len(a))[:m]]
    b = b[rng.permutation(len(b))[:m]]
    out = []
    for _ in range(count):
        v = rng.normal(size=a.shape[1])
        v /= np.linalg.norm(v)
        pa, pb = a @ v, b @ v
        out.append(ProjectionCheck(w1_mean_bound(pa, pb), w1_exact_1d(pa, pb), mean_diff_se(pa, pb)))
    return out


def diagnose(images_p, images_q, radius: float = np.pi / 4, kernel: str = "square3",
             projections: int = 8, seed: int = 0) -> GapReport:
    """Estimate T on both corpora, the band gap gamma, c_x and delta."""
    if len(images_p) == 0 or len(images_q) == 0:
        raise DataError("both corpora must be non-empty")
    xp, yp = residual_fields(images_p, kernel)
    xq, yq = residual_fields(images_q, kernel)
    if xp.shape[1:] != xq.shape[1:]:
        raise DataError("corpora must share image extents")
    Xp, Yp = polyphase_spectra(xp, yp)
    Xq, Yq = polyphase_spectra(xq, yq)
    h, w = Xp.shape[-2:]
    band = aliasing_band(h, w, radius)
    tp = band_responses(Xp, Yp, band)
    tq = band_responses(Xq, Yq, band)
    gamma = spectral_gap(tp, tq, band)
    n = h * w
    energy = band_energy(Xp, band)
    c_x = float(energy.min())
    delta = prop1_delta(gamma, c_x, n)
    # realised conditional-mean gap for each probe input, via Parseval
    diff = tp.T - tq.T                                      # B x 8 x 4
    xs = np.moveaxis(Xp[..., band.bins[:, 0], band.bins[:, 1]], -1, 1)  # N x B x 4
    gap2 = (np.abs(np.einsum("byx,nbx->nby", diff, xs)) ** 2).sum(axis=(1, 2)) / n
    rng = np.random.default_rng(seed)
    checks = project_checks(Yp, Yq, projections, rng)
    return GapReport(gamma, c_x, n, delta, len(band), (len(images_p), len(images_q)),
                     float(np.sqrt(gap2.min())), checks)
