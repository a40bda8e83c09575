"""Conditional density model p(y' | x') with a discretized logistic mixture head.

The network is a small U-Net over the x' residual stack; for every pixel and
every y' channel it emits K mixture weights, means and log-scales. The
mixture is evaluated on the integer support {-t, ..., t}, with the mass of
the open tails folded into the two edge bins.

Two evaluation paths exist: graph-recording tensors for training
(:func:`nll_tensor`) and float64 numpy for inference and scoring
(:func:`nll`, :func:`entropy_map`, :func:`mixture_mean`).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .residual import ResidualStack

S_MIN = 1e-3
PROB_FLOOR = 1e-7
LEAK = 0.01


class DomainError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class CondNetConfig:
    in_channels: int
    out_channels: int
    k: int = 10
    width: int = 32
    depth: int = 3
    skip: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one mixture component")
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if self.out_channels != 2 * self.in_channels:
            raise ValueError(f"out_channels must be 2 x in_channels ({2 * self.in_channels}), got {self.out_channels}")

    @classmethod
    def for_bank(cls, bank_size: int, **kw) -> "CondNetConfig":
        return cls(in_channels=bank_size, out_channels=2 * bank_size, **kw)


@dataclass(frozen=True)
class MixtureField:
    """Mixture parameters laid out N x C_out x K x H x W."""

    w: np.ndarray
    mu: np.ndarray
    s: np.ndarray

    @property
    def k(self):
        return self.w.shape[2]


def init_params(cfg: CondNetConfig, seed: int, zero_head: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    p = {}
    c = cfg.in_channels
    widths = [cfg.width * 2 ** lvl for lvl in range(cfg.depth + 1)]
    for lvl in range(cfg.depth):
        p.update(nc.conv_params(rng, f"enc{lvl}a", c, widths[lvl]))
        p.update(nc.conv_params(rng, f"enc{lvl}b", widths[lvl], widths[lvl]))
        c = widths[lvl]
    p.update(nc.conv_params(rng, "mida", c, widths[-1]))
    p.update(nc.conv_params(rng, "midb", widths[-1], widths[-1]))
    c = widths[-1]
    for lvl in reversed(range(cfg.depth)):
        c_in = c + (widths[lvl] if cfg.skip else 0)
        p.update(nc.conv_params(rng, f"dec{lvl}a", c_in, widths[lvl]))
        p.update(nc.conv_params(rng, f"dec{lvl}b", widths[lvl], widths[lvl]))
        c = widths[lvl]
    head = nc.conv_params(rng, "head", c, 3 * cfg.out_channels * cfg.k, k=1)
    if zero_head:
        head = {n: nc.Tensor(np.zeros(t.shape, dtype=nc.DTYPE), requires_grad=True, name=n) for n, t in head.items()}
    p.update(head)
    return p


def _block(p, name, h):
    h = nc.leaky_relu(nc.conv2d(h, p[f"{name}a.w"], p[f"{name}a.b"], padding=1), LEAK)
    return nc.leaky_relu(nc.conv2d(h, p[f"{name}b.w"], p[f"{name}b.b"], padding=1), LEAK)


def forward_raw(params: dict, cfg: CondNetConfig, x, t: int):
    """U-Net pass. ``x`` is N x C_in x H x W (integer residuals).

    Returns ``(logits, mu, log_s)`` tensors shaped N x C_out x K x (H*W).
    """
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise SizeError(f"input has {c} channels, model expects {cfg.in_channels}")
    if h % 2 ** cfg.depth or w % 2 ** cfg.depth:
        raise SizeError(f"extents {h}x{w} not divisible by 2^{cfg.depth}")
    hcur = nc.as_tensor(np.asarray(x, dtype=nc.DTYPE) / t) if not isinstance(x, nc.Tensor) else x * (1.0 / t)
    skips = []
    for lvl in range(cfg.depth):
        hcur = _block(params, f"enc{lvl}", hcur)
        skips.append(hcur)
        hcur = nc.avg_pool2(hcur)
    hcur = _block(params, "mid", hcur)
    for lvl in reversed(range(cfg.depth)):
        hcur = nc.upsample2(hcur)
        if cfg.skip:
            hcur = nc.concat([hcur, skips[lvl]], axis=1)
        hcur = _block(params, f"dec{lvl}", hcur)
    out = nc.conv2d(hcur, params["head.w"], params["head.b"])
    ck = cfg.out_channels * cfg.k
    shape = (n, cfg.out_channels, cfg.k, h * w)
    logits = out[:, 0:ck].reshape(shape)
    mu = out[:, ck:2 * ck].reshape(shape)
    log_s = out[:, 2 * ck:3 * ck].reshape(shape)
    return logits, mu, log_s


def nll_elements(raw, y, t: int):
    """Per-element negative log-likelihood tensor, N x C_out x (H*W).

    ``y`` holds integer targets N x C_out x (H*W) inside [-t, t].
    """
    logits, mu, log_s = raw
    y = np.asarray(y)
    if np.abs(y).max(initial=0) > t:
        raise DomainError(f"targets outside [-{t}, {t}]")
    yk = y[:, :, None, :].astype(nc.DTYPE)
    w = nc.softmax(logits, axis=2)
    s = nc.maximum(nc.exp(log_s), S_MIN)
    inv = nc.div(1.0, s)
    centred = nc.sub(yk, mu)
    cdf_hi = nc.sigmoid(inv * (centred + 0.5))
    cdf_lo = nc.sigmoid(inv * (centred - 0.5))
    top = (yk >= t).astype(nc.DTYPE)
    bot = (yk <= -t).astype(nc.DTYPE)
    pmf = (cdf_hi * (1.0 - top) + top) - cdf_lo * (1.0 - bot)
    p = nc.tsum(w * pmf, axis=2)
    return -nc.log(nc.maximum(p, PROB_FLOOR))


def nll_tensor(raw, y, t: int):
    """Mean NLL over pixels and channels as a scalar tensor."""
    return nc.mean(nll_elements(raw, y, t))


def mixture_mean_tensor(raw, t: int):
    logits, mu, _ = raw
    w = nc.softmax(logits, axis=2)
    return nc.clamp(nc.tsum(w * mu, axis=2), -t, t)


def raw_to_field(raw, h: int, w: int) -> MixtureField:
    logits, mu, log_s = (r.data.astype(np.float64) for r in raw)
    n, c, k, _ = logits.shape
    z = logits - logits.max(axis=2, keepdims=True)
    wts = np.exp(z)
    wts /= wts.sum(axis=2, keepdims=True)
    s = np.maximum(np.exp(log_s), S_MIN)
    shape = (n, c, k, h, w)
    return MixtureField(wts.reshape(shape), mu.reshape(shape), s.reshape(shape))


def site_nll_and_mean(raw_arrays, y, t: int):
    """Inference-only float32 twin of :func:`nll_elements` and
    :func:`mixture_mean_tensor` on plain arrays (no graph, one pass).

    Returns ``(nll, mean)``, both N x C_out x (H*W).
    """
    logits, mu, log_s = raw_arrays
    y = np.asarray(y)
    if np.abs(y).max(initial=0) > t:
        raise DomainError(f"targets outside [-{t}, {t}]")
    z = logits - logits.max(axis=2, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=2, keepdims=True)
    with np.errstate(over="ignore"):
        inv = 1.0 / np.maximum(np.exp(log_s), np.float32(S_MIN))
    yk = y[:, :, None, :].astype(np.float32)
    c = yk - mu
    hi = np.where(yk >= t, np.float32(1), 0.5 + 0.5 * np.tanh(0.5 * inv * (c + 0.5)))
    lo = np.where(yk <= -t, np.float32(0), 0.5 + 0.5 * np.tanh(0.5 * inv * (c - 0.5)))
    p = (w * (hi - lo)).sum(axis=2)
    nll = -np.log(np.maximum(p, np.float32(PROB_FLOOR)))
    mean = np.clip((w * mu).sum(axis=2), -t, t)
    return nll, mean


def site_nll_minus_entropy(raw_arrays, y, t: int):
    """Float32 per-site ``NLL - H`` for the one-class score (N x C_out x HW).

    The logistic CDF is evaluated once per bin edge, so the full PMF costs
    2t extra CDF evaluations per component rather than a float64 table.
    """
    logits, mu, log_s = raw_arrays
    y = np.asarray(y)
    if np.abs(y).max(initial=0) > t:
        raise DomainError(f"targets outside [-{t}, {t}]")
    z = logits - logits.max(axis=2, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=2, keepdims=True)
    with np.errstate(over="ignore"):
        inv = 1.0 / np.maximum(np.exp(log_s), np.float32(S_MIN))
    edges = np.arange(-t + 0.5, t, 1.0, dtype=np.float32)  # 2t interior edges
    cdf = 0.5 + 0.5 * np.tanh(0.5 * inv[..., None] * (edges - mu[..., None]))
    cdf = (w[..., None] * cdf).sum(axis=2)  # mixture CDF, N x C x HW x 2t
    n, c, hw, _ = cdf.shape
    full = np.concatenate([np.zeros((n, c, hw, 1), np.float32), cdf, np.ones((n, c, hw, 1), np.float32)], axis=-1)
    pmf = np.diff(full, axis=-1)
    logp = np.log(np.maximum(pmf, np.float32(PROB_FLOOR)))
    ent = -(pmf * logp).sum(axis=-1)
    idx = (y.astype(np.int64) + t)[..., None]
    nll = -np.take_along_axis(logp, idx, axis=-1)[..., 0]
    return nll - ent


# ----------------------------------------------------------------------------
# float64 evaluation


def _logistic_cdf(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def discretized_logistic_pmf(b, mu, s, t: int):
    """P(bin) for a single logistic component on the support {-t..t}."""
    b = np.asarray(b)
    if np.any(np.abs(b) > t) or np.any(b != np.round(b)):
        raise DomainError(f"bin outside the integer support [-{t}, {t}]")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < S_MIN):
        raise DomainError(f"scale below floor {S_MIN}")
    hi = np.where(b >= t, 1.0, _logistic_cdf((b + 0.5 - mu) / s))
    lo = np.where(b <= -t, 0.0, _logistic_cdf((b - 0.5 - mu) / s))
    return hi - lo


def pmf_table(field: MixtureField, t: int) -> np.ndarray:
    """Mixture PMF over all 2t+1 bins: N x C x H x W x (2t+1)."""
    edges = np.arange(-t, t + 2) - 0.5  # 2t+2 bin edges
    z = (edges - field.mu[..., None]) / field.s[..., None]
    cdf = _logistic_cdf(z)
    cdf[..., 0] = 0.0
    cdf[..., -1] = 1.0
    comp = np.diff(cdf, axis=-1)
    return np.einsum("nckhw,nckhwb->nchwb", field.w, comp)


def _check_targets(field, y, t):
    y = np.asarray(y)
    n, c, _, h, w = field.w.shape
    if y.shape != (n, c, h, w):
        raise nc.ShapeError(f"targets shape {y.shape} does not match field {(n, c, h, w)}")
    if np.abs(y).max(initial=0) > t:
        raise DomainError(f"targets outside [-{t}, {t}]")
    return y.astype(np.int64)


def nll_map(field: MixtureField, y, t: int) -> np.ndarray:
    """-log p(y) per pixel and channel (N x C x H x W)."""
    y = _check_targets(field, y, t)
    comp = discretized_logistic_pmf(y[:, :, None], field.mu, field.s, t)
    p = (field.w * comp).sum(axis=2)
    return -np.log(np.maximum(p, PROB_FLOOR))


def nll(field: MixtureField, y, t: int) -> float:
    return float(nll_map(field, y, t).mean())


def entropy_map(field: MixtureField, t: int) -> np.ndarray:
    """Entropy of the collapsed per-site PMF (N x C x H x W), in nats."""
    p = pmf_table(field, t)
    return -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)


def mixture_mean(field: MixtureField, t: int) -> np.ndarray:
    return np.clip((field.w * field.mu).sum(axis=2), -t, t)


# ----------------------------------------------------------------------------
# model container


@dataclass
class CondModel:
    config: CondNetConfig
    params: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: CondNetConfig, seed: int, **meta) -> "CondModel":
        meta = {"seed": int(seed), "steps": 0, **meta}
        return cls(config, init_params(config, seed), meta)

    @property
    def t(self) -> int:
        return int(self.meta.get("t", 7))

    def raw(self, x):
        return forward_raw(self.params, self.config, x, self.t)

    def forward(self, x_stack) -> MixtureField:
        """Mixture field for a residual stack (H x W x C) or a batch (N x C x H x W)."""
        x = _as_batch(x_stack)
        with nc.no_grad():
            raw = self.raw(x)
        return raw_to_field(raw, x.shape[2], x.shape[3])

    def config_dict(self) -> dict:
        return asdict(self.config)

    def param_bytes(self) -> bytes:
        return nc.params_bytes(self.params)


def _as_batch(x_stack) -> np.ndarray:
    if isinstance(x_stack, ResidualStack):
        return np.moveaxis(x_stack.values, -1, 0)[None]
    x = np.asarray(x_stack)
    if x.ndim == 3:
        return x[None]
    return x


def forward(model: CondModel, x_stack) -> MixtureField:
    return model.forward(x_stack)
