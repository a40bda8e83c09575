"""Two-stage training, patch-averaged detection and the one-class scorer.

Stage I fits a conditional colour model per image class on residual crops.
Stage II freezes those models (unless ``finetune="full"``), turns every crop
into a feature map and trains a small conv + attention classifier on it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import cfa, condmodel as cm, numcore as nc
from .jpeg import jpeg_augment
from .residual import build_bank, residual_fields, to_uint8

log = logging.getLogger("dcct")

SINGLE_MODEL = ("dual", "p", "q")
MASK_MODES = ("bayer", "random")
HIGHPASS = ("on", "off")
FINETUNE = ("frozen", "full")


class DataError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class PatchSizeError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 16
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    t: int = 7
    k: int = 10
    bank: str = "30"
    width: int = 32
    depth: int = 3
    jpeg_prob: float = 0.05
    qf_min: int = 70
    qf_max: int = 100
    # Stage II
    cls_steps: int = 2000
    cls_lr: float = 1e-4
    cls_width: int = 32
    pool_crops: int = 2
    # inference
    patches: int = 16
    threshold: float = 0.5
    percentile: float = 95.0
    # ablation switches
    single_model: str = "dual"
    mask_mode: str = "bayer"
    highpass: str = "on"
    finetune: str = "frozen"

    def __post_init__(self):
        if self.patch_size % 2 or self.patch_size % 2 ** self.depth:
            raise ValueError(f"patch size {self.patch_size} must be even and divisible by 2^{self.depth}")
        if self.patch_size < 8:
            raise ValueError("patch size must be at least 8")
        if not 0.0 <= self.jpeg_prob <= 1.0:
            raise ValueError(f"jpeg probability {self.jpeg_prob} outside [0, 1]")
        if not 1 <= self.qf_min <= self.qf_max <= 100:
            raise ValueError(f"quality range [{self.qf_min}, {self.qf_max}] outside [1, 100]")
        if self.t < 1:
            raise ValueError("t must be >= 1")
        for name, allowed in (("single_model", SINGLE_MODEL), ("mask_mode", MASK_MODES),
                              ("highpass", HIGHPASS), ("finetune", FINETUNE)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.patches < 1 or self.batch_size < 1:
            raise ValueError("patch count and batch size must be positive")

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """Full-size defaults (30-kernel bank, depth 3, width 32)."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Small preset sized for a single CPU core."""
        base = dict(patch_size=32, lr=2e-3, steps=100, k=3, bank="reduced", width=8, depth=2,
                    cls_steps=150, cls_lr=2e-3, cls_width=16, pool_crops=1)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def filter_bank(self):
        return build_bank("identity" if self.highpass == "off" else self.bank)

    def cond_config(self) -> cm.CondNetConfig:
        return cm.CondNetConfig.for_bank(len(self.filter_bank()), k=self.k, width=self.width, depth=self.depth)

    # flat key=value text form
    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        kw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            kw[key] = types[key](val)
        return replace(base, **kw)


# ----------------------------------------------------------------------------
# crops and batches


def check_patch_fits(image, s: int):
    h, w = image.shape[:2]
    if h < s or w < s:
        raise PatchSizeError(f"image {h}x{w} smaller than patch size {s}")


def random_crop_corners(h: int, w: int, s: int, count: int, rng) -> np.ndarray:
    """``count`` top-left corners, uniform over even positions so the Bayer
    phase of every crop matches the image's."""
    ny, nx = (h - s) // 2 + 1, (w - s) // 2 + 1
    return np.stack([rng.integers(0, ny, count) * 2, rng.integers(0, nx, count) * 2], axis=1)


def crop(image, corner, s: int) -> np.ndarray:
    r, c = int(corner[0]), int(corner[1])
    return image[r:r + s, c:c + s]


def residual_batch(crops: np.ndarray, cfg: TrainConfig, rng=None):
    """Decompose and residualise an N x s x s x 3 stack of crops in [0, 1].

    Returns int8 arrays ``x`` (N x M x s x s) and ``y`` (N x 2M x s x s).
    """
    bank = cfg.filter_bank()
    x, y = cfa.decompose_batch(np.asarray(crops), mode=cfg.mask_mode, rng=rng)
    xr = residual_fields(to_uint8(x), bank, cfg.t)
    yr = residual_fields(to_uint8(np.moveaxis(y, -1, 1)), bank, cfg.t)
    n, _, m, h, w = yr.shape
    return xr, yr.reshape(n, 2 * m, h, w)


def maybe_jpeg(patch, cfg: TrainConfig, rng):
    if cfg.jpeg_prob > 0 and rng.random() < cfg.jpeg_prob:
        return jpeg_augment(patch, int(rng.integers(cfg.qf_min, cfg.qf_max + 1)))
    return patch


def _usable(images, s):
    keep = []
    for i, img in enumerate(images):
        if img.shape[0] < s or img.shape[1] < s:
            log.warning("skipping image %d (%dx%d): smaller than patch size %d", i, img.shape[0], img.shape[1], s)
            continue
        keep.append(img)
    if not keep:
        raise DataError(f"no image is at least {s}x{s}")
    return keep


def sample_training_batch(images, cfg: TrainConfig, rng, augment=True) -> np.ndarray:
    s = cfg.patch_size
    idx = rng.integers(0, len(images), cfg.batch_size)
    out = []
    for i in idx:
        img = images[i]
        corner = random_crop_corners(img.shape[0], img.shape[1], s, 1, rng)[0]
        p = crop(img, corner, s)
        out.append(maybe_jpeg(p, cfg, rng) if augment else p)
    return np.stack(out)


# ----------------------------------------------------------------------------
# Stage I


def _model_meta(cfg: TrainConfig, class_tag: str, seed: int) -> dict:
    return {"class_tag": class_tag, "t": cfg.t, "bank": cfg.filter_bank().identifier,
            "pattern": cfa.RGGB.code, "mask_mode": cfg.mask_mode, "seed": int(seed),
            "patch_size": cfg.patch_size, "steps": 0}


def train_conditional(images, class_tag: str, cfg: TrainConfig, seed=None, log_every=0) -> cm.CondModel:
    """Fit one conditional model to crops of ``images`` by minimising the mean NLL."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise DataError("empty corpus")
    images = _usable(images, cfg.patch_size)
    seed = cfg.seed if seed is None else seed
    ccfg = cfg.cond_config()
    params = cm.init_params(ccfg, seed)
    state = nc.OptimizerState(lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    losses = []
    for step in range(cfg.steps):
        batch = sample_training_batch(images, cfg, rng)
        x, y = residual_batch(batch, cfg, rng)
        raw = cm.forward_raw(params, ccfg, x, cfg.t)
        loss = cm.nll_tensor(raw, y.reshape(y.shape[0], y.shape[1], -1), cfg.t)
        grads = {r.name: r.grad for r in nc.backward(loss, params)}
        params, state = nc.adam_step(params, grads, state)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("stage I [%s] step %d nll %.4f", class_tag, step + 1, np.mean(losses[-log_every:]))
    meta = _model_meta(cfg, class_tag, seed)
    meta["steps"] = cfg.steps
    meta["final_nll"] = float(np.mean(losses[-10:])) if losses else float("nan")
    return cm.CondModel(ccfg, params, meta)


# ----------------------------------------------------------------------------
# features


def check_compatible(model: cm.CondModel, cfg: TrainConfig, role="model"):
    if model is None:
        return
    if model.t != cfg.t:
        raise CompatibilityError(f"{role} was trained with t={model.t} but the pipeline is configured with t={cfg.t}")
    want = cfg.filter_bank().identifier
    got = model.meta.get("bank", want)
    if got != want:
        raise CompatibilityError(f"{role} uses filter bank {got} but the pipeline is configured with {want}")


def feature_channels(bank_size: int, n_models: int) -> int:
    return n_models * (2 * bank_size + 1)


def _active_models(p, q, cfg):
    if cfg.single_model == "p":
        return [p]
    if cfg.single_model == "q":
        return [q]
    return [m for m in (p, q) if m is not None]


def features_from_residuals(x, y, models, cfg: TrainConfig) -> np.ndarray:
    """Mixture means and per-model mean-over-channel NLL maps, concatenated.

    Returns float32 N x (2M+1)*len(models) x H x W.
    """
    n, _, h, w = x.shape
    y3 = y.reshape(n, y.shape[1], -1)
    parts = []
    for m in models:
        with nc.no_grad():
            raw = [r.data for r in m.raw(x)]
        nll, mean = cm.site_nll_and_mean(raw, y3, cfg.t)
        parts.append(mean.reshape(n, -1, h, w))
        parts.append(nll.mean(axis=1).reshape(n, 1, h, w))
    return np.concatenate(parts, axis=1).astype(np.float32)


def features_tensor_from_residuals(x, y, models, cfg: TrainConfig):
    n, _, h, w = x.shape
    y3 = y.reshape(n, y.shape[1], -1)
    parts = []
    for m in models:
        raw = m.raw(x)
        c_out = m.config.out_channels
        parts.append(cm.mixture_mean_tensor(raw, cfg.t).reshape((n, c_out, h, w)))
        parts.append(nc.mean(cm.nll_elements(raw, y3, cfg.t), axis=1, keepdims=True).reshape((n, 1, h, w)))
    return nc.concat(parts, axis=1)


def extract_features(patches, p, q=None, cfg: TrainConfig = None, rng=None, chunk=16) -> np.ndarray:
    """Feature maps for a patch (s x s x 3) or a stack of patches (N x s x s x 3)."""
    cfg = cfg or TrainConfig()
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 3
    if single:
        patches = patches[None]
    if patches.shape[1] != cfg.patch_size or patches.shape[2] != cfg.patch_size:
        raise PatchSizeError(f"patch extents {patches.shape[1:3]} differ from configured size {cfg.patch_size}")
    models = _active_models(p, q, cfg)
    if not models or any(m is None for m in models):
        raise CompatibilityError(f"single_model={cfg.single_model!r} needs the corresponding conditional model")
    for role, m in zip(("p", "q"), (p, q)):
        check_compatible(m, cfg, role)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out = []
    for i in range(0, len(patches), chunk):
        x, y = residual_batch(patches[i:i + chunk], cfg, rng)
        out.append(features_from_residuals(x, y, models, cfg))
    feats = np.concatenate(out)
    return feats[0] if single else feats


def features_tensor(crops, models, cfg: TrainConfig, rng):
    """Graph-recording feature extraction (used when fine-tuning end to end)."""
    x, y = residual_batch(crops, cfg, rng)
    return features_tensor_from_residuals(x, y, models, cfg)


# ----------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class ClassifierConfig:
    in_channels: int
    patch_size: int
    width: int = 32
    n_blocks: int = 4
    n_layers: int = 2
    grid: int = 8

    def __post_init__(self):
        if self.patch_size < self.grid or self.patch_size % self.grid:
            raise ValueError(f"patch size {self.patch_size} cannot be pooled onto a {self.grid}x{self.grid} grid")
        downs = int(round(math.log2(self.patch_size // self.grid)))
        if 2 ** downs * self.grid != self.patch_size:
            raise ValueError("patch size must be grid * 2^k")
        if downs > self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks cannot downsample {self.patch_size} to {self.grid}")

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.patch_size // self.grid)))


@dataclass
class Classifier:
    config: ClassifierConfig
    params: dict
    norm_mu: np.ndarray   # per-input-channel standardisation
    norm_sd: np.ndarray

    @classmethod
    def initialize(cls, config: ClassifierConfig, seed: int) -> "Classifier":
        rng = np.random.default_rng([seed, 2])
        d = config.width
        p = {}
        p.update(nc.conv_params(rng, "stem", config.in_channels, d, k=1))
        for b in range(config.n_blocks):
            p.update(nc.conv_params(rng, f"blk{b}a", d, d))
            p.update(nc.conv_params(rng, f"blk{b}b", d, d))
        p["pos"] = nc.uniform_fan_in(rng, (config.grid ** 2, d), d, "pos")
        for l in range(config.n_layers):
            p.update(nc.norm_params(f"tf{l}.ln1", d))
            p.update(nc.norm_params(f"tf{l}.ln2", d))
            for nm in ("q", "k", "v", "o"):
                p.update(nc.linear_params(rng, f"tf{l}.{nm}", d, d))
            p.update(nc.linear_params(rng, f"tf{l}.ff1", d, 2 * d))
            p.update(nc.linear_params(rng, f"tf{l}.ff2", 2 * d, d))
        p.update(nc.norm_params("out.ln", d))
        p.update(nc.linear_params(rng, "out.head", d, 1))
        c = config.in_channels
        return cls(config, p, np.zeros(c, np.float32), np.ones(c, np.float32))

    def fit_normalizer(self, feats: np.ndarray):
        self.norm_mu = feats.mean(axis=(0, 2, 3)).astype(np.float32)
        self.norm_sd = np.maximum(feats.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)

    def logits_tensor(self, feats, params=None):
        params = params or self.params
        return classifier_forward(params, self.config, feats, self.norm_mu, self.norm_sd)

    def logits(self, feats, chunk=16) -> np.ndarray:
        out = []
        with nc.no_grad():
            for i in range(0, len(feats), chunk):
                out.append(self.logits_tensor(feats[i:i + chunk]).data.astype(np.float64).reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def param_bytes(self) -> bytes:
        return nc.params_bytes(self.params)


def _linear(p, name, x):
    return nc.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def classifier_forward(p, cfg: ClassifierConfig, feats, mu, sd):
    """Residual trunk down to a grid x grid map, 2 attention layers, mean-pooled logit.

    Returns an N x 1 tensor of logits.
    """
    if isinstance(feats, nc.Tensor):
        h = (feats - mu.reshape(1, -1, 1, 1)) * (1.0 / sd).reshape(1, -1, 1, 1)
    else:
        h = nc.as_tensor((np.asarray(feats, np.float32) - mu[None, :, None, None]) / sd[None, :, None, None])
    n = h.shape[0]
    # per-pixel embedding, then each of the first n_down blocks halves the grid
    h = nc.leaky_relu(nc.conv2d(h, p["stem.w"], p["stem.b"]), cm.LEAK)
    for b in range(cfg.n_blocks):
        if b < cfg.n_down:
            h = nc.avg_pool2(h)
        r = nc.leaky_relu(nc.conv2d(h, p[f"blk{b}a.w"], p[f"blk{b}a.b"], padding=1), cm.LEAK)
        r = nc.conv2d(r, p[f"blk{b}b.w"], p[f"blk{b}b.b"], padding=1)
        h = nc.leaky_relu(h + r, cm.LEAK)
    d = cfg.width
    tok = nc.transpose(h.reshape((n, d, cfg.grid ** 2)), (0, 2, 1)) + p["pos"]
    scale = 1.0 / math.sqrt(d)
    for l in range(cfg.n_layers):
        a = nc.layer_norm(tok, p[f"tf{l}.ln1.g"], p[f"tf{l}.ln1.b"])
        q = _linear(p, f"tf{l}.q", a)
        k = _linear(p, f"tf{l}.k", a)
        v = _linear(p, f"tf{l}.v", a)
        att = nc.softmax(nc.matmul(q, nc.transpose(k, (0, 2, 1))) * scale, axis=-1)
        tok = tok + _linear(p, f"tf{l}.o", nc.matmul(att, v))
        b2 = nc.layer_norm(tok, p[f"tf{l}.ln2.g"], p[f"tf{l}.ln2.b"])
        tok = tok + _linear(p, f"tf{l}.ff2", nc.leaky_relu(_linear(p, f"tf{l}.ff1", b2), cm.LEAK))
    pooled = nc.mean(nc.layer_norm(tok, p["out.ln.g"], p["out.ln.b"]), axis=1)
    return _linear(p, "out.head", pooled)


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy, softplus(z) - y z."""
    y = np.asarray(labels, dtype=np.float32).reshape(-1, 1)
    return nc.mean(nc.softplus(logits) - logits * y)


def _feature_pool(images, labels, p, q, cfg, rng):
    crops, ys = [], []
    for img, lab in zip(images, labels):
        for c in random_crop_corners(img.shape[0], img.shape[1], cfg.patch_size, cfg.pool_crops, rng):
            crops.append(crop(img, c, cfg.patch_size))
            ys.append(lab)
    feats = extract_features(np.stack(crops), p, q, cfg, rng)
    return feats, np.asarray(ys)


def train_classifier_on_features(feats, labels, cfg: TrainConfig, seed=None, log_every=0) -> Classifier:
    """Stage II on precomputed feature maps (frozen conditional models)."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("classifier training needs both labels")
    seed = cfg.seed if seed is None else seed
    ccfg = ClassifierConfig(feats.shape[1], feats.shape[2], width=cfg.cls_width)
    clf = Classifier.initialize(ccfg, seed)
    clf.fit_normalizer(feats)
    params, state = clf.params, nc.OptimizerState(lr=cfg.cls_lr)
    rng = np.random.default_rng([seed, 3])
    for step in range(cfg.cls_steps):
        idx = rng.integers(0, len(feats), cfg.batch_size)
        loss = bce_with_logits(clf.logits_tensor(feats[idx], params), labels[idx])
        grads = {r.name: r.grad for r in nc.backward(loss, params)}
        params, state = nc.adam_step(params, grads, state)
        if log_every and (step + 1) % log_every == 0:
            log.info("stage II step %d bce %.4f", step + 1, loss.item())
    clf.params = params
    return clf


def train_classifier(images, labels, p, q, cfg: TrainConfig, seed=None, log_every=0):
    """Stage II. Returns ``(classifier, p, q)``; the conditional models come
    back unchanged unless ``cfg.finetune == "full"``."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise DataError("image and label counts differ")
    if len(np.unique(labels)) < 2:
        raise DataError("classifier training needs both labels")
    keep = [i for i, im in enumerate(images) if min(im.shape[:2]) >= cfg.patch_size]
    if not keep:
        raise DataError(f"no image is at least {cfg.patch_size}x{cfg.patch_size}")
    images, labels = [images[i] for i in keep], labels[keep]
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 4])
    feats, ys = _feature_pool(images, labels, p, q, cfg, rng)
    if cfg.finetune == "frozen":
        return train_classifier_on_features(feats, ys, cfg, seed, log_every), p, q
    return _train_full(images, labels, feats, p, q, cfg, seed, rng, log_every)


def _train_full(images, labels, pool, p, q, cfg, seed, rng, log_every):
    ccfg = ClassifierConfig(pool.shape[1], cfg.patch_size, width=cfg.cls_width)
    clf = Classifier.initialize(ccfg, seed)
    clf.fit_normalizer(pool)
    slots = [("p", p), ("q", q)]
    slots = [(r, m) for r, m in slots if m is not None and (cfg.single_model == "dual" or cfg.single_model == r)]
    params = {f"cls/{k}": v for k, v in clf.params.items()}
    for role, m in slots:
        params.update({f"{role}/{k}": v for k, v in m.params.items()})
    state = nc.OptimizerState(lr=cfg.cls_lr)
    # the conditional nets keep their Stage I learning rate
    ratio = cfg.lr / cfg.cls_lr
    for step in range(cfg.cls_steps):
        idx = rng.integers(0, len(images), cfg.batch_size)
        crops = np.stack([crop(images[i], random_crop_corners(*images[i].shape[:2], cfg.patch_size, 1, rng)[0],
                               cfg.patch_size) for i in idx])
        models = [cm.CondModel(m.config, {k[len(role) + 1:]: v for k, v in params.items() if k.startswith(role + "/")},
                               m.meta) for role, m in slots]
        feats = features_tensor(crops, models, cfg, rng)
        cls_params = {k[4:]: v for k, v in params.items() if k.startswith("cls/")}
        loss = bce_with_logits(clf.logits_tensor(feats, cls_params), labels[idx])
        grads = {r.name: r.grad for r in nc.backward(loss, params)}
        for k in grads:
            if not k.startswith("cls/"):
                grads[k] = grads[k] * np.float32(ratio)
        params, state = nc.adam_step(params, grads, state)
        if log_every and (step + 1) % log_every == 0:
            log.info("stage II (full) step %d bce %.4f", step + 1, loss.item())
    clf.params = {k[4:]: v for k, v in params.items() if k.startswith("cls/")}
    out = {}
    for role, m in slots:
        out[role] = cm.CondModel(m.config, {k[len(role) + 1:]: v for k, v in params.items() if k.startswith(role + "/")},
                                 {**m.meta, "finetuned": True})
    return clf, out.get("p", p), out.get("q", q)


# ----------------------------------------------------------------------------
# inference


@dataclass
class DetectorBundle:
    p: cm.CondModel | None
    q: cm.CondModel | None
    classifier: Classifier
    threshold: float = 0.5
    config: TrainConfig = TrainConfig()

    def __post_init__(self):
        models = [m for m in (self.p, self.q) if m is not None]
        if not models:
            raise CompatibilityError("a bundle needs at least one conditional model")
        keys = ("t", "bank", "pattern")
        ref = {k: models[0].meta.get(k) for k in keys}
        for m in models[1:]:
            for k in keys:
                if m.meta.get(k) != ref[k]:
                    raise CompatibilityError(f"conditional models disagree on {k}: {ref[k]} vs {m.meta.get(k)}")


@dataclass(frozen=True)
class Detection:
    score: float
    label: int
    patch_scores: np.ndarray


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _image_crops(image, cfg, n, rng):
    image = np.asarray(image, dtype=np.float64)
    check_patch_fits(image, cfg.patch_size)
    corners = random_crop_corners(image.shape[0], image.shape[1], cfg.patch_size, n, rng)
    return np.stack([crop(image, c, cfg.patch_size) for c in corners])


def image_residuals(images, cfg: TrainConfig, patches: int, seed: int = 0, offset: int = 0):
    """Residual stacks of ``patches`` seeded crops per image.

    Image ``offset + i`` draws its crops (and, under the random-mask
    ablation, its channel choice) from its own stream, so results do not
    depend on how a directory is split across workers.
    """
    xs, ys = [], []
    for i, img in enumerate(images):
        rng = np.random.default_rng([seed, offset + i])
        x, y = residual_batch(_image_crops(img, cfg, patches, rng), cfg, rng)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def patch_scores(images, bundle: DetectorBundle, patches=None, seed=0, offset=0, chunk=16) -> np.ndarray:
    """Per-patch sigmoid scores, n_images x P."""
    cfg = bundle.config
    P = patches or cfg.patches
    if len(images) == 0:
        return np.zeros((0, P))
    models = _active_models(bundle.p, bundle.q, cfg)
    for role, m in zip(("p", "q"), (bundle.p, bundle.q)):
        check_compatible(m, cfg, role)
    x, y = image_residuals(images, cfg, P, seed, offset)
    logits = []
    for i in range(0, len(x), chunk):
        feats = features_from_residuals(x[i:i + chunk], y[i:i + chunk], models, cfg)
        logits.append(bundle.classifier.logits(feats, chunk))
    return sigmoid(np.concatenate(logits)).reshape(len(images), P)


def aggregate(scores, threshold: float = 0.5) -> tuple[float, int]:
    s = float(np.mean(scores))
    return s, int(s > threshold)


def detect(image, bundle: DetectorBundle, patches=None, seed=0) -> Detection:
    ps = patch_scores([image], bundle, patches, seed)[0]
    s, lab = aggregate(ps, bundle.threshold)
    return Detection(s, lab, ps)


def detect_many(images, bundle: DetectorBundle, patches=None, seed=0) -> list[Detection]:
    ps = patch_scores(images, bundle, patches, seed)
    return [Detection(*aggregate(row, bundle.threshold), row) for row in ps]


def anomaly_scores(images, p: cm.CondModel, cfg: TrainConfig, patches=None, seed=0, offset=0) -> np.ndarray:
    """One-class score D per image: mean of NLL - H over pixels, channels and crops."""
    check_compatible(p, cfg, "p")
    P = patches or cfg.patches
    out = []
    for i, img in enumerate(images):
        x, y = image_residuals([img], cfg, P, seed, offset + i)
        with nc.no_grad():
            raw = [r.data for r in p.raw(x)]
        n = y.shape[0]
        d = cm.site_nll_minus_entropy(raw, y.reshape(n, y.shape[1], -1), cfg.t)
        out.append(float(d.mean(dtype=np.float64)))
    return np.asarray(out)


def anomaly_score(image, p: cm.CondModel, cfg: TrainConfig, patches=None, seed=0) -> float:
    return float(anomaly_scores([image], p, cfg, patches, seed)[0])


def calibrate_threshold(scores, percentile: float = 95.0) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest score."""
    scores = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if scores.size == 0:
        raise DataError("cannot calibrate on an empty score list")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile / 100.0 * scores.size))
    return float(scores[rank - 1])


@dataclass
class OneClassScorer:
    p: cm.CondModel
    threshold: float = float("nan")
    percentile: float = 95.0

    def calibrate(self, scores):
        self.threshold = calibrate_threshold(scores, self.percentile)
        return self.threshold

    def flag(self, scores) -> np.ndarray:
        if not math.isfinite(self.threshold):
            raise DataError("scorer is not calibrated")
        return (np.asarray(scores) > self.threshold).astype(int)


# ----------------------------------------------------------------------------
# end to end


def train_detector(photo, generated, cfg: TrainConfig, p=None, log_every=0) -> DetectorBundle:
    """Algorithm-level driver: Stage I on both classes, then Stage II.

    A pre-trained photographic model ``p`` can be passed in to share it
    between detectors that differ only in the generated class.
    """
    if p is None and cfg.single_model != "q":
        p = train_conditional(photo, "photographic", cfg, seed=cfg.seed, log_every=log_every)
    q = None
    if cfg.single_model != "p":
        q = train_conditional(generated, "generated", cfg, seed=cfg.seed + 1, log_every=log_every)
    images = list(photo) + list(generated)
    labels = np.r_[np.zeros(len(photo), int), np.ones(len(generated), int)]
    clf, p2, q2 = train_classifier(images, labels, p, q, cfg, log_every=log_every)
    if cfg.single_model == "p":
        q2 = None
    if cfg.single_model == "q":
        p2 = None
    return DetectorBundle(p2, q2, clf, cfg.threshold, cfg)


def accuracy(bundle: DetectorBundle, photo, generated, seed=0, transform=None) -> float:
    images = list(photo) + list(generated)
    if transform is not None:
        images = [transform(im) for im in images]
    labels = np.r_[np.zeros(len(photo), int), np.ones(len(generated), int)]
    dets = detect_many(images, bundle, seed=seed)
    return float(np.mean([d.label for d in dets] == labels))
