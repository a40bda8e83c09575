"""scikit-learn style wrappers around the pipeline.

Hyperparameters live in ``__init__`` (so ``get_params``/``set_params`` and
``clone`` work); fitted state ends in an underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import condmodel as cm
from . import pipeline as pl
from .validation import check_images, check_labels


class _DCCTBase(BaseEstimator):
    """Shared hyperparameters; defaults are the desk preset."""

    def _config(self) -> pl.TrainConfig:
        kw = {k: v for k, v in self.get_params().items() if k in pl.TrainConfig.__dataclass_fields__}
        return pl.TrainConfig.desk(**kw)


class ConditionalColorModel(TransformerMixin, _DCCTBase):
    """One conditional model p(y'|x') fitted to a single image class.

    ``transform`` maps each image to ``[mean NLL, mean entropy, D]`` averaged
    over ``patches`` seeded crops.
    """

    def __init__(self, class_tag="photographic", patch_size=32, bank="reduced", t=7, k=3, width=8, depth=2,
                 steps=100, batch_size=16, lr=2e-3, jpeg_prob=0.05, mask_mode="bayer", highpass="on",
                 patches=16, seed=0):
        self.class_tag = class_tag
        self.patch_size = patch_size
        self.bank = bank
        self.t = t
        self.k = k
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.jpeg_prob = jpeg_prob
        self.mask_mode = mask_mode
        self.highpass = highpass
        self.patches = patches
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self._config()
        images = check_images(X)
        self.model_ = pl.train_conditional(images, self.class_tag, cfg, seed=self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        cfg = self._config()
        rows = []
        for i, img in enumerate(check_images(X, cfg.patch_size)):
            x, y = pl.image_residuals([img], cfg, cfg.patches, self.seed, i)
            fld = self.model_.forward(x)
            nll = cm.nll_map(fld, y, cfg.t).mean()
            ent = cm.entropy_map(fld, cfg.t).mean()
            rows.append((nll, ent, nll - ent))
        return np.asarray(rows)

    def score_samples(self, X):
        """Anomaly score D per image (higher means less like the training class)."""
        check_is_fitted(self, "model_")
        return pl.anomaly_scores(check_images(X, self.patch_size), self.model_, self._config(), seed=self.seed)


class DCCTClassifier(ClassifierMixin, _DCCTBase):
    """Binary detector: label 0 = photographic, 1 = generated."""

    def __init__(self, patch_size=32, bank="reduced", t=7, k=3, width=8, depth=2, steps=100, batch_size=16,
                 lr=2e-3, jpeg_prob=0.05, cls_steps=150, cls_lr=2e-3, cls_width=16, pool_crops=1,
                 patches=16, threshold=0.5, single_model="dual", mask_mode="bayer", highpass="on",
                 finetune="frozen", seed=0):
        self.patch_size = patch_size
        self.bank = bank
        self.t = t
        self.k = k
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.jpeg_prob = jpeg_prob
        self.cls_steps = cls_steps
        self.cls_lr = cls_lr
        self.cls_width = cls_width
        self.pool_crops = pool_crops
        self.patches = patches
        self.threshold = threshold
        self.single_model = single_model
        self.mask_mode = mask_mode
        self.highpass = highpass
        self.finetune = finetune
        self.seed = seed

    def fit(self, X, y):
        cfg = self._config()
        images = check_images(X)
        labels = check_labels(y, len(images))
        photo = [im for im, lab in zip(images, labels) if lab == 0]
        gen = [im for im, lab in zip(images, labels) if lab == 1]
        self.bundle_ = pl.train_detector(photo, gen, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        """Patch-averaged generated-class score in [0, 1]."""
        check_is_fitted(self, "bundle_")
        images = check_images(X, self.patch_size)
        return pl.patch_scores(images, self.bundle_, self.patches, self.seed).mean(axis=1)

    def predict_proba(self, X):
        s = self.decision_function(X)
        return np.stack([1.0 - s, s], axis=1)

    def predict(self, X):
        return (self.decision_function(X) > self.threshold).astype(int)


class OneClassDCCT(OutlierMixin, _DCCTBase):
    """Photographic-only detector thresholding the anomaly score D.

    ``predict`` follows the scikit-learn outlier convention: +1 for images
    that look photographic, -1 for flagged ones.
    """

    def __init__(self, patch_size=32, bank="reduced", t=7, k=3, width=8, depth=2, steps=100, batch_size=16,
                 lr=2e-3, jpeg_prob=0.05, patches=16, percentile=95.0, seed=0):
        self.patch_size = patch_size
        self.bank = bank
        self.t = t
        self.k = k
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.jpeg_prob = jpeg_prob
        self.patches = patches
        self.percentile = percentile
        self.seed = seed

    def fit(self, X, y=None):
        cfg = self._config()
        images = check_images(X)
        self.model_ = pl.train_conditional(images, "photographic", cfg, seed=self.seed)
        self.train_scores_ = pl.anomaly_scores(images, self.model_, cfg, seed=self.seed)
        self.threshold_ = pl.calibrate_threshold(self.train_scores_, self.percentile)
        return self

    def anomaly_score(self, X):
        check_is_fitted(self, "model_")
        return pl.anomaly_scores(check_images(X, self.patch_size), self.model_, self._config(), seed=self.seed)

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.threshold_ - self.anomaly_score(X)

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1, -1)
