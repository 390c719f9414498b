"""scikit-learn style wrappers.

``MetaDIP.fit(X)`` meta-learns an initialization from clean images and
``transform(X)`` denoises noisy ones; ``reconstruct`` handles any forward
model. ``DeepImagePrior`` and ``PnPADMM`` expose the baselines the same way,
so all methods slot into sklearn tooling (``clone``, ``get_params``,
pipelines of transformers).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imaging import ImageDataset
from .meta import MetaConfig, load_checkpoint, meta_train
from .methods import random_init_dip
from .networks import DipNetConfig
from .operators import make_operator
from .pnp import ADMMConfig, get_denoiser, pnp_admm_solve
from ._validation import check_images


class MetaDIP(TransformerMixin, BaseEstimator):
    def __init__(
        self,
        outer_steps=2000,
        inner_steps=20,
        test_steps=50,
        sigma=25.0,
        outer_lr=1e-4,
        lr_outer_lr=1e-2,
        init_lr=5e-4,
        momentum=0.9,
        first_order=False,
        channels=(32, 64, 64),
        seed=0,
    ):
        self.outer_steps = outer_steps
        self.inner_steps = inner_steps
        self.test_steps = test_steps
        self.sigma = sigma
        self.outer_lr = outer_lr
        self.lr_outer_lr = lr_outer_lr
        self.init_lr = init_lr
        self.momentum = momentum
        self.first_order = first_order
        self.channels = channels
        self.seed = seed

    def fit(self, X, y=None):
        """Meta-train on clean images ``X`` of shape (N, H, W, C)."""
        X = check_images(X)
        names = [f"train-{i:06d}" for i in range(len(X))]
        dataset = ImageDataset(list(X), names, meta={"source": "array"})
        config = MetaConfig(
            outer_steps=self.outer_steps,
            inner_steps=self.inner_steps,
            test_steps=self.test_steps,
            sigma_8bit=self.sigma,
            outer_lr=self.outer_lr,
            lr_outer_lr=self.lr_outer_lr,
            init_lr=self.init_lr,
            momentum=self.momentum,
            first_order=self.first_order,
            seed=self.seed,
        )
        self.history_ = []
        net_config = DipNetConfig(channels=tuple(self.channels), skip_channels=(4,) * len(self.channels), out_channels=X.shape[3])
        self.init_ = meta_train(dataset, config, net_config, history=self.history_)
        self.image_shape_ = X.shape[1:]
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "MetaDIP":
        init = load_checkpoint(path)
        est = cls(test_steps=init.inner.get("test_steps", 50), seed=init.provenance.get("seed", 0))
        est.init_ = init
        est.image_shape_ = init.image_shape
        est.history_ = []
        return est

    def reconstruct(self, op, y, ground_truth=None, steps=None):
        """Fit from the learned initialization to a measurement; returns a FitResult."""
        check_is_fitted(self, "init_")
        return self.init_.solve(op, y, steps=steps or self.test_steps, ground_truth=ground_truth)

    def transform(self, X):
        """Denoise a batch of noisy images."""
        check_is_fitted(self, "init_")
        X = check_images(X, allow_out_of_range=True)
        self.init_.check_compatible(X.shape[1:])
        out = []
        for img in X:
            op = make_operator("denoise", img.size, sigma_8bit=self.sigma)
            out.append(self.reconstruct(op, img.reshape(-1)).reconstruction)
        return np.stack(out)


class DeepImagePrior(TransformerMixin, BaseEstimator):
    """Vanilla DIP from random initialization (stateless; ``fit`` only validates)."""

    def __init__(self, steps=1000, lr=3e-4, jitter_std=1 / 30, ema_decay=0.99, sigma=25.0, seed=0, channels=(32, 64, 64)):
        self.steps = steps
        self.lr = lr
        self.jitter_std = jitter_std
        self.ema_decay = ema_decay
        self.sigma = sigma
        self.seed = seed
        self.channels = channels

    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X, allow_out_of_range=True)
        self.fitted_ = True
        return self

    def _net_config(self, n_channels):
        return DipNetConfig(channels=tuple(self.channels), skip_channels=(4,) * len(self.channels), out_channels=n_channels)

    def reconstruct(self, op, y, shape, ground_truth=None):
        return random_init_dip(
            self._net_config(shape[2]), shape, op, y, self.steps, self.seed, ground_truth,
            lr=self.lr, jitter_std=self.jitter_std, ema_decay=self.ema_decay,
        )

    def transform(self, X):
        X = check_images(X, allow_out_of_range=True)
        out = []
        for img in X:
            op = make_operator("denoise", img.size, sigma_8bit=self.sigma)
            out.append(self.reconstruct(op, img.reshape(-1), img.shape).reconstruction)
        return np.stack(out)


class PnPADMM(BaseEstimator):
    def __init__(self, denoiser="tv", strength=15.0, rho=1.0, iterations=50):
        self.denoiser = denoiser
        self.strength = strength
        self.rho = rho
        self.iterations = iterations

    def fit(self, X=None, y=None):
        self.denoiser_ = get_denoiser(self.denoiser)
        self.config_ = ADMMConfig(rho=self.rho, strength=self.strength, iterations=self.iterations)
        return self

    def reconstruct(self, op, y, shape):
        if not hasattr(self, "config_"):
            self.fit()
        result = pnp_admm_solve(op, y, self.denoiser_, self.config_, shape)
        self.residuals_ = result.residuals
        return result.image
