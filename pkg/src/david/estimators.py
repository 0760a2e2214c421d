"""scikit-learn style wrappers around the three training phases.

``X`` is a batch of frame stacks ``(n, T, 3, H, W)`` and ``y`` the sharp
centre frames ``(n, 3, H, W)``, both in [0, 1].  ``score`` is mean PSNR.
"""

from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .architecture import BACKBONE_MULTIPLE, BackboneBranch, DavidModel, InternalAttentionModule
from .config import PhaseConfig
from .dataset import StackDataset
from .engine import no_grad
from .evaluate import psnr, to_8bit
from .trainer import phase1_pretrain, phase2_train_internal, phase3_train_david


def check_frame_stack(X, min_frames=1, multiple=BACKBONE_MULTIPLE):
    """Validate a ``(n, T, 3, H, W)`` batch of frame stacks; returns float32."""
    X = np.asarray(X)
    if X.ndim != 5:
        raise ValueError(f"expected frame stacks shaped (n, T, 3, H, W), got an array of shape {X.shape}")
    n, t, c, h, w = X.shape
    if n == 0:
        raise ValueError("no samples")
    if c != 3:
        raise ValueError(f"expected 3 colour channels, got {c}")
    if t < min_frames or t % 2 == 0:
        raise ValueError(f"stacks need an odd number of frames >= {min_frames}, got {t}")
    if h % multiple or w % multiple:
        raise ValueError(f"frame size {h}x{w} must be a multiple of {multiple}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError("frame values must be finite and within [0, 1]")
    return X


def check_targets(y, X):
    y = np.asarray(y, dtype=np.float32)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"targets must be shaped {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if not np.all(np.isfinite(y)) or y.min() < 0 or y.max() > 1:
        raise ValueError("target values must be finite and within [0, 1]")
    return y


class _Deblurrer(BaseEstimator):
    _phase = 1

    def _width(self):
        raise NotImplementedError

    def _config(self, **extra):
        kw = dict(phase=self._phase, initial_lr=self.lr, total_epochs=self.epochs, batch_size=self.batch_size,
                  crop=self.crop, patience=self.patience, steps_per_epoch=self.steps_per_epoch, seed=self.seed,
                  flips=self.flips, dtype=self.dtype, channel_scale=str(self.channel_scale))
        kw.update(extra)
        return PhaseConfig(**kw)

    def _datasets(self, X, y):
        X = check_frame_stack(X, self._width())
        y = check_targets(y, X)
        ds = StackDataset.from_arrays(X, y)
        n_val = int(round(self.val_fraction * len(ds)))
        if n_val == 0:
            return ds, None
        order = np.random.default_rng(self.seed).permutation(len(ds))
        return ds.subset(sorted(order[n_val:])), ds.subset(sorted(order[:n_val]))

    def _record(self, result):
        self.model_ = result.model
        self.history_ = result.history
        self.losses_ = result.losses
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X, batch_size=8):
        check_is_fitted(self, "model_")
        X = check_frame_stack(X, self._width())
        out = []
        with no_grad():
            for lo in range(0, len(X), batch_size):
                out.append(self.model_.predict_stack(X[lo:lo + batch_size].astype(self.dtype)).data)
        return np.clip(np.concatenate(out), 0, 1)

    def score(self, X, y):
        """Mean PSNR (dB) over samples, predictions quantized to 8 bit."""
        pred = self.predict(X)
        y = check_targets(y, np.asarray(X))
        return float(np.mean([psnr(to_8bit(p), t) for p, t in zip(pred, y)]))


class BackboneDeblurrer(_Deblurrer):
    """A single U-Net branch over ``frames`` stacked frames."""

    def __init__(self, frames=3, channel_scale="1/8", lr=1e-3, epochs=10, batch_size=4, crop=128,
                 patience=0, steps_per_epoch=0, val_fraction=0.0, flips=True, seed=0, dtype="float32"):
        self.frames = frames
        self.channel_scale = channel_scale
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.patience = patience
        self.steps_per_epoch = steps_per_epoch
        self.val_fraction = val_fraction
        self.flips = flips
        self.seed = seed
        self.dtype = dtype

    def _width(self):
        return self.frames

    def fit(self, X, y):
        train, val = self._datasets(X, y)
        branch = BackboneBranch(self.frames, Fraction(str(self.channel_scale)), self.seed, np.dtype(self.dtype))
        return self._record(phase1_pretrain(branch, train, val, self._config(frames=self.frames)))


class InternalAttentionDeblurrer(_Deblurrer):
    """N branches plus attention; ``backbones`` may hold fitted BackboneDeblurrers to start from."""

    _phase = 2

    def __init__(self, n_branches=4, channel_scale="1/8", backbones=None, lr=1e-3, fine_tune_lr=2e-4,
                 freeze_epochs=5, epochs=10, batch_size=4, crop=128, patience=0, steps_per_epoch=0,
                 val_fraction=0.0, flips=True, blur_level=7, seed=0, dtype="float32"):
        self.n_branches = n_branches
        self.channel_scale = channel_scale
        self.backbones = backbones
        self.lr = lr
        self.fine_tune_lr = fine_tune_lr
        self.freeze_epochs = freeze_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.patience = patience
        self.steps_per_epoch = steps_per_epoch
        self.val_fraction = val_fraction
        self.flips = flips
        self.blur_level = blur_level
        self.seed = seed
        self.dtype = dtype

    def _width(self):
        return 2 * self.n_branches - 1

    def fit(self, X, y):
        train, val = self._datasets(X, y)
        branches = None
        if self.backbones is not None:
            branches = [b.model_ for b in self.backbones]
        module = InternalAttentionModule(self.n_branches, Fraction(str(self.channel_scale)), self.blur_level,
                                         self.seed, np.dtype(self.dtype), branches=branches)
        cfg = self._config(fine_tune_lr=self.fine_tune_lr, freeze_epochs=self.freeze_epochs,
                           blur_level=self.blur_level, n_branches=self.n_branches)
        return self._record(phase2_train_internal(module, None, train, val, cfg))


class DavidDeblurrer(_Deblurrer):
    """Internal modules fused by external attention; ``internals`` may hold fitted modules."""

    _phase = 3

    def __init__(self, blur_levels=(3, 7, 11), n_branches=4, channel_scale="1/8", internals=None, lr=1e-3,
                 fine_tune_lr=2e-4, freeze_epochs=5, epochs=10, batch_size=4, crop=128, patience=0,
                 steps_per_epoch=0, val_fraction=0.0, flips=True, seed=0, dtype="float32"):
        self.blur_levels = blur_levels
        self.n_branches = n_branches
        self.channel_scale = channel_scale
        self.internals = internals
        self.lr = lr
        self.fine_tune_lr = fine_tune_lr
        self.freeze_epochs = freeze_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.patience = patience
        self.steps_per_epoch = steps_per_epoch
        self.val_fraction = val_fraction
        self.flips = flips
        self.seed = seed
        self.dtype = dtype

    def _width(self):
        return 2 * self.n_branches - 1

    def fit(self, X, y):
        train, val = self._datasets(X, y)
        modules = None
        if self.internals is not None:
            modules = [m.model_ for m in self.internals]
        model = DavidModel(tuple(self.blur_levels), self.n_branches, Fraction(str(self.channel_scale)), self.seed,
                           np.dtype(self.dtype), internal_modules=modules)
        cfg = self._config(fine_tune_lr=self.fine_tune_lr, freeze_epochs=self.freeze_epochs,
                           blur_levels=tuple(self.blur_levels), n_branches=self.n_branches)
        return self._record(phase3_train_david(model, None, train, val, cfg))
