"""Cross-entropy, the uncertainty-weighted cross-entropy and gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError

CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 3.0
    grad_clip: float = 1.0
    weighting_enabled_from_cycle: int = 2
    # "batch": sigma recomputed for every mini-batch; "epoch": once per epoch
    sigma_refresh: str = "batch"
    # apply the clip to unweighted (plain CE) runs as well
    clip_unweighted: bool = False

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.sigma_refresh not in ("batch", "epoch"):
            raise ValueError(f"unknown sigma_refresh {self.sigma_refresh!r}")


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0 or 1)")
    return labels


def ce_map(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Unreduced cross-entropy -log p_label per pixel, with p clamped to [1e-7, 1]."""
    probs = np.asarray(probs)
    labels = _check_labels(labels)
    if probs.ndim != 4 or probs.shape[1] != 2 or probs.shape[:1] + probs.shape[2:] != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    p = np.take_along_axis(probs, labels.astype(np.intp)[:, None], axis=1)[:, 0]
    return -np.log(np.clip(p, CLAMP, 1.0))


def sigma_weights(sigma: np.ndarray, labels: np.ndarray, kappa: float) -> np.ndarray:
    """Per-pixel weight (1 + sigma at the ground-truth channel) ** kappa."""
    sigma = np.asarray(getattr(sigma, "sigma", sigma))
    s = np.take_along_axis(sigma, np.asarray(labels).astype(np.intp)[:, None], axis=1)[:, 0]
    return (1.0 + s) ** kappa


def mean_ce(probs, labels):
    """Plain cross-entropy averaged over each image, then over the batch."""
    _check_labels(labels)
    return T.nll_mean(probs, labels, clamp=CLAMP)


def weighted_ce(probs, labels, sigma, kappa: float):
    """Uncertainty-weighted cross-entropy, averaged over each image then the batch.

    ``sigma`` is [N, 2, H, W] (or an UncertaintyMap) and is treated as a
    constant: no gradient flows through it.
    """
    labels = _check_labels(labels)
    sig = np.asarray(getattr(sigma, "sigma", sigma))
    pshape = T._value(probs).shape
    if sig.shape != pshape or labels.shape != pshape[:1] + pshape[2:]:
        raise ShapeError(f"sigma {sig.shape} / labels {labels.shape} do not match "
                         f"probabilities {pshape}")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    return T.nll_mean(probs, labels, sigma_weights(sig, labels, kappa), clamp=CLAMP)


def clip_gradients(grads: dict, limit: float) -> dict:
    """Clamp every gradient element to [-limit, limit]."""
    if limit <= 0:
        raise ValueError("clip limit must be positive")
    return {k: np.clip(g, -limit, limit) for k, g in grads.items()}


def training_sigma(ensemble, images: np.ndarray) -> np.ndarray:
    """Predictive sigma for a batch from the snapshots collected so far.

    An empty ensemble gives zero maps, i.e. unit weights everywhere.
    """
    from .predictive import predictive_stats

    images = np.asarray(images)
    if len(ensemble) == 0:
        n, _, h, w = images.shape
        return np.zeros((n, 2, h, w), dtype=np.float32)
    _, sigma = predictive_stats(ensemble, images)
    return sigma.astype(np.float32)


class UncertaintyWeightedLoss:
    """Training objective that switches on sigma weighting from a given cycle.

    Sigma comes from the snapshots of completed cycles.  With
    ``sigma_refresh="epoch"`` the maps for the whole training set are computed
    once at the start of each epoch (``train_images`` required).
    """

    def __init__(self, config: LossConfig, train_images: np.ndarray | None = None):
        self.config = config
        self.train_images = train_images
        self.sigma_max = 0.0
        self.sigma_min = float("inf")  # stays inf until weighting switches on
        self._cache_epoch = None
        self._cache = None

    def active(self, cycle: int) -> bool:
        return cycle >= self.config.weighting_enabled_from_cycle

    def sigma_for(self, ctx) -> np.ndarray:
        past = ctx.ensemble.upto_cycle(ctx.cycle)
        if self.config.sigma_refresh == "batch" or self.train_images is None:
            return training_sigma(past, ctx.images)
        if self._cache_epoch != ctx.epoch:
            self._cache = np.concatenate([
                training_sigma(past, self.train_images[i:i + 64])
                for i in range(0, len(self.train_images), 64)])
            self._cache_epoch = ctx.epoch
        return self._cache[ctx.indices]

    def __call__(self, probs, ctx):
        if not self.active(ctx.cycle):
            return mean_ce(probs, ctx.labels)
        sigma = self.sigma_for(ctx)
        if sigma.size:
            self.sigma_max = max(self.sigma_max, float(sigma.max()))
            self.sigma_min = min(self.sigma_min, float(sigma.min()))
        return weighted_ce(probs, ctx.labels, sigma, self.config.kappa)
