"""Ensemble predictive mean, predictive standard deviation and masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .tensor import ShapeError


class EnsembleError(ValueError):
    pass


@dataclass
class UncertaintyMap:
    """Per-pixel, per-channel predictive standard deviation."""
    sigma: np.ndarray  # [2, H, W] or [N, 2, H, W]
    ensemble_id: str
    M: int

    @property
    def foreground(self) -> np.ndarray:
        return self.sigma[..., 1, :, :]


@dataclass
class PredictiveResult:
    mean: np.ndarray  # [2, H, W]
    sigma: UncertaintyMap
    mask: np.ndarray  # [H, W] uint8


def _as_batch(images) -> tuple[np.ndarray, bool]:
    images = np.asarray(images)
    if images.ndim == 3:
        return images[None], True
    return images, False


def _stack(ensemble, images: np.ndarray) -> np.ndarray:
    """Snapshot probabilities [M, N, 2, H, W] in float64, in ensemble order."""
    if len(ensemble) == 0:
        raise EnsembleError("empty ensemble")
    return np.stack([M.forward(p, images, ensemble.arch) for p in ensemble.params()]).astype(np.float64)


def predictive_mean(ensemble, images) -> np.ndarray:
    """Average of the snapshot probability maps."""
    batch, single = _as_batch(images)
    mu = _stack(ensemble, batch).mean(axis=0)
    return mu[0] if single else mu


def predictive_sigma(ensemble, images, mu) -> UncertaintyMap:
    """Population (1/M) standard deviation of snapshot probabilities around ``mu``."""
    batch, single = _as_batch(images)
    mu = np.asarray(mu, dtype=np.float64)
    mu_b = mu[None] if single and mu.ndim == 3 else mu
    stack = _stack(ensemble, batch)
    if mu_b.shape != stack.shape[1:]:
        raise ShapeError(f"mean {mu.shape} does not match predictions {stack.shape[1:]}")
    sigma = _sigma(stack, mu_b)
    return UncertaintyMap(sigma[0] if single else sigma, ensemble.id, len(ensemble))


def _sigma(stack: np.ndarray, mu: np.ndarray) -> np.ndarray:
    # probabilities lie in [0, 1], so the population std cannot exceed 0.5
    return np.clip(np.sqrt(((stack - mu) ** 2).mean(axis=0)), 0.0, 0.5)


def predictive_stats(ensemble, images) -> tuple[np.ndarray, np.ndarray]:
    """(mean, sigma) for a batch from a single pass over the snapshots."""
    batch, single = _as_batch(images)
    stack = _stack(ensemble, batch)
    mu = stack.mean(axis=0)
    sigma = _sigma(stack, mu)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def predict(ensemble, images, batch_size: int = 32) -> list[PredictiveResult]:
    """Mean, sigma and mask for every image of a batch."""
    batch, _ = _as_batch(images)
    results = []
    eid = ensemble.id
    for i in range(0, len(batch), batch_size):
        mu, sigma = predictive_stats(ensemble, batch[i:i + batch_size])
        masks = M.predict_mask(mu)
        for j in range(len(mu)):
            results.append(PredictiveResult(mu[j], UncertaintyMap(sigma[j], eid, len(ensemble)), masks[j]))
    return results


def sigma_raster(sigma_fg: np.ndarray) -> np.ndarray:
    """8-bit rendering of a foreground sigma map: 0.5 maps to 255."""
    return np.clip(np.rint(np.asarray(sigma_fg) * 2 * 255), 0, 255).astype(np.uint8)


def mask_raster(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0).astype(np.uint8) * 255
