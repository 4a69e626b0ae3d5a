"""Training losses for the density and color stages.

Depth supervision is an L1 term weighted per ray by local surface
variation: flat neighborhoods (neighboring normals agree) get weight
1 - lambda, depth discontinuities approach 1.  A free-space term pushes
compositing weights to zero in front of each measured return, and a
binary cross-entropy on accumulated opacity separates returning rays
from no-return rays.  Color uses a plain mean squared error.  All
reductions accumulate in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sensors import RangeNormals

OPACITY_CLAMP = 1e-6


@dataclass(frozen=True)
class DensityLossWeights:
    """Mixing coefficients for the density-stage objective."""

    edge_lambda: float = 0.8   # depth-weight emphasis on discontinuities
    empty_alpha: float = 0.2   # free-space term scale
    opacity_beta: float = 0.1  # opacity BCE scale


def photometric_loss(rendered: Tensor, observed: np.ndarray) -> Tensor:
    """Mean over rays of the squared color error, summed across channels."""
    observed = np.asarray(observed)
    n = observed.shape[0]
    if n == 0:
        raise ValueError("photometric loss needs at least one ray")
    return ad.tensor_sum(ad.square(rendered - observed), dtype=np.float64) / float(n)


def depth_weights(normals: RangeNormals, edge_lambda: float) -> np.ndarray:
    """Per-pixel depth-loss weights from the 8-neighborhood of normals.

    weight = (lambda/2) * (1 - mean_dot) + (1 - lambda), where mean_dot
    averages <n_i, n_j> over valid neighbors (columns wrap, rows do not).
    Pixels with an invalid normal or no valid neighbor fall back to the
    flat-surface weight 1 - lambda.
    """
    if not (0.0 <= edge_lambda <= 1.0):
        raise ValueError("edge_lambda must lie in [0, 1]")
    n = normals.normals
    v = normals.valid
    acc = np.zeros(v.shape)
    cnt = np.zeros(v.shape)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            sn = np.roll(n, -dc, axis=1)
            sv = np.roll(v, -dc, axis=1)
            if dr != 0:
                sn = np.roll(sn, -dr, axis=0)
                sv = np.roll(sv, -dr, axis=0).copy()
                # Rows do not wrap: kill entries that crossed the edge.
                if dr == 1:
                    sv[-1, :] = False
                else:
                    sv[0, :] = False
            ok = v & sv
            acc += np.where(ok, np.sum(n * sn, axis=-1), 0.0)
            cnt += ok
    mean_dot = np.where(cnt > 0, acc / np.maximum(cnt, 1), 1.0)
    eta = edge_lambda / 2.0 * (1.0 - mean_dot) + (1.0 - edge_lambda)
    eta[~v] = 1.0 - edge_lambda
    return eta


def depth_loss(rendered_depth: Tensor, observed: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted L1 depth error over rays with a measured return.

    Rays with observed depth 0 (no return) are excluded; the sum is
    normalized by the total weight of the included rays.
    """
    observed = np.asarray(observed, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    mask = observed > 0
    if not mask.any():
        raise ValueError("depth loss needs at least one ray with a return")
    w = np.where(mask, weights, 0.0)
    total = w.sum()
    if total <= 0:
        raise ValueError("depth weights sum to zero over returning rays")
    err = ad.absolute(rendered_depth - observed)
    return ad.tensor_sum(err * w, dtype=np.float64) / total


def empty_loss(weights: Tensor, depths: np.ndarray, observed: np.ndarray,
               epsilon: float) -> Tensor:
    """Mean squared compositing weight in known-empty space.

    For returning rays, samples closer than the measured depth minus
    epsilon count; for no-return rays every sample counts.
    """
    observed = np.asarray(observed, dtype=np.float64)
    n = observed.shape[0]
    if n == 0:
        raise ValueError("empty loss needs at least one ray")
    returned = observed > 0
    cutoff = np.where(returned, observed - epsilon, np.inf)
    mask = (depths < cutoff[:, None]).astype(weights.dtype)
    return ad.tensor_sum(ad.square(weights) * mask, dtype=np.float64) / float(n)


def opacity_loss(opacity: Tensor, observed: np.ndarray) -> Tensor:
    """Binary cross-entropy of accumulated opacity against ray returns.

    Targets are 1 for rays with a return and 0 otherwise; predictions are
    clamped away from {0, 1} so the logs stay finite.
    """
    observed = np.asarray(observed, dtype=np.float64)
    n = observed.shape[0]
    if n == 0:
        raise ValueError("opacity loss needs at least one ray")
    target = (observed > 0).astype(np.float64)
    p = ad.astype(ad.clip(opacity, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP), np.float64)
    ce = target * ad.log(p) + (1.0 - target) * ad.log(1.0 - p)
    return -ad.tensor_sum(ce, dtype=np.float64) / float(n)


def density_loss(depth_term: Tensor, empty_term: Tensor, opacity_term: Tensor,
                 weights: DensityLossWeights) -> Tensor:
    """Depth + alpha * empty + beta * opacity."""
    return depth_term + weights.empty_alpha * empty_term + weights.opacity_beta * opacity_term
