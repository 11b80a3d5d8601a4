"""Differentiable exponential-attenuation compositing and the training loss.

A ray's predicted intensity is i0 * exp(-sum(rho_i * delta_i)); the
quadrature spacing comes straight from the equal-bin point sampler, so
the absorption sum is a midpoint (or stratified) rule for the
continuous line integral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class RenderedRays:
    """Batch render result; both fields stay on the gradient tape."""

    intensity: Tensor  # (...,) in (0, i0]
    absorption: Tensor  # (...,) line integrals, >= 0


def render(densities, deltas, i0: float = 1.0) -> RenderedRays:
    """Composite per-point densities (..., N) with spacings (..., N) or
    (N,) into per-ray intensities (...,)."""
    densities = as_tensor(densities)
    if np.any(densities.data < 0):
        raise ContractError("renderer received negative densities")
    deltas_arr = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    if np.any(deltas_arr <= 0):
        raise ContractError("renderer requires positive spacings")
    absorption = T.reduce_sum(T.mul(densities, deltas), axis=-1)
    intensity = T.mul(T.exp(T.neg(absorption)), float(i0))
    return RenderedRays(intensity=intensity, absorption=absorption)


def squared_error_loss(
    rendered: RenderedRays,
    i_gt: np.ndarray,
    reduction: str = "mean",
    domain: str = "intensity",
    i0: float = 1.0,
) -> Tensor:
    """Squared error between predicted and ground-truth intensities.

    ``reduction`` "mean" (default, learning-rate stable across batch
    sizes) or "sum" (the plain per-batch total). ``domain``
    "absorption" compares -log(I/i0) instead, an optional CT-style
    alternative that is off by default.
    """
    i_gt = np.asarray(i_gt)
    if i_gt.shape != tuple(rendered.intensity.shape):
        raise ContractError(
            f"{i_gt.shape} ground truths for {tuple(rendered.intensity.shape)} rays"
        )
    if domain == "intensity":
        residual = T.sub(rendered.intensity, i_gt.astype(rendered.intensity.dtype))
    elif domain == "absorption":
        gt_absorption = -np.log(np.maximum(i_gt / i0, 1e-8))
        residual = T.sub(
            rendered.absorption, gt_absorption.astype(rendered.absorption.dtype)
        )
    else:
        raise ContractError(f"unknown loss domain {domain!r}")
    squared = T.mul(residual, residual)
    if reduction == "mean":
        return T.reduce_mean(squared)
    if reduction == "sum":
        return T.reduce_sum(squared)
    raise ContractError(f"unknown reduction {reduction!r}")
