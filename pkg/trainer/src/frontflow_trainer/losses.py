"""Quadrature-weighted training loss and relative-L2 evaluation metrics.

The space-time squared error is approximated as (T / N_t) * sum_l sum_i
w_i (err at node i, stamp l)^2, with the w_i the lumped mesh quadrature
weights. Pressure enters the loss standardised; the filling factor is raw.
"""

import numpy as np


def quadrature_loss(p_pred, f_pred, p_target, f_target, weights, horizon, n_t, kappa=0.05):
    """Batch loss: pressure term + kappa * filling term, both quadrature weighted.

    All tensors are (B, N_t * S) with node index fastest; weights is (S,).
    """
    B = p_pred.shape[0]
    w = weights.repeat(n_t)
    scale = horizon / n_t
    p_term = scale * ((p_pred - p_target) ** 2 * w).sum(dim=1)
    f_term = scale * ((f_pred - f_target) ** 2 * w).sum(dim=1)
    # accumulate the per-sample terms in double so the batch mean does not
    # depend on sample order
    return ((p_term + kappa * f_term).double() / B).sum().to(p_pred.dtype)


def relative_l2(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """||target - pred|| / ||target|| under the full discretised norm over all
    stored stamps (no stochastic subsampling)."""
    num = (weights[None, :] * (target - pred) ** 2).sum()
    den = (weights[None, :] * target ** 2).sum()
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return float(np.sqrt(num / den))


def masked_pressure(p_phys: np.ndarray, f_out: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(f_out > threshold, p_phys, 0.0)
