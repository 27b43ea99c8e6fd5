"""Surrogate-error statistics at a sensor/time configuration.

The full-model values come straight from the stored test records (pressure at
the node nearest each sensor, at the stored stamp nearest each requested
time); the surrogate values come from the trained model at the same queries.
The sample mean and unbiased covariance of the differences feed the inversion
likelihood augmentation.
"""

import numpy as np
import torch

from .corpus import Corpus
from .formats import write_does1
from .losses import masked_pressure
from .train import SamplePreparer


def record_measurements(sample, node_xy: np.ndarray, sensors: np.ndarray,
                        times: np.ndarray) -> np.ndarray:
    """Time-major sensor extraction from stored snapshots."""
    d2 = ((node_xy[None, :, :] - sensors[:, None, :]) ** 2).sum(-1)
    nodes = d2.argmin(axis=1)
    out = np.empty(times.size * sensors.shape[0])
    for n, t in enumerate(times):
        idx = int(np.abs(sample.times - t).argmin())
        out[n * sensors.shape[0]:(n + 1) * sensors.shape[0]] = sample.pressure[idx][nodes]
    return out


def surrogate_measurements(model, prep: SamplePreparer, sample, sensors: np.ndarray,
                           times: np.ndarray) -> np.ndarray:
    Dx, Dy, T = prep.cfg.coord_scale
    M = sensors.shape[0]
    q = np.empty((times.size * M, 3))
    for n, t in enumerate(times):
        q[n * M:(n + 1) * M, 0] = sensors[:, 0] / Dx
        q[n * M:(n + 1) * M, 1] = sensors[:, 1] / Dy
        q[n * M:(n + 1) * M, 2] = t / T
    model.eval()
    with torch.no_grad():
        p_hat, f_hat = model(prep.fields_tensor(sample)[None],
                             prep.scalars_tensor(sample)[None],
                             torch.tensor(q, dtype=torch.float32)[None])
    p_phys = p_hat[0].numpy() * prep.norm.pressure_sd + prep.norm.pressure_mean
    return masked_pressure(p_phys, f_hat[0].numpy(), prep.cfg.mask_threshold)


def compute_error_stats(model, prep: SamplePreparer, test_corpus: Corpus,
                        sensors: np.ndarray, times: np.ndarray, out_path) -> tuple:
    """(error mean, covariance) of full-model minus surrogate measurements,
    written as a DOES1 stats file."""
    if len(test_corpus.samples) < 2:
        raise ValueError("need at least two test samples for covariance")
    errors = []
    for sample in test_corpus.samples:
        g_full = record_measurements(sample, test_corpus.node_xy, sensors, times)
        g_surr = surrogate_measurements(model, prep, sample, sensors, times)
        errors.append(g_full - g_surr)
    errors = np.stack(errors)
    eps = errors.mean(axis=0)
    D = errors - eps
    Sigma = (D.T @ D) / (errors.shape[0] - 1)
    Sigma = 0.5 * (Sigma + Sigma.T)
    write_does1(out_path, eps, Sigma)
    return eps, Sigma
