"""Training corpus: simulator outputs loaded from a make-corpus directory.

A corpus directory holds quadrature.csv (node_id, x_m, y_m, weight_m2) plus
sample_XXXX/ subdirectories, each with fields.fld, params.json and record.csv.
Corpora are produced by the simulator CLI; build_corpus shells out to it.
"""

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .formats import read_fld

SCALAR_ORDER = ("mu", "P_I", "lam", "beta", "chi")


@dataclass
class CorpusSample:
    log_K: np.ndarray      # (H, W)
    phi: np.ndarray        # (H, W)
    scalars: np.ndarray    # (5,) in SCALAR_ORDER
    times: np.ndarray      # (n_stamps,)
    pressure: np.ndarray   # (n_stamps, S)
    fill: np.ndarray       # (n_stamps, S)


@dataclass
class Corpus:
    samples: list
    node_xy: np.ndarray    # (S, 2)
    weights: np.ndarray    # (S,) quadrature weights, summing to the domain area
    domain: tuple          # (Dx, Dy)
    horizon: float

    def __len__(self):
        return len(self.samples)

    def split(self, val_fraction: float = 0.1, seed: int = 0):
        """Deterministic train/validation split (default 90/10)."""
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(self.samples))
        n_val = max(1, int(round(val_fraction * len(self.samples))))
        val = [self.samples[i] for i in idx[:n_val]]
        train = [self.samples[i] for i in idx[n_val:]]
        return train, val


def build_corpus(config_path, n: int, seed: int, out_dir, workers: int | None = None) -> Path:
    """Generate a corpus by invoking the simulator CLI."""
    cmd = ["frontflow", "make-corpus", "--config", str(config_path), "--n", str(n),
           "--seed", str(seed), "--out", str(out_dir)]
    if workers:
        cmd += ["--workers", str(workers)]
    subprocess.run(cmd, check=True)
    return Path(out_dir)


def load_corpus(corpus_dir, horizon: float = 110.0, limit: int | None = None) -> Corpus:
    corpus_dir = Path(corpus_dir)
    quad = pd.read_csv(corpus_dir / "quadrature.csv").sort_values("node_id")
    node_xy = quad[["x_m", "y_m"]].to_numpy()
    weights = quad["weight_m2"].to_numpy()

    samples = []
    domain = None
    dirs = sorted(d for d in corpus_dir.iterdir() if d.is_dir() and d.name.startswith("sample_"))
    if limit is not None:
        dirs = dirs[:limit]
    for d in dirs:
        log_K, phi, _, dom = read_fld(d / "fields.fld")
        domain = dom
        with open(d / "params.json", encoding="utf-8") as fh:
            params = json.load(fh)["scalars"]
        scalars = np.array([params[k] for k in SCALAR_ORDER])
        rec = pd.read_csv(d / "record.csv")
        times = np.sort(rec["time_s"].unique())
        n_nodes = int(rec["node_id"].max()) + 1
        frame = rec.sort_values(["time_s", "node_id"])
        pressure = frame["pressure_Pa"].to_numpy().reshape(times.size, n_nodes)
        fill = frame["fill_factor"].to_numpy().reshape(times.size, n_nodes)
        samples.append(CorpusSample(log_K=log_K, phi=phi, scalars=scalars,
                                    times=times, pressure=pressure, fill=fill))
    if not samples:
        raise ValueError(f"no samples found under {corpus_dir}")
    return Corpus(samples=samples, node_xy=node_xy, weights=weights,
                  domain=domain, horizon=horizon)


@dataclass
class Normalisation:
    """Input / target statistics gathered from the training split."""
    field_min: np.ndarray    # (4,) per-channel minima: log_K, phi, x, y
    field_max: np.ndarray
    scalar_mean: np.ndarray  # (5,)
    scalar_sd: np.ndarray
    pressure_mean: float
    pressure_sd: float


def fit_normalisation(samples) -> Normalisation:
    k_lo = min(float(s.log_K.min()) for s in samples)
    k_hi = max(float(s.log_K.max()) for s in samples)
    p_lo = min(float(s.phi.min()) for s in samples)
    p_hi = max(float(s.phi.max()) for s in samples)
    if k_hi <= k_lo:
        k_hi = k_lo + 1.0
    if p_hi <= p_lo:
        p_hi = p_lo + 1.0
    scal = np.stack([s.scalars for s in samples])
    sd = scal.std(axis=0, ddof=0)
    sd[sd == 0] = 1.0
    press = np.concatenate([s.pressure.ravel() for s in samples])
    p_sd = float(press.std(ddof=0)) or 1.0
    return Normalisation(field_min=np.array([k_lo, p_lo, 0.0, 0.0]),
                         field_max=np.array([k_hi, p_hi, 1.0, 1.0]),
                         scalar_mean=scal.mean(axis=0), scalar_sd=sd,
                         pressure_mean=float(press.mean()), pressure_sd=p_sd)
