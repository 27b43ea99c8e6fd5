"""Training loop: Adam with plateau halving, stochastic time subsampling,
checkpoints every 50 epochs, metric history, and portable weight export."""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus, Normalisation, fit_normalisation
from .formats import write_donw1
from .losses import masked_pressure, quadrature_loss, relative_l2
from .model import ModelConfig, Surrogate, donw1_config, export_tensors, positional_channels


@dataclass
class TrainingConfig:
    kappa: float = 0.05
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 50             # production cap is 450
    n_time_samples: int = 8
    checkpoint_interval: int = 50
    val_fraction: float = 0.1
    seed: int = 0
    plateau_patience: int = 20
    plateau_factor: float = 0.5

    def __post_init__(self):
        if self.kappa <= 0 or self.learning_rate <= 0:
            raise ValueError("kappa and the learning rate must be positive")
        if self.epochs > 450:
            raise ValueError("epoch cap is 450")


def _substream(seed: int, *names) -> np.random.Generator:
    key = tuple(int.from_bytes(hashlib.blake2s(n.encode(), digest_size=4).digest(), "little")
                for n in names)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


class SamplePreparer:
    """Precomputes per-sample tensors and serves stochastic time subsamples."""

    def __init__(self, corpus: Corpus, norm: Normalisation, cfg: ModelConfig):
        self.norm = norm
        self.cfg = cfg
        self.weights = torch.tensor(corpus.weights, dtype=torch.float32)
        self.horizon = corpus.horizon
        H, W = cfg.grid_shape
        xx, yy = positional_channels(H, W)
        self.pos = torch.stack([xx, yy])
        Dx, Dy, T = cfg.coord_scale
        xy = corpus.node_xy / np.array([Dx, Dy])
        self.node_q = torch.tensor(xy, dtype=torch.float32)   # (S, 2)

    def fields_tensor(self, sample) -> torch.Tensor:
        lo = self.norm.field_min
        hi = self.norm.field_max
        k = (sample.log_K - lo[0]) / (hi[0] - lo[0])
        p = (sample.phi - lo[1]) / (hi[1] - lo[1])
        return torch.cat([torch.tensor(np.stack([k, p]), dtype=torch.float32), self.pos])

    def scalars_tensor(self, sample) -> torch.Tensor:
        s = (sample.scalars - self.norm.scalar_mean) / self.norm.scalar_sd
        return torch.tensor(s, dtype=torch.float32)

    def stamp_batch(self, sample, stamp_idx) -> tuple:
        """Queries and targets for the given stored time stamps.

        Returns (queries (n_t * S, 3), p_std (n_t * S,), f (n_t * S,)).
        """
        T = self.cfg.coord_scale[2]
        S = self.node_q.shape[0]
        n_t = len(stamp_idx)
        q = torch.empty((n_t * S, 3), dtype=torch.float32)
        p = np.empty(n_t * S)
        f = np.empty(n_t * S)
        for j, idx in enumerate(stamp_idx):
            block = slice(j * S, (j + 1) * S)
            q[block, :2] = self.node_q
            q[block, 2] = sample.times[idx] / T
            p[block] = sample.pressure[idx]
            f[block] = sample.fill[idx]
        p_std = (p - self.norm.pressure_mean) / self.norm.pressure_sd
        return q, torch.tensor(p_std, dtype=torch.float32), torch.tensor(f, dtype=torch.float32)

    def all_stamps(self, sample):
        return self.stamp_batch(sample, list(range(sample.times.size)))


def evaluate_metrics(model: Surrogate, samples, prep: SamplePreparer,
                     kappa: float) -> dict:
    """Full-norm validation: loss surrogate and relative-L2 errors with the
    masked pressure, computed over every stored stamp."""
    model.eval()
    eps_p, eps_f, losses = [], [], []
    w = prep.weights.numpy()
    with torch.no_grad():
        for s in samples:
            q, p_std, f_t = prep.all_stamps(s)
            fields = prep.fields_tensor(s)[None]
            scal = prep.scalars_tensor(s)[None]
            p_hat, f_hat = model(fields, scal, q[None])
            p_hat = p_hat[0].numpy()
            f_hat = f_hat[0].numpy()
            n_t = s.times.size
            loss = quadrature_loss(torch.tensor(p_hat)[None], torch.tensor(f_hat)[None],
                                   p_std[None], f_t[None], prep.weights,
                                   prep.horizon, n_t, kappa)
            losses.append(float(loss))
            p_phys = p_hat * prep.norm.pressure_sd + prep.norm.pressure_mean
            p_s = masked_pressure(p_phys, f_hat, prep.cfg.mask_threshold)
            S = w.size
            eps_p.append(relative_l2(p_s.reshape(n_t, S), s.pressure, w))
            eps_f.append(relative_l2(f_hat.reshape(n_t, S), s.fill, w))
    model.train()
    return {"loss": float(np.mean(losses)),
            "eps_p_mean": float(np.mean(eps_p)), "eps_p_sd": float(np.std(eps_p)),
            "eps_f_mean": float(np.mean(eps_f)), "eps_f_sd": float(np.std(eps_f))}


def train(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainingConfig,
          out_dir, resume_from=None) -> dict:
    """Train and export. Returns {'weights': path, 'history': rows, ...}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    train_samples, val_samples = corpus.split(train_cfg.val_fraction, seed=train_cfg.seed)
    norm = fit_normalisation(train_samples)
    prep = SamplePreparer(corpus, norm, model_cfg)
    model = Surrogate(model_cfg)
    optim = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optim, factor=train_cfg.plateau_factor, patience=train_cfg.plateau_patience)
    start_epoch = 0
    history: list = []
    if resume_from is not None:
        state = torch.load(resume_from, weights_only=False)
        model.load_state_dict(state["model"])
        optim.load_state_dict(state["optim"])
        sched.load_state_dict(state["sched"])
        start_epoch = state["epoch"]
        history = state["history"]

    fields_cache = [prep.fields_tensor(s) for s in train_samples]
    scalars_cache = [prep.scalars_tensor(s) for s in train_samples]

    n_t = train_cfg.n_time_samples
    best = None
    last_good = None
    for epoch in range(start_epoch, train_cfg.epochs):
        order = _substream(train_cfg.seed, "shuffle", str(epoch)).permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = order[lo:lo + train_cfg.batch_size]
            fields = torch.stack([fields_cache[i] for i in batch])
            scal = torch.stack([scalars_cache[i] for i in batch])
            qs, ps, fs = [], [], []
            for i in batch:
                s = train_samples[i]
                rng = _substream(train_cfg.seed, "times", str(epoch), str(i))
                stamps = rng.integers(s.times.size, size=n_t)
                q, p_std, f_t = prep.stamp_batch(s, stamps)
                qs.append(q)
                ps.append(p_std)
                fs.append(f_t)
            q = torch.stack(qs)
            p_t = torch.stack(ps)
            f_t = torch.stack(fs)
            optim.zero_grad()
            p_hat, f_hat = model(fields, scal, q)
            loss = quadrature_loss(p_hat, f_hat, p_t, f_t, prep.weights,
                                   prep.horizon, n_t, train_cfg.kappa)
            if not torch.isfinite(loss):
                if last_good is not None:
                    state = torch.load(last_good, weights_only=False)
                    model.load_state_dict(state["model"])
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}; "
                    f"last good checkpoint: {last_good}")
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
            n_batches += 1

        metrics = evaluate_metrics(model, val_samples, prep, train_cfg.kappa)
        sched.step(metrics["loss"])
        row = {"epoch": epoch + 1, "train_loss": epoch_loss / max(n_batches, 1),
               "val_loss": metrics["loss"],
               "eps_p_mean": metrics["eps_p_mean"], "eps_p_sd": metrics["eps_p_sd"],
               "eps_f_mean": metrics["eps_f_mean"], "eps_f_sd": metrics["eps_f_sd"]}
        history.append(row)
        score = metrics["eps_p_mean"] + train_cfg.kappa * metrics["eps_f_mean"]
        if best is None or score < best[0]:
            best = (score, epoch + 1)

        if (epoch + 1) % train_cfg.checkpoint_interval == 0 or epoch + 1 == train_cfg.epochs:
            ck = out_dir / f"checkpoint_{epoch + 1:04d}.pt"
            torch.save({"model": model.state_dict(), "optim": optim.state_dict(),
                        "sched": sched.state_dict(), "epoch": epoch + 1,
                        "history": history}, ck)
            last_good = ck

    weights_path = out_dir / "surrogate.donw1"
    export(model, norm, weights_path)
    history_path = out_dir / "metrics.csv"
    with open(history_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)
    return {"weights": weights_path, "history": history, "model": model, "norm": norm,
            "prep": prep, "best_epoch": best[1] if best else None,
            "val_samples": val_samples, "metrics_csv": history_path}


def export(model: Surrogate, norm: Normalisation, path) -> None:
    model.eval()
    write_donw1(path, donw1_config(model.cfg, norm), export_tensors(model))
