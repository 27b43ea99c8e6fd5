"""Minimal trainer CLI: corpus building (via the simulator), training, and
surrogate-error statistics."""

import argparse
import json

import numpy as np
import pandas as pd

from .corpus import build_corpus, load_corpus
from .model import ModelConfig
from .stats import compute_error_stats
from .train import SamplePreparer, Surrogate, TrainingConfig, train

import torch


def main(argv=None):
    parser = argparse.ArgumentParser(prog="frontflow-train")
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("build-corpus", help="Generate a corpus via the simulator CLI.")
    p_corpus.add_argument("--config", required=True)
    p_corpus.add_argument("--n", type=int, default=500)
    p_corpus.add_argument("--seed", type=int, default=0)
    p_corpus.add_argument("--workers", type=int, default=None)
    p_corpus.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="Train a surrogate on a corpus directory.")
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--n-out", type=int, default=64)
    p_train.add_argument("--grid", type=int, nargs=2, default=(40, 40))
    p_train.add_argument("--batch-size", type=int, default=32)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--horizon", type=float, default=110.0)
    p_train.add_argument("--resume", default=None)

    p_stats = sub.add_parser("error-stats", help="Surrogate error statistics on a test corpus.")
    p_stats.add_argument("--corpus", required=True)
    p_stats.add_argument("--checkpoint", required=True, help="Checkpoint .pt from training.")
    p_stats.add_argument("--sensors", required=True, help="sensor_id,x_m,y_m layout CSV.")
    p_stats.add_argument("--times", required=True, help="Comma-separated observation times.")
    p_stats.add_argument("--n-out", type=int, default=64)
    p_stats.add_argument("--grid", type=int, nargs=2, default=(40, 40))
    p_stats.add_argument("--horizon", type=float, default=110.0)
    p_stats.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "build-corpus":
        build_corpus(args.config, args.n, args.seed, args.out, args.workers)
    elif args.command == "train":
        corpus = load_corpus(args.corpus, horizon=args.horizon)
        model_cfg = ModelConfig(grid_shape=tuple(args.grid), n_out=args.n_out,
                                coord_scale=(corpus.domain[0], corpus.domain[1], args.horizon))
        train_cfg = TrainingConfig(epochs=args.epochs, batch_size=args.batch_size,
                                   seed=args.seed)
        result = train(corpus, model_cfg, train_cfg, args.out, resume_from=args.resume)
        print(json.dumps({"weights": str(result["weights"]),
                          "best_epoch": result["best_epoch"]}))
    elif args.command == "error-stats":
        corpus = load_corpus(args.corpus, horizon=args.horizon)
        model_cfg = ModelConfig(grid_shape=tuple(args.grid), n_out=args.n_out,
                                coord_scale=(corpus.domain[0], corpus.domain[1], args.horizon))
        state = torch.load(args.checkpoint, weights_only=False)
        model = Surrogate(model_cfg)
        model.load_state_dict(state["model"])
        from .corpus import fit_normalisation
        norm = fit_normalisation(corpus.samples)
        prep = SamplePreparer(corpus, norm, model_cfg)
        layout = pd.read_csv(args.sensors).sort_values("sensor_id")
        sensors = layout[["x_m", "y_m"]].to_numpy()
        times = np.array([float(t) for t in args.times.split(",")])
        compute_error_stats(model, prep, corpus, sensors, times, args.out)
        print(json.dumps({"stats": args.out, "mn": int(sensors.shape[0] * times.size)}))


if __name__ == "__main__":
    main()
