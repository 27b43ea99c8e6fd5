"""Command-line pipeline: prior sampling, simulation, data synthesis, corpus
export, inversion and reporting.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 nonconvergence. Every command writes a manifest capturing the resolved
configuration and seed, so outputs are reproducible from (config, seed).
"""

import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import cvfem
from . import deeponet as onet
from . import eki as ek
from . import fields as flds
from . import mesh as msh
from . import observe as obs
from . import report
from .config import ConfigError, build_mesh, build_observation, build_prior, load_config

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _write_manifest(out_dir: Path, command: str, cfg: dict, seed: int, extra: dict | None = None):
    doc = {"command": command, "version": __version__, "seed": seed, "config": cfg}
    if extra:
        doc.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)
    return doc


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON-serialisable: {type(value)}")


def _load_params_file(path) -> tuple[flds.FieldPair, dict]:
    """Simulation parameter file: JSON with a field-file path and the five
    flow scalars."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read params file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "fields" not in doc or "scalars" not in doc:
        raise ConfigError(f"params file {path} must carry 'fields' and 'scalars'")
    field_path = Path(path).parent / doc["fields"]
    pair = flds.read_field_pair(field_path)
    scalars = doc["scalars"]
    missing = {"mu", "P_I", "lam", "beta", "chi"} - set(scalars)
    if missing:
        raise ConfigError(f"params file missing scalars: {sorted(missing)}")
    return pair, {k: float(v) for k, v in scalars.items()}


def _write_params_file(path: Path, fields_name: str, scalars: dict):
    keep = {k: scalars[k] for k in ("mu", "P_I", "lam", "beta", "chi")}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"fields": fields_name, "scalars": keep}, fh, indent=2)


_corpus_ctx: dict = {}


def _corpus_init(payload):
    _corpus_ctx.update(payload)


def _corpus_one(k):
    ctx = _corpus_ctx
    u = flds.sample_prior(ctx["prior"], ctx["seed"] + k)
    pair = flds.realise_fields(u, ctx["prior"])
    try:
        record = cvfem.simulate_fields(pair, u.scalars, ctx["mesh"], ctx["times"],
                                       horizon=ctx["horizon"], p0=ctx["p0"], cv=ctx["cv"])
    except cvfem.SolverError as exc:
        return str(exc)
    return pair, u.scalars, record


def _run_corpus_samples(prior, mesh, cv, times, horizon, p0, seed, n, workers):
    payload = {"prior": prior, "mesh": mesh, "cv": cv, "times": times,
               "horizon": horizon, "p0": p0, "seed": seed}
    if workers <= 1 or n <= 1:
        _corpus_init(payload)
        return [_corpus_one(k) for k in range(n)]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers, initializer=_corpus_init,
                             initargs=(payload,)) as pool:
        return list(pool.map(_corpus_one, range(n)))


@click.group(context_settings={"auto_envvar_prefix": "FRONTFLOW"})
@click.version_option(__version__)
def main():
    """Moving-boundary filling simulation and ensemble Kalman inversion."""


@main.command("sample-prior")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--n", default=5, show_default=True, help="Number of prior draws.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--truth", is_flag=True,
              help="Write the synthetic benchmark truth instead of prior draws.")
def sample_prior_cmd(config_path, n, seed, out_dir, truth):
    """Draw material-field samples from the prior and export them."""
    try:
        cfg = load_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        prior = build_prior(cfg)
        written = []
        if truth:
            pair, scalars = flds.build_synthetic_truth(prior.grid)
            flds.write_field_pair(pair, out / "truth.fld")
            _write_params_file(out / "truth.json", "truth.fld", scalars)
            written = ["truth.fld", "truth.json"]
        else:
            for k in range(n):
                u = flds.sample_prior(prior, seed + k)
                pair = flds.realise_fields(u, prior)
                name = f"sample_{k:03d}"
                flds.write_field_pair(pair, out / f"{name}.fld")
                _write_params_file(out / f"{name}.json", f"{name}.fld", u.scalars)
                written += [f"{name}.fld", f"{name}.json"]
        _write_manifest(out, "sample-prior", cfg, seed, {"files": written, "truth": truth})
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (cvfem.SolverError, flds.CovarianceFactorisationError) as exc:
        _fail(EXIT_NUMERICAL, str(exc))


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--params", "params_path", type=click.Path(exists=True),
              help="Params JSON from sample-prior; omit with --builtin-truth.")
@click.option("--builtin-truth", is_flag=True, help="Simulate the synthetic benchmark truth.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate_cmd(config_path, params_path, builtin_truth, seed, out_dir):
    """Run the forward filling simulation and export the record CSVs."""
    try:
        cfg = load_config(config_path)
        if params_path is None and not builtin_truth:
            raise ConfigError("simulate needs --params or --builtin-truth")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mesh = build_mesh(cfg)
        oc = build_observation(cfg, mesh)
        sim = cfg["simulate"]
        if builtin_truth:
            prior = build_prior(cfg)
            pair, scalars = flds.build_synthetic_truth(prior.grid)
        else:
            pair, scalars = _load_params_file(params_path)
        record = cvfem.simulate_fields(pair, scalars, mesh, oc.times,
                                       horizon=float(sim.get("T", 110.0)),
                                       p0=float(sim.get("p_0", 0.0)))
        cvfem.write_record_csv(record, out / "record.csv")
        cvfem.write_events_csv(record, out / "fill_events.csv")
        msh.save_mesh(mesh, out / "mesh.txt")
        _write_manifest(out, "simulate", cfg, seed, {
            "fill_complete_time": record.fill_complete_time,
            "n_steps": record.n_steps, "scalars": scalars})
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except cvfem.SolverError as exc:
        _fail(EXIT_NUMERICAL, str(exc))


@main.command("make-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--truth", "params_path", type=click.Path(exists=True),
              help="Truth params JSON; omit to use the builtin benchmark truth.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def make_data_cmd(config_path, params_path, seed, out_dir):
    """Generate noisy synthetic sensor data from a ground truth."""
    try:
        cfg = load_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mesh = build_mesh(cfg)
        oc = build_observation(cfg, mesh)
        sim = cfg["simulate"]
        if params_path:
            pair, scalars = _load_params_file(params_path)
        else:
            prior = build_prior(cfg)
            pair, scalars = flds.build_synthetic_truth(prior.grid)
        record = cvfem.simulate_fields(pair, scalars, mesh, oc.times,
                                       horizon=float(sim.get("T", 110.0)),
                                       p0=float(sim.get("p_0", 0.0)))
        noisy = obs.synthesize_data(record, oc, mesh, seed)
        obs.write_measurements(noisy, oc, out / "measurements.csv")
        obs.write_sensor_layout(oc.sensors, out / "sensors.csv")
        flds.write_field_pair(pair, out / "truth.fld")
        _write_params_file(out / "truth.json", "truth.fld", scalars)
        cvfem.write_record_csv(record, out / "truth_record.csv")
        _write_manifest(out, "make-data", cfg, seed, {
            "M": oc.M, "N": oc.N, "rows": oc.M * oc.N,
            "fill_complete_time": record.fill_complete_time})
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except cvfem.SolverError as exc:
        _fail(EXIT_NUMERICAL, str(exc))


@main.command("make-corpus")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--n", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--workers", default=None, type=int,
              help="Parallel simulations; defaults to the available cores.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def make_corpus_cmd(config_path, n, seed, workers, out_dir):
    """Export a training corpus: prior draws pushed through the simulator."""
    try:
        cfg = load_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mesh = build_mesh(cfg)
        cv = msh.build_control_volumes(mesh)
        oc = build_observation(cfg, mesh)
        prior = build_prior(cfg)
        sim = cfg["simulate"]
        horizon = float(sim.get("T", 110.0))
        p0 = float(sim.get("p_0", 0.0))

        msh.save_mesh(mesh, out / "mesh.txt")
        with open(out / "quadrature.csv", "w", encoding="utf-8") as fh:
            fh.write("node_id,x_m,y_m,weight_m2\n")
            for i, ((x, y), w) in enumerate(zip(mesh.nodes, cv.weights)):
                fh.write(f"{i},{x:.17g},{y:.17g},{w:.17g}\n")

        kept, skipped = [], []
        n_workers = workers if workers is not None else (os.cpu_count() or 1)
        results = _run_corpus_samples(prior, mesh, cv, oc.times, horizon, p0,
                                      seed, n, max(1, n_workers))
        for k, outcome in enumerate(results):
            sample_seed = seed + k
            if isinstance(outcome, str):
                click.echo(f"sample {k}: simulation failed, skipped ({outcome})", err=True)
                skipped.append({"index": k, "seed": sample_seed, "error": outcome})
                continue
            pair, scalars, record = outcome
            d = out / f"sample_{k:04d}"
            d.mkdir(exist_ok=True)
            flds.write_field_pair(pair, d / "fields.fld")
            _write_params_file(d / "params.json", "fields.fld", scalars)
            cvfem.write_record_csv(record, d / "record.csv")
            kept.append({"index": k, "seed": sample_seed,
                         "fill_complete_time": record.fill_complete_time})
        _write_manifest(out, "make-corpus", cfg, seed, {
            "requested": n, "kept": len(kept), "skipped": skipped, "samples": kept})
        if skipped:
            click.echo(f"corpus shortfall: {len(skipped)} of {n} samples failed", err=True)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


@main.command("invert")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int, help="Overrides eki.seed from the config.")
@click.option("--workers", default=None, type=int,
              help="Ensemble evaluation workers; defaults to the available cores.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def invert_cmd(config_path, data_path, seed, workers, out_dir):
    """Ensemble Kalman inversion against a measurement file."""
    t0 = time.perf_counter()
    try:
        cfg = load_config(config_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        mesh = build_mesh(cfg)
        oc = build_observation(cfg, mesh)
        prior = build_prior(cfg)
        ecfg = cfg["eki"]
        seed = int(ecfg.get("seed", 0)) if seed is None else seed
        J = int(ecfg.get("J", 500))
        rho = float(ecfg.get("rho", 0.65))
        mode = ecfg.get("mode", "full")
        sim = cfg["simulate"]
        data = obs.read_measurements(data_path, oc)

        if mode == "surrogate":
            try:
                _, bundle = onet.load_weights(ecfg["weights"])
            except (onet.WeightFormatError, onet.WeightShapeError,
                    onet.WeightChecksumError) as exc:
                raise ConfigError(f"weights: {exc}") from exc
            try:
                eps, Sigma = ek.read_error_stats(ecfg["error_stats"])
            except ek.StatsFileError as exc:
                raise ConfigError(f"error stats: {exc}") from exc
            if eps.size != oc.M * oc.N:
                raise ConfigError(f"error stats dimension {eps.size} != M*N = {oc.M * oc.N}")
            forward = onet.make_surrogate_forward(prior, oc, bundle, eps, Sigma)
        else:
            if workers is None:
                workers = int(ecfg.get("workers", 0)) or os.cpu_count()
            forward = ek.full_model_forward_map(
                prior, mesh, oc, horizon=float(sim.get("T", 110.0)),
                p0=float(sim.get("p_0", 0.0)), workers=workers)

        converged = True
        try:
            ens = ek.eki_run(data, forward, prior, J=J, rho=rho, seed=seed,
                             max_iterations=int(ecfg.get("max_iterations", 100)),
                             damping=ecfg.get("damping", "half"))
        except ek.NonConvergenceError as exc:
            if exc.partial is None:
                forward.close()
                _fail(EXIT_NONCONVERGENCE, str(exc))
            ens = exc.partial
            converged = False
            click.echo(f"warning: {exc}; writing partial outputs", err=True)

        summary = ek.posterior_summary(ens, prior)
        predictive, G_post = ek.predictive_pushforward(ens, forward, data.gamma_diag, seed)
        forward.close()
        _export_inversion(out, summary, predictive, G_post, data, ens, prior)
        wall = time.perf_counter() - t0
        _write_manifest(out, "invert", cfg, seed, {
            "J": J, "rho": rho, "mode": mode, "iterations": ens.n_iterations,
            "alphas": ens.alphas, "misfits": ens.misfits, "s": ens.s,
            "forward_failures": ens.n_failures, "wall_time_s": wall,
            "converged": converged, "partial": not converged})
        if not converged:
            sys.exit(EXIT_NONCONVERGENCE)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (cvfem.SolverError, ek.EkiNumericalError,
            flds.CovarianceFactorisationError) as exc:
        _fail(EXIT_NUMERICAL, str(exc))


def _export_inversion(out: Path, summary, predictive, G_post, data, ens, prior):
    grid = summary.grid
    labels = np.zeros(grid.shape, dtype=np.uint8)
    flds.write_field_pair(flds.FieldPair(summary.mean_log_K, summary.mean_phi, labels, grid),
                          out / "posterior_mean.fld")
    flds.write_field_pair(flds.FieldPair(summary.std_log_K, summary.std_phi, labels, grid),
                          out / "posterior_std.fld")
    flds.write_field_pair(flds.FieldPair(summary.p_def, summary.p_rt, labels, grid),
                          out / "defect_probability.fld")

    with open(out / "scalar_samples.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(flds.SCALAR_NAMES) + "\n")
        for row in summary.scalar_samples:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    with open(out / "scalar_histograms.csv", "w", encoding="utf-8") as fh:
        fh.write("scalar,bin_lo,bin_hi,count\n")
        for k, name in enumerate(flds.SCALAR_NAMES):
            counts, edges = np.histogram(summary.scalar_samples[:, k], bins=30)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{name},{lo:.17g},{hi:.17g},{c}\n")

    header = ",".join(f"m{i}" for i in range(predictive.shape[1]))
    np.savetxt(out / "predictive_samples.csv", predictive, delimiter=",",
               header=header, comments="", fmt="%.17g")
    np.savetxt(out / "data_used.csv", data.values[None, :], delimiter=",",
               header=header, comments="", fmt="%.17g")
    np.savetxt(out / "posterior_forward_values.csv", G_post, delimiter=",",
               header=header, comments="", fmt="%.17g")


@main.command("summarize")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="Inversion output directory.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def summarize_cmd(run_dir, out_dir):
    """Render figures and summary tables from an inversion run."""
    try:
        written = report.summarize_run(run_dir, out_dir)
    except (OSError, ValueError) as exc:
        _fail(EXIT_CONFIG, f"cannot summarize {run_dir}: {exc}")
    for path in written:
        click.echo(str(path))


if __name__ == "__main__":
    main(auto_envvar_prefix="FRONTFLOW")
