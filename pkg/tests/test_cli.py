import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from frontflow.cli import main
from frontflow.config import ConfigError, validate_config
from frontflow.fields import read_field_pair


def write_config(path, **overrides):
    doc = {
        "mesh": {"kind": "structured", "nx": 13, "ny": 13, "domain": [0.3, 0.3]},
        "prior": {"grid": [13, 13], "boundary_points": 13},
        "observation": {"layout": "sparse23", "times": {"count": 6, "t_max": 100.0},
                        "sigma0": 0.025, "floor": 100.0},
        "eki": {"J": 12, "rho": 0.65, "seed": 1, "mode": "full"},
        "simulate": {"T": 110.0, "p_0": 0.0},
    }
    for key, sub in overrides.items():
        doc[key].update(sub)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def run_cli(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


class TestConfigValidation:
    def test_unknown_root_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config({"mesh": {}, "extra": 1})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config({"eki": {"J": 3, "bogus": True}})

    def test_surrogate_mode_requires_files(self):
        with pytest.raises(ConfigError, match="weights"):
            validate_config({"eki": {"mode": "surrogate"}})

    def test_ok_defaults(self):
        cfg = validate_config({})
        assert set(cfg) == {"mesh", "prior", "observation", "eki", "simulate"}


class TestSamplePrior:
    def test_writes_n_field_files(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "out"
        res = run_cli(["sample-prior", "--config", str(cfg), "--n", "5",
                       "--seed", "3", "--out", str(out)])
        assert res.exit_code == 0
        files = sorted(p.name for p in out.glob("sample_*.fld"))
        assert len(files) == 5
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3

    def test_seed_reproducible(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli(["sample-prior", "--config", str(cfg), "--n", "2", "--seed", "7", "--out", str(a)])
        run_cli(["sample-prior", "--config", str(cfg), "--n", "2", "--seed", "7", "--out", str(b)])
        assert (a / "sample_000.fld").read_bytes() == (b / "sample_000.fld").read_bytes()

    def test_porosity_within_prior_union(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "out"
        run_cli(["sample-prior", "--config", str(cfg), "--n", "4", "--seed", "1",
                 "--out", str(out)])
        for p in out.glob("sample_*.fld"):
            pair = read_field_pair(p)
            assert pair.phi.min() >= 0.55 and pair.phi.max() <= 0.96


class TestSimulate:
    def test_builtin_truth_fill_time(self, tmp_path):
        # uniform-strip benchmark bracketed by the analytic fill time
        cfg = write_config(tmp_path / "c.json",
                           mesh={"nx": 61, "ny": 61},
                           prior={"grid": [61, 61], "boundary_points": 61})
        out = tmp_path / "sim"
        res = run_cli(["simulate", "--config", str(cfg), "--builtin-truth", "--out", str(out)])
        assert res.exit_code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        # the analytic fill-time check lives in the acceptance suite
        assert 0 < manifest["fill_complete_time"] < 110.0
        assert (out / "record.csv").exists() and (out / "fill_events.csv").exists()

    def test_missing_params_is_usage_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        res = run_cli(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_empty_params_file_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        empty = tmp_path / "params.json"
        empty.write_text("")
        res = run_cli(["simulate", "--config", str(cfg), "--params", str(empty),
                       "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_repeatable_outputs(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            res = run_cli(["simulate", "--config", str(cfg), "--builtin-truth",
                           "--out", str(out)])
            assert res.exit_code == 0
        assert (a / "record.csv").read_bytes() == (b / "record.csv").read_bytes()


class TestMakeData:
    def test_row_count_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            res = run_cli(["make-data", "--config", str(cfg), "--seed", "9", "--out", str(out)])
            assert res.exit_code == 0
        rows = (a / "measurements.csv").read_text().strip().splitlines()
        assert len(rows) - 1 == 23 * 6
        assert (a / "measurements.csv").read_bytes() == (b / "measurements.csv").read_bytes()

    def test_tiny_noise_matches_noise_free(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", observation={"sigma0": 1e-12})
        out = tmp_path / "out"
        run_cli(["make-data", "--config", str(cfg), "--seed", "2", "--out", str(out)])
        import numpy as np
        from frontflow.cvfem import read_record_csv
        from frontflow.config import load_config, build_mesh, build_observation
        from frontflow.observe import observe, read_measurements
        conf = load_config(cfg)
        mesh = build_mesh(conf)
        oc = build_observation(conf, mesh)
        rec = read_record_csv(out / "truth_record.csv")
        clean = observe(rec, oc, mesh)
        noisy = read_measurements(out / "measurements.csv", oc)
        assert np.abs(noisy.values - clean.values).max() < 1e-6


class TestMakeCorpus:
    def test_corpus_layout(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "corpus"
        res = run_cli(["make-corpus", "--config", str(cfg), "--n", "3", "--seed", "5",
                       "--workers", "1", "--out", str(out)])
        assert res.exit_code == 0
        assert (out / "mesh.txt").exists() and (out / "quadrature.csv").exists()
        for k in range(3):
            d = out / f"sample_{k:04d}"
            assert (d / "fields.fld").exists()
            assert (d / "params.json").exists()
            assert (d / "record.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["kept"] == 3 and manifest["requested"] == 3

    def test_corpus_reproducible(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run_cli(["make-corpus", "--config", str(cfg), "--n", "2", "--seed", "5",
                     "--workers", "1", "--out", str(out)])
        assert (a / "sample_0000" / "fields.fld").read_bytes() == \
            (b / "sample_0000" / "fields.fld").read_bytes()
        assert (a / "sample_0001" / "record.csv").read_bytes() == \
            (b / "sample_0001" / "record.csv").read_bytes()


class TestInvert:
    def test_full_model_inversion_small(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           observation={"sigma0": 0.025, "floor": 4000.0,
                                        "times": {"count": 6, "t_max": 100.0}})
        data_dir = tmp_path / "data"
        run_cli(["make-data", "--config", str(cfg), "--seed", "4", "--out", str(data_dir)])
        out = tmp_path / "run"
        res = run_cli(["invert", "--config", str(cfg), "--data",
                       str(data_dir / "measurements.csv"), "--workers", "2",
                       "--out", str(out)])
        assert res.exit_code == 0, res.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["s"] == 1.0
        assert manifest["converged"] is True
        assert abs(sum(1 / a for a in manifest["alphas"]) - 1.0) < 1e-12
        for name in ("posterior_mean.fld", "posterior_std.fld", "defect_probability.fld",
                     "scalar_samples.csv", "scalar_histograms.csv",
                     "predictive_samples.csv", "manifest.json"):
            assert (out / name).exists(), name

    def test_surrogate_mode_end_to_end(self, tmp_path):
        import sys
        sys.path.insert(0, str(Path(__file__).parent))
        from conftest import seeded_bundle
        from frontflow.deeponet import desk_config, save_weights
        from frontflow.eki import write_error_stats

        cfg = write_config(tmp_path / "c.json",
                           mesh={"nx": 13, "ny": 13},
                           prior={"grid": [16, 16], "boundary_points": 16},
                           observation={"sigma0": 0.025, "floor": 4000.0,
                                        "times": {"count": 5, "t_max": 100.0}},
                           eki={"J": 10, "mode": "surrogate",
                                "weights": str(tmp_path / "w.donw1"),
                                "error_stats": str(tmp_path / "s.does1")})
        bundle = seeded_bundle(desk_config(grid_shape=(16, 16), n_out=8,
                                           scalar_widths=(6, 6, 6),
                                           channels=(4, 4, 6, 6, 8)), seed=3)
        save_weights(bundle, tmp_path / "w.donw1")
        mn = 23 * 5
        # wide error statistics: the surrogate is untrained, so say so loudly
        write_error_stats(tmp_path / "s.does1", np.zeros(mn), np.eye(mn) * 1e7)
        data_dir = tmp_path / "data"
        run_cli(["make-data", "--config", str(cfg), "--seed", "4", "--out", str(data_dir)])
        out = tmp_path / "run"
        res = run_cli(["invert", "--config", str(cfg), "--data",
                       str(data_dir / "measurements.csv"), "--out", str(out)])
        assert res.exit_code == 0, res.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "surrogate" and manifest["s"] == 1.0

    def test_surrogate_mode_missing_stats_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", eki={"mode": "surrogate",
                                                     "weights": "w.donw1"})
        data = tmp_path / "d.csv"
        data.write_text("time_s,sensor_id,pressure_Pa\n1.0,0,5.0\n")
        res = run_cli(["invert", "--config", str(cfg), "--data", str(data),
                       "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_results_independent_of_worker_count(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           observation={"sigma0": 0.025, "floor": 4000.0,
                                        "times": {"count": 5, "t_max": 100.0}},
                           eki={"J": 8})
        data_dir = tmp_path / "data"
        run_cli(["make-data", "--config", str(cfg), "--seed", "4", "--out", str(data_dir)])
        outs = []
        for w in ("1", "2"):
            out = tmp_path / f"run_w{w}"
            res = run_cli(["invert", "--config", str(cfg), "--data",
                           str(data_dir / "measurements.csv"), "--workers", w,
                           "--out", str(out)])
            assert res.exit_code == 0, res.output
            outs.append(out)
        assert (outs[0] / "posterior_mean.fld").read_bytes() == \
            (outs[1] / "posterior_mean.fld").read_bytes()
        assert (outs[0] / "scalar_samples.csv").read_bytes() == \
            (outs[1] / "scalar_samples.csv").read_bytes()

    def test_env_var_overrides_seed(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path / "c.json")
        a, b = tmp_path / "a", tmp_path / "b"
        res = CliRunner().invoke(main, ["sample-prior", "--config", str(cfg), "--n", "1",
                                        "--out", str(a)],
                                 env={"FRONTFLOW_SAMPLE_PRIOR_SEED": "9"},
                                 auto_envvar_prefix="FRONTFLOW", catch_exceptions=False)
        assert res.exit_code == 0
        run_cli(["sample-prior", "--config", str(cfg), "--n", "1", "--seed", "9",
                 "--out", str(b)])
        assert (a / "sample_000.fld").read_bytes() == (b / "sample_000.fld").read_bytes()

    def test_iteration_cap_exits_nonconvergence(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           observation={"sigma0": 0.025, "floor": 4000.0,
                                        "times": {"count": 5, "t_max": 100.0}},
                           eki={"J": 8, "max_iterations": 1})
        data_dir = tmp_path / "data"
        run_cli(["make-data", "--config", str(cfg), "--seed", "4", "--out", str(data_dir)])
        out = tmp_path / "run"
        res = CliRunner().invoke(main, ["invert", "--config", str(cfg), "--data",
                                        str(data_dir / "measurements.csv"),
                                        "--workers", "1", "--out", str(out)])
        assert res.exit_code == 4
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["partial"] is True and manifest["converged"] is False
        assert (out / "posterior_mean.fld").exists()

    def test_summarize_renders_figures(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           observation={"sigma0": 0.025, "floor": 4000.0,
                                        "times": {"count": 5, "t_max": 100.0}},
                           eki={"J": 8})
        data_dir = tmp_path / "data"
        run_cli(["make-data", "--config", str(cfg), "--seed", "4", "--out", str(data_dir)])
        run_dir = tmp_path / "run"
        res = run_cli(["invert", "--config", str(cfg), "--data",
                       str(data_dir / "measurements.csv"), "--workers", "1",
                       "--out", str(run_dir)])
        assert res.exit_code == 0, res.output
        fig_dir = tmp_path / "report"
        res = run_cli(["summarize", "--run", str(run_dir), "--out", str(fig_dir)])
        assert res.exit_code == 0
        assert (fig_dir / "posterior_fields.png").exists()
        assert (fig_dir / "scalar_histograms.png").exists()
        assert (fig_dir / "scalar_summary.csv").exists()
