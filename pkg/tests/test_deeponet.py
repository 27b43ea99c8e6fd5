import math

import numpy as np
import pytest

from conftest import filled_bundle, seeded_bundle
from frontflow.deeponet import (SurrogateConfig, WeightBundle, WeightChecksumError,
                                WeightShapeError, branch_forward, desk_config,
                                expected_shapes, fourier_embed, gelu, load_weights,
                                save_weights, surrogate_predict, trunk_forward)
from frontflow.fields import default_prior, sample_prior
from frontflow.grid import RegularGrid
from frontflow.observe import ObservationConfig

CFG = desk_config(grid_shape=(16, 16), n_out=8, scalar_widths=(6, 6, 6),
                  channels=(4, 4, 6, 6, 8))


def scalars_example():
    return np.array([0.1, 1e5, 1.0, 0.45, 0.6])


class TestConfig:
    def test_rejects_odd_latent(self):
        with pytest.raises(ValueError, match="even"):
            desk_config(n_out=7)

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            desk_config(mask_threshold=1.0)

    def test_rejects_indivisible_grid(self):
        with pytest.raises(ValueError, match="divisible"):
            desk_config(grid_shape=(30, 30))

    def test_embedding_dimension(self):
        assert CFG.embed_dim == 3 + 6 * 6 == 39

    def test_shape_contract_across_latent_sizes(self):
        # supported production configs: every tensor shape follows the config
        for n_out in (200, 400, 800):
            cfg = SurrogateConfig(grid_shape=(24, 24), n_out=n_out)
            shapes = expected_shapes(cfg)
            assert shapes["trunk.encoder.weight"] == (n_out, 39)
            assert shapes["branch.scalars.fc3.weight"] == (n_out, 64)
            assert shapes["trunk.head_p.weight"] == (n_out // 2,)
            assert shapes["branch.fields.head.weight"] == (n_out, 512 * 3 * 3)
            b = seeded_bundle(cfg, seed=1)
            g = branch_forward(np.zeros((24, 24)), np.zeros((24, 24)),
                               scalars_example(), b)
            assert g.shape == (n_out,)


class TestWeightFile:
    def test_round_trip_bit_identical(self, tmp_path):
        bundle = seeded_bundle(CFG, seed=3)
        path = tmp_path / "w.donw1"
        save_weights(bundle, path)
        cfg2, back = load_weights(path)
        assert cfg2 == CFG
        for name, t in bundle.tensors.items():
            assert (back.tensors[name] == t).all(), name

    def test_truncated_file_fails_checksum(self, tmp_path):
        bundle = seeded_bundle(CFG, seed=3)
        path = tmp_path / "w.donw1"
        save_weights(bundle, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(WeightChecksumError):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.donw1"
        path.write_bytes(b"NOTIT" + b"\0" * 30)
        with pytest.raises(ValueError, match="DONW1|weight"):
            load_weights(path)

    def test_shape_mismatch_detected(self):
        bundle = seeded_bundle(CFG, seed=3)
        bad = dict(bundle.tensors)
        bad["trunk.encoder.bias"] = np.zeros(CFG.n_out + 1, dtype=np.float32)
        with pytest.raises(WeightShapeError):
            WeightBundle(config=CFG, tensors=bad)

    def test_odd_latent_rejected_at_load(self, tmp_path):
        bundle = seeded_bundle(CFG, seed=3)
        path = tmp_path / "w.donw1"
        save_weights(bundle, path)
        blob = bytearray(path.read_bytes())
        # configs are validated on read; corrupting n_out must not pass silently
        idx = blob.find(b'"n_out": 8')
        blob[idx:idx + 10] = b'"n_out": 7'
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            load_weights(path)


class TestBranch:
    def test_zero_weights_give_zero_gate(self):
        bundle = filled_bundle(CFG, lambda name, shape:
                               np.ones(shape) if "running_var" in name else np.zeros(shape))
        g = branch_forward(np.random.default_rng(0).standard_normal((16, 16)),
                           np.full((16, 16), 0.7), scalars_example(), bundle)
        assert (g == 0).all()

    def test_scalar_branch_identity_passthrough(self):
        # force B_scalars to all ones: gate equals the field branch output
        bundle = seeded_bundle(CFG, seed=5)
        t = dict(bundle.tensors)
        t["branch.scalars.fc3.weight"] = np.zeros_like(t["branch.scalars.fc3.weight"])
        t["branch.scalars.fc3.bias"] = np.ones_like(t["branch.scalars.fc3.bias"])
        ones_bundle = WeightBundle(config=CFG, tensors=t)
        log_K = np.random.default_rng(1).standard_normal((16, 16))
        phi = np.full((16, 16), 0.7)
        g = branch_forward(log_K, phi, scalars_example(), ones_bundle)
        t2 = dict(t)
        t2["branch.scalars.fc3.bias"] = np.full_like(t["branch.scalars.fc3.bias"], 2.0)
        twos = WeightBundle(config=CFG, tensors=t2)
        g2 = branch_forward(log_K, phi, scalars_example(), twos)
        assert np.allclose(g2, 2 * g)

    def test_determinism(self):
        bundle = seeded_bundle(CFG, seed=6)
        log_K = np.random.default_rng(2).standard_normal((16, 16))
        phi = np.full((16, 16), 0.6)
        a = branch_forward(log_K, phi, scalars_example(), bundle)
        b = branch_forward(log_K, phi, scalars_example(), bundle)
        assert (a == b).all()

    def test_non_finite_rejected(self):
        bundle = seeded_bundle(CFG, seed=6)
        bad = np.full((16, 16), np.nan)
        with pytest.raises(ValueError, match="finite"):
            branch_forward(bad, np.full((16, 16), 0.5), scalars_example(), bundle)


class TestTrunk:
    def test_zero_fill_head_gives_half(self):
        bundle = seeded_bundle(CFG, seed=7)
        t = dict(bundle.tensors)
        t["trunk.head_f.weight"] = np.zeros_like(t["trunk.head_f.weight"])
        t["trunk.head_f.bias"] = np.zeros_like(t["trunk.head_f.bias"])
        b = WeightBundle(config=CFG, tensors=t)
        g = np.random.default_rng(3).standard_normal(CFG.n_out)
        _, f = trunk_forward(np.array([[0.3, 0.4, 0.5], [0.9, 0.1, 0.2]]), g, b)
        assert np.allclose(f, 0.5)

    def test_zero_gate_zero_bias_propagation(self):
        bundle = seeded_bundle(CFG, seed=8)
        t = dict(bundle.tensors)
        for l in range(CFG.trunk_layers):
            t[f"trunk.gates.{l}.b"] = np.zeros_like(t[f"trunk.gates.{l}.b"])
        b = WeightBundle(config=CFG, tensors=t)
        p, f = trunk_forward(np.array([0.5, 0.5, 0.5]), np.zeros(CFG.n_out), b)
        assert p == pytest.approx(float(b["trunk.head_p.bias"]))
        assert f == pytest.approx(1 / (1 + math.exp(-float(b["trunk.head_f.bias"]))))

    def test_fourier_embedding_shape_and_values(self):
        z = np.array([0.25, 0.5, 1.0])
        emb = fourier_embed(z, 6)
        assert emb.shape == (39,)
        assert (emb[:3] == z).all()
        # k = 0 block: sin/cos of 2 pi z
        assert emb[3] == pytest.approx(math.sin(2 * math.pi * 0.25))
        assert emb[6] == pytest.approx(math.cos(2 * math.pi * 0.25))

    def test_scalar_reference_expansion(self):
        # independent scalar recomputation of the whole trunk pass
        bundle = seeded_bundle(CFG, seed=9)
        g = np.random.default_rng(4).standard_normal(CFG.n_out)
        q = np.array([0.21, 0.55, 0.83])
        p_vec, f_vec = trunk_forward(q, g, bundle)
        p_ref, f_ref = scalar_trunk_reference(q, g, bundle)
        assert p_vec == pytest.approx(p_ref, rel=1e-10)
        assert f_vec == pytest.approx(f_ref, rel=1e-10)


def scalar_trunk_reference(q, g, bundle):
    """Plain-python expansion of the gated trunk for one query."""
    cfg = bundle.config
    # layout per frequency block: [sin(2 pi 2^k z), cos(2 pi 2^k z)] after the raw coords
    emb = list(q)
    for k in range(cfg.n_freq):
        for zi in q:
            emb.append(math.sin(2.0 * math.pi * (2.0 ** k) * zi))
        for zi in q:
            emb.append(math.cos(2.0 * math.pi * (2.0 ** k) * zi))
    W = bundle["trunk.encoder.weight"].astype(float)
    b = bundle["trunk.encoder.bias"].astype(float)
    z = [sum(W[i, j] * emb[j] for j in range(len(emb))) + b[i] for i in range(cfg.n_out)]
    for l in range(cfg.trunk_layers):
        a = bundle[f"trunk.gates.{l}.a"].astype(float)
        bg = bundle[f"trunk.gates.{l}.b"].astype(float)
        h = [0.5 * (z[i] * (a[i] * g[i] + bg[i])) *
             (1.0 + math.erf(z[i] * (a[i] * g[i] + bg[i]) / math.sqrt(2.0)))
             for i in range(cfg.n_out)]
        if l < cfg.trunk_layers - 1:
            Wl = bundle[f"trunk.layers.{l}.weight"].astype(float)
            bl = bundle[f"trunk.layers.{l}.bias"].astype(float)
            z = [sum(Wl[i, j] * h[j] for j in range(cfg.n_out)) + bl[i]
                 for i in range(cfg.n_out)]
    half = cfg.n_out // 2
    wp = bundle["trunk.head_p.weight"].astype(float)
    wf = bundle["trunk.head_f.weight"].astype(float)
    p = sum(wp[i] * h[i] for i in range(half)) + float(bundle["trunk.head_p.bias"])
    s = sum(wf[i] * h[half + i] for i in range(half)) + float(bundle["trunk.head_f.bias"])
    return p, 1.0 / (1.0 + math.exp(-s))


class TestGelu:
    def test_exact_form_matches_cdf(self):
        from scipy.stats import norm
        x = np.linspace(-4, 4, 41)
        assert np.allclose(gelu(x, "exact"), x * norm.cdf(x), atol=1e-12)

    def test_tanh_form_close_but_distinct(self):
        x = np.linspace(-3, 3, 31)
        e = gelu(x, "exact")
        t = gelu(x, "tanh")
        assert np.abs(e - t).max() < 5e-3
        assert not np.allclose(e, t, atol=1e-8)


class TestPredictMasking:
    def test_mask_open_and_closed(self):
        bundle = seeded_bundle(CFG, seed=11)
        rng = np.random.default_rng(5)
        log_K = rng.standard_normal((16, 16))
        phi = np.full((16, 16), 0.7)
        q = rng.uniform(0, 1, size=(200, 3)) * np.array(CFG.coord_scale)
        p, f = surrogate_predict(log_K, phi, scalars_example(), q, bundle)
        assert ((f > 0) & (f < 1)).all()
        closed = f <= CFG.mask_threshold
        assert (p[closed] == 0.0).all()
        if (~closed).any():
            assert (p[~closed] != 0.0).any()

    def test_threshold_near_zero_keeps_everything(self):
        cfg = desk_config(grid_shape=(16, 16), n_out=8, scalar_widths=(6, 6, 6),
                          channels=(4, 4, 6, 6, 8), mask_threshold=1e-12)
        bundle = seeded_bundle(cfg, seed=11)
        rng = np.random.default_rng(5)
        q = rng.uniform(0, 1, size=(50, 3)) * np.array(cfg.coord_scale)
        p, f = surrogate_predict(rng.standard_normal((16, 16)), np.full((16, 16), 0.7),
                                 scalars_example(), q, bundle)
        # sigmoid output is strictly positive, so no query is masked
        assert (f > 1e-12).all()

    def test_permutation_equivariance(self):
        bundle = seeded_bundle(CFG, seed=12)
        rng = np.random.default_rng(6)
        log_K = rng.standard_normal((16, 16))
        phi = np.full((16, 16), 0.7)
        q = rng.uniform(0, 1, size=(40, 3)) * np.array(CFG.coord_scale)
        perm = rng.permutation(40)
        p1, f1 = surrogate_predict(log_K, phi, scalars_example(), q, bundle)
        p2, f2 = surrogate_predict(log_K, phi, scalars_example(), q[perm], bundle)
        assert (p2 == p1[perm]).all() and (f2 == f1[perm]).all()


class TestForwardMap:
    def test_deterministic_and_length(self):
        from frontflow.deeponet import surrogate_forward_map
        grid = RegularGrid(16, 16, 0.3, 0.3)
        prior = default_prior(grid)
        bundle = seeded_bundle(CFG, seed=13)
        u = sample_prior(prior, seed=1)
        for M, times in ((3, [10.0, 20.0]), (5, [5.0, 15.0, 60.0])):
            sensors = np.column_stack([np.linspace(0.05, 0.25, M), np.full(M, 0.15)])
            oc = ObservationConfig(sensors=sensors, times=times)
            v1 = surrogate_forward_map(u, prior, oc, bundle)
            v2 = surrogate_forward_map(u, prior, oc, bundle)
            assert v1.shape == (M * len(times),)
            assert (v1 == v2).all()
