import numpy as np
import pytest

from frontflow.cvfem import SimulationRecord
from frontflow.mesh import generate_structured_mesh
from frontflow.observe import (MeasurementVector, ObservationConfig, default_layouts,
                               default_times, noise_covariance, observe, read_measurements,
                               read_sensor_layout, synthesize_data, write_measurements,
                               write_sensor_layout)


def record_for(mesh, times, pressure=None, fill=None):
    n = mesh.n_nodes
    times = np.asarray(times, float)
    if pressure is None:
        pressure = np.outer(1 + times, np.linspace(0, 1, n)) * 1e4
    if fill is None:
        fill = np.ones((times.size, n))
    return SimulationRecord(times=times, pressure=pressure, fill=fill,
                            event_times=np.array([]), event_nodes=np.array([], dtype=int),
                            fill_complete_time=None)


class TestObserve:
    def test_sensor_on_node(self):
        mesh = generate_structured_mesh(5, 5, (0.4, 0.4))
        rec = record_for(mesh, [1.0])
        config = ObservationConfig(sensors=[(0.2, 0.2)], times=[1.0])
        m = observe(rec, config, mesh)
        node = np.flatnonzero((mesh.nodes == (0.2, 0.2)).all(axis=1))[0]
        assert m.values[0] == rec.pressure[0, node]

    def test_time_major_ordering(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0, 2.0])
        config = ObservationConfig(sensors=[(0.5, 0.5)], times=[1.0, 2.0])
        m = observe(rec, config, mesh)
        assert m.values.shape == (2,)
        node = ((mesh.nodes - (0.5, 0.5)) ** 2).sum(1).argmin()
        assert m.values[0] == rec.pressure[0, node]
        assert m.values[1] == rec.pressure[1, node]

    def test_two_sensors_block_layout(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0, 2.0])
        config = ObservationConfig(sensors=[(0.1, 0.1), (0.9, 0.9)], times=[1.0, 2.0])
        m = observe(rec, config, mesh)
        # ordering: both sensors at t1, then both at t2
        swapped = ObservationConfig(sensors=[(0.9, 0.9), (0.1, 0.1)], times=[1.0, 2.0])
        m2 = observe(rec, swapped, mesh)
        assert m.values[0] == m2.values[1] and m.values[1] == m2.values[0]
        assert m.values[2] == m2.values[3] and m.values[3] == m2.values[2]

    def test_sensor_outside_domain(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0])
        config = ObservationConfig(sensors=[(1.5, 0.5)], times=[1.0])
        with pytest.raises(ValueError, match="outside"):
            observe(rec, config, mesh)

    def test_missing_time_rejected(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0])
        config = ObservationConfig(sensors=[(0.5, 0.5)], times=[2.0])
        with pytest.raises(ValueError, match="does not contain"):
            observe(rec, config, mesh)

    def test_linearity_in_pressures(self):
        mesh = generate_structured_mesh(5, 5, (1, 1))
        rec = record_for(mesh, [1.0])
        config = ObservationConfig(sensors=[(0.3, 0.7), (0.8, 0.2)], times=[1.0])
        m1 = observe(rec, config, mesh)
        rec2 = record_for(mesh, [1.0], pressure=2.0 * rec.pressure)
        m2 = observe(rec2, config, mesh)
        assert np.allclose(m2.values, 2 * m1.values)


class TestNoiseCovariance:
    def test_below_floor(self):
        assert noise_covariance(np.array([50.0]), 0.025, 100.0)[0] == pytest.approx(6.25)

    def test_above_floor(self):
        assert noise_covariance(np.array([1e4]), 0.025, 100.0)[0] == pytest.approx(250.0 ** 2)

    def test_floor_activation_boundary(self):
        at = noise_covariance(np.array([100.0]), 0.025, 100.0)[0]
        below = noise_covariance(np.array([10.0]), 0.025, 100.0)[0]
        assert at == below == pytest.approx(6.25)

    def test_elementwise_lower_bound(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(-100, 1e5, 500)
        g = noise_covariance(v, 0.025, 100.0)
        assert (g >= (0.025 * 100.0) ** 2 - 1e-12).all()


class TestSynthesizeData:
    def test_vanishing_noise(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0, 2.0])
        config = ObservationConfig(sensors=[(0.5, 0.5)], times=[1.0, 2.0], sigma0=1e-12)
        clean = observe(rec, config, mesh)
        noisy = synthesize_data(rec, config, mesh, seed=1)
        assert np.abs(noisy.values - clean.values).max() < 1e-6

    def test_noise_scale(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0])
        config = ObservationConfig(sensors=[(0.5, 0.5)], times=[1.0])
        clean = observe(rec, config, mesh)
        draws = np.array([synthesize_data(rec, config, mesh, seed=s).values[0]
                          for s in range(10_000)])
        sd_true = np.sqrt(clean.gamma_diag[0])
        se = sd_true / np.sqrt(2 * (10_000 - 1))
        assert abs(draws.std(ddof=1) - sd_true) < 3 * se

    def test_seed_determinism(self):
        mesh = generate_structured_mesh(4, 4, (1, 1))
        rec = record_for(mesh, [1.0, 2.0])
        config = ObservationConfig(sensors=[(0.2, 0.8)], times=[1.0, 2.0])
        a = synthesize_data(rec, config, mesh, seed=5)
        b = synthesize_data(rec, config, mesh, seed=5)
        assert (a.values == b.values).all()


class TestLayouts:
    def test_grid100_cell_centres(self):
        layouts = default_layouts((0.3, 0.3))
        g = layouts["grid100"]
        assert g.shape == (100, 2)
        assert np.allclose(g[0], (0.015, 0.015))
        assert len(np.unique(g[:, 0])) == 10
        assert len(np.unique(g[:, 1])) == 10

    def test_all_strictly_inside(self):
        for name, s in default_layouts((0.3, 0.3)).items():
            assert (s > 0).all() and (s[:, 0] < 0.3).all() and (s[:, 1] < 0.3).all(), name

    def test_sparse23_count(self):
        assert default_layouts((0.3, 0.3))["sparse23"].shape == (23, 2)

    def test_layout_round_trip(self, tmp_path):
        s = default_layouts((0.3, 0.3))["sparse23"]
        path = tmp_path / "layout.csv"
        write_sensor_layout(s, path)
        back = read_sensor_layout(path)
        assert (back == s).all()


class TestMeasurementFiles:
    def test_round_trip(self, tmp_path):
        mesh = generate_structured_mesh(5, 5, (1, 1))
        rec = record_for(mesh, [1.0, 2.0, 3.0])
        config = ObservationConfig(sensors=[(0.2, 0.2), (0.8, 0.8)], times=[1.0, 2.0, 3.0])
        m = synthesize_data(rec, config, mesh, seed=2)
        path = tmp_path / "meas.csv"
        write_measurements(m, config, path)
        back = read_measurements(path, config)
        assert (back.values == m.values).all()
        assert np.allclose(back.gamma_diag, noise_covariance(m.values, config.sigma0,
                                                             config.floor))

    def test_nearest_timestamp_selection(self, tmp_path):
        # 10 Hz file, sparse configured times: nearest sample wins
        path = tmp_path / "hi_rate.csv"
        with open(path, "w") as fh:
            fh.write("time_s,sensor_id,pressure_Pa\n")
            for k in range(100):
                t = 0.1 * k
                fh.write(f"{t},0,{100.0 * k}\n")
        config = ObservationConfig(sensors=[(0.5, 0.5)], times=[1.02, 5.04])
        m = read_measurements(path, config)
        assert m.values[0] == pytest.approx(100.0 * 10)
        assert m.values[1] == pytest.approx(100.0 * 50)

    def test_missing_sensor_rejected(self, tmp_path):
        path = tmp_path / "meas.csv"
        path.write_text("time_s,sensor_id,pressure_Pa\n1.0,0,5.0\n")
        config = ObservationConfig(sensors=[(0.5, 0.5), (0.2, 0.2)], times=[1.0])
        with pytest.raises(ValueError):
            read_measurements(path, config)


def test_default_times_schedule():
    t = default_times(34, 110.0)
    assert t.size == 34
    assert t[0] == pytest.approx(110.0 / 34)
    assert t[-1] == pytest.approx(110.0)
    assert (np.diff(t) > 0).all()


def test_measurement_vector_validation():
    with pytest.raises(ValueError):
        MeasurementVector(values=np.ones(3), gamma_diag=np.ones(2))
    with pytest.raises(ValueError):
        MeasurementVector(values=np.ones(3), gamma_diag=np.array([1.0, -1.0, 2.0]))
