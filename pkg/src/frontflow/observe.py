"""Sensor observation operator, noise model and measurement file handling.

Measurements are pressures at the mesh nodes nearest to the sensor positions,
collected at the configured observation times and flattened time-major (all
sensors at t_1, then all sensors at t_2, ...).
"""

from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import mesh as msh
from .cvfem import SimulationRecord
from .rng import substream


@dataclass(frozen=True)
class ObservationConfig:
    sensors: np.ndarray    # (M, 2) coordinates in metres
    times: np.ndarray      # (N,) strictly increasing observation instants
    sigma0: float = 0.025  # relative noise level
    floor: float = 100.0   # Pa, minimum signal for the variance model

    def __post_init__(self):
        object.__setattr__(self, "sensors", np.atleast_2d(np.asarray(self.sensors, float)))
        object.__setattr__(self, "times", np.asarray(self.times, float))
        if self.sensors.shape[0] < 1 or self.sensors.shape[1] != 2:
            raise ValueError("need at least one sensor with (x, y) coordinates")
        if self.times.size < 1 or (np.diff(self.times) <= 0).any() or self.times[0] < 0:
            raise ValueError("observation times must be strictly increasing and non-negative")
        if self.sigma0 <= 0 or self.floor <= 0:
            raise ValueError("sigma0 and floor must be positive")

    @property
    def M(self) -> int:
        return self.sensors.shape[0]

    @property
    def N(self) -> int:
        return self.times.size


@dataclass
class MeasurementVector:
    values: np.ndarray      # (M*N,) pressures, time-major
    gamma_diag: np.ndarray  # (M*N,) noise variances

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        self.gamma_diag = np.asarray(self.gamma_diag, float)
        if self.values.shape != self.gamma_diag.shape:
            raise ValueError("values and gamma_diag must have equal length")
        if (self.gamma_diag <= 0).any():
            raise ValueError("noise variances must be positive")


def default_times(count: int = 34, t_max: float = 110.0) -> np.ndarray:
    """Uniformly spaced observation schedule over (0, t_max]."""
    return t_max * np.arange(1, count + 1) / count


def sensor_nodes(config: ObservationConfig, mesh: msh.Mesh) -> np.ndarray:
    """Mesh node nearest to each sensor (ties resolved to the lowest index)."""
    Dx, Dy = mesh.domain_size
    s = config.sensors
    if (s[:, 0] < 0).any() or (s[:, 0] > Dx).any() or (s[:, 1] < 0).any() or (s[:, 1] > Dy).any():
        raise ValueError("sensor outside the mesh domain")
    d2 = ((mesh.nodes[None, :, :] - s[:, None, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def noise_covariance(noise_free: np.ndarray, sigma0: float, floor: float) -> np.ndarray:
    """Diagonal variances (sigma0 * max(value, floor))^2."""
    if sigma0 <= 0 or floor <= 0:
        raise ValueError("sigma0 and floor must be positive")
    return (sigma0 * np.maximum(np.asarray(noise_free, float), floor)) ** 2


def observe(record: SimulationRecord, config: ObservationConfig, mesh: msh.Mesh) -> MeasurementVector:
    """Noise-free sensor extraction from a simulation record."""
    nodes = sensor_nodes(config, mesh)
    t_idx = []
    for t in config.times:
        hits = np.flatnonzero(np.isclose(record.times, t, rtol=1e-12, atol=1e-12))
        if hits.size == 0:
            raise ValueError(f"record does not contain observation time {t}")
        t_idx.append(hits[0])
    values = record.pressure[np.asarray(t_idx)][:, nodes].ravel()
    return MeasurementVector(values=values,
                             gamma_diag=noise_covariance(values, config.sigma0, config.floor))


def synthesize_data(truth_record: SimulationRecord, config: ObservationConfig,
                    mesh: msh.Mesh, seed: int) -> MeasurementVector:
    """Noise-free observation plus centred Gaussian perturbations."""
    clean = observe(truth_record, config, mesh)
    rng = substream(seed, "observe/noise")
    noisy = clean.values + rng.standard_normal(clean.values.size) * np.sqrt(clean.gamma_diag)
    return MeasurementVector(values=noisy, gamma_diag=clean.gamma_diag)


def default_layouts(domain: tuple = (0.3, 0.3)) -> dict:
    """Built-in sensor layouts.

    grid100: 10x10 sensors at interior cell centres. sparse23: the bundled
    23-sensor layout (staggered 5-4-5-4-5 rows), replaceable via a layout file.
    """
    Dx, Dy = domain
    xs = (np.arange(10) + 0.5) * Dx / 10
    ys = (np.arange(10) + 0.5) * Dy / 10
    X, Y = np.meshgrid(xs, ys)
    grid100 = np.column_stack([X.ravel(), Y.ravel()])
    with resources.files("frontflow.data").joinpath("sensors_23.csv").open("rb") as fh:
        sparse23 = read_sensor_layout(fh)
    scale = np.array([Dx / 0.3, Dy / 0.3])
    return {"grid100": grid100, "sparse23": sparse23 * scale}


def read_sensor_layout(path_or_fh) -> np.ndarray:
    data = np.genfromtxt(path_or_fh, delimiter=",", names=True)
    data = np.atleast_1d(data)
    order = np.argsort(data["sensor_id"])
    return np.column_stack([data["x_m"][order], data["y_m"][order]])


def write_sensor_layout(sensors: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sensor_id,x_m,y_m\n")
        for i, (x, y) in enumerate(sensors):
            fh.write(f"{i},{x:.17g},{y:.17g}\n")


def write_measurements(m: MeasurementVector, config: ObservationConfig, path) -> None:
    """Measurement CSV: one row per (time, sensor), written time-major."""
    M = config.M
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time_s,sensor_id,pressure_Pa\n")
        for n, t in enumerate(config.times):
            for s in range(M):
                fh.write(f"{t:.17g},{s},{m.values[n * M + s]:.17g}\n")


def read_measurements(path, config: ObservationConfig) -> MeasurementVector:
    """Ingest a measurement CSV, which may carry higher-rate data: for each
    configured time the sample with the nearest timestamp is selected."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    M = config.M
    sensor_ids = data["sensor_id"].astype(int)
    if sensor_ids.max() + 1 < M:
        raise ValueError(f"measurement file has {sensor_ids.max() + 1} sensors, config expects {M}")
    values = np.empty(config.N * M)
    for s in range(M):
        rows = sensor_ids == s
        if not rows.any():
            raise ValueError(f"no measurements for sensor {s}")
        ts = data["time_s"][rows]
        ps = data["pressure_Pa"][rows]
        for n, t in enumerate(config.times):
            k = np.abs(ts - t).argmin()
            values[n * M + s] = ps[k]
    return MeasurementVector(values=values,
                             gamma_diag=noise_covariance(values, config.sigma0, config.floor))
