"""Priors and realisation of log-permeability / porosity fields.

The material unknowns are six random fields (a 2D level-set field L, three 2D
log-permeability fields and two 1D boundary-strip width fields xi) plus ten
scalars. Thresholding L above ``level_threshold`` carves out central defect
regions; positive xi widths carve out high-permeability strips along the top
and bottom edges, which take precedence over the level set.
"""

import struct
import threading
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import cholesky as dense_cholesky
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .grid import RegularGrid
from .rng import substream

# Region labels, also the 8-bit codes used in FLD1 files.
LABEL_NOM = 0
LABEL_DEF = 1
LABEL_RT_T = 2
LABEL_RT_B = 3

SCALAR_NAMES = ("K_nom", "phi_T", "phi_B", "phi_nom", "phi_def",
                "mu", "P_I", "lam", "beta", "chi")
FIELD_NAMES = ("L", "logK_T", "logK_B", "logK_def", "xi_T", "xi_B")


@dataclass(frozen=True)
class MaternSpec:
    """Isotropic Matern covariance: amplitude sigma, length ell, smoothness nu."""
    sigma: float
    ell: float
    nu: float
    mean: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.ell <= 0 or self.nu <= 0:
            raise ValueError("sigma, ell and nu must be positive")


@dataclass(frozen=True)
class PriorSpec:
    scalar_ranges: dict       # name -> (a, b), all of SCALAR_NAMES
    field_specs: dict         # name -> MaternSpec, all of FIELD_NAMES
    baseline_ranges: dict     # region in {T, B, def} -> uniform range of the baseline K0
    level_threshold: float = 1.0
    grid: RegularGrid = field(default_factory=lambda: RegularGrid(120, 120, 0.3, 0.3))
    n_boundary: int = 120

    def __post_init__(self):
        for name in SCALAR_NAMES:
            if name not in self.scalar_ranges:
                raise ValueError(f"missing scalar range for {name}")
            a, b = self.scalar_ranges[name]
            if not a < b:
                raise ValueError(f"empty range for {name}")
        for name in FIELD_NAMES:
            if name not in self.field_specs:
                raise ValueError(f"missing field spec for {name}")
        for region in ("T", "B", "def"):
            a, b = self.baseline_ranges[region]
            if not a < b:
                raise ValueError(f"empty baseline range for region {region}")
        if not np.isfinite(self.level_threshold):
            raise ValueError("level threshold must be finite")

    @cached_property
    def boundary_xs(self) -> np.ndarray:
        return np.linspace(0.0, self.grid.Dx, self.n_boundary)


def default_prior(grid: RegularGrid | None = None, n_boundary: int | None = None) -> PriorSpec:
    """Prior with the production hyperparameter set on a 120x120 grid by default."""
    grid = grid or RegularGrid(120, 120, 0.3, 0.3)
    Dx = grid.Dx
    scalar_ranges = {
        "K_nom": (2e-10, 6.5e-10),      # m^2
        "phi_T": (0.9, 0.96),
        "phi_B": (0.9, 0.96),
        "phi_nom": (0.6, 0.8),
        "phi_def": (0.55, 0.7),
        "mu": (0.085, 0.12),            # Pa.s
        "P_I": (92e3, 120e3),           # Pa
        "lam": (0.6, 1.25),
        "beta": (0.2, 0.7),
        "chi": (0.35, 0.75),
    }
    field_specs = {
        "L": MaternSpec(sigma=1.0, ell=0.075 * Dx, nu=2.0),
        "logK_T": MaternSpec(sigma=0.3, ell=0.1 * Dx, nu=2.0),
        "logK_B": MaternSpec(sigma=0.3, ell=0.1 * Dx, nu=2.0),
        "logK_def": MaternSpec(sigma=0.3, ell=0.1 * Dx, nu=2.0),
        "xi_T": MaternSpec(sigma=0.0135, ell=0.15 * Dx, nu=1.5),
        "xi_B": MaternSpec(sigma=0.0135, ell=0.15 * Dx, nu=1.5),
    }
    baseline_ranges = {
        "T": (2.0e-9, 5.0e-9),
        "B": (2.0e-9, 5.0e-9),
        "def": (2.5e-11, 2.5e-10),
    }
    return PriorSpec(scalar_ranges=scalar_ranges, field_specs=field_specs,
                     baseline_ranges=baseline_ranges, level_threshold=1.0,
                     grid=grid, n_boundary=n_boundary if n_boundary is not None else grid.nx)


@dataclass
class ParameterVector:
    """All unknowns of one inversion draw: six field arrays plus ten scalars."""
    L: np.ndarray         # (ny, nx)
    logK_T: np.ndarray    # (ny, nx)
    logK_B: np.ndarray    # (ny, nx)
    logK_def: np.ndarray  # (ny, nx)
    xi_T: np.ndarray      # (n_boundary,)
    xi_B: np.ndarray      # (n_boundary,)
    scalars: dict         # SCALAR_NAMES -> float

    def field_arrays(self):
        return (self.L, self.logK_T, self.logK_B, self.logK_def, self.xi_T, self.xi_B)

    def scalar_array(self) -> np.ndarray:
        return np.array([self.scalars[n] for n in SCALAR_NAMES])

    def validate(self, prior: PriorSpec) -> None:
        shape = prior.grid.shape
        for name, arr in zip(("L", "logK_T", "logK_B", "logK_def"), self.field_arrays()[:4]):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        for name, arr in (("xi_T", self.xi_T), ("xi_B", self.xi_B)):
            if arr.shape != (prior.n_boundary,):
                raise ValueError(f"{name} has length {arr.shape}, expected {prior.n_boundary}")
        for name in SCALAR_NAMES:
            a, b = prior.scalar_ranges[name]
            v = self.scalars[name]
            if not (a < v < b):
                raise ValueError(f"scalar {name}={v} outside its prior support ({a}, {b})")


@dataclass
class FieldPair:
    """Physical nodal fields on a regular grid plus the realised region labels."""
    log_K: np.ndarray          # (ny, nx), natural log of permeability in m^2
    phi: np.ndarray            # (ny, nx), porosity in (0, 1)
    region_labels: np.ndarray  # (ny, nx) uint8 in {LABEL_NOM, LABEL_DEF, LABEL_RT_T, LABEL_RT_B}
    grid: RegularGrid


def matern_covariance(r, spec: MaternSpec):
    """C(r) = sigma^2 2^(1-nu) / Gamma(nu) * (sqrt(2 nu) r / ell)^nu K_nu(sqrt(2 nu) r / ell).

    The r = 0 limit is sigma^2.
    """
    r = np.asarray(r, dtype=float)
    scaled = np.sqrt(2.0 * spec.nu) * r / spec.ell
    out = np.full(scaled.shape, spec.sigma ** 2)
    # below ~1e-8 the kernel equals sigma^2 to round-off; avoids 0*inf at r -> 0
    mask = scaled > 1e-8
    s = scaled[mask]
    pref = spec.sigma ** 2 * 2.0 ** (1.0 - spec.nu) / gamma_fn(spec.nu)
    out[mask] = pref * s ** spec.nu * kv(spec.nu, s)
    return out if out.ndim else float(out)


class CovarianceFactorisationError(RuntimeError):
    pass


_JITTER0 = 1e-10
_MAX_JITTER_DOUBLINGS = 8


def _jittered_cholesky(C: np.ndarray, sigma: float) -> np.ndarray:
    """Lower Cholesky factor of C + jitter*I, starting at 1e-10*sigma^2 and
    doubling the jitter up to 8 times before giving up."""
    jitter = _JITTER0 * sigma ** 2
    for _ in range(_MAX_JITTER_DOUBLINGS + 1):
        try:
            A = C.copy()
            A[np.diag_indices_from(A)] += jitter
            return dense_cholesky(A, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    cond = float(np.linalg.cond(C + jitter * np.eye(C.shape[0])))
    raise CovarianceFactorisationError(
        f"Cholesky failed after {_MAX_JITTER_DOUBLINGS} jitter doublings "
        f"(condition estimate {cond:.3e})")


_chol_cache: dict = {}
_chol_lock = threading.Lock()


def _points_key(points: np.ndarray) -> bytes:
    return np.ascontiguousarray(points, dtype=np.float64).tobytes()


def _cholesky_for(spec: MaternSpec, points: np.ndarray) -> np.ndarray:
    key = (spec.sigma, spec.ell, spec.nu, _points_key(points))
    got = _chol_cache.get(key)
    if got is not None:
        return got
    if points.ndim == 1:
        pts = points[:, None]
    else:
        pts = points
    diff = pts[:, None, :] - pts[None, :, :]
    r = np.sqrt((diff ** 2).sum(-1))
    C = matern_covariance(r, replace(spec, mean=0.0))
    L = _jittered_cholesky(C, spec.sigma)
    with _chol_lock:
        _chol_cache[key] = L
    return L


def _grid_cholesky(spec: MaternSpec, grid: RegularGrid) -> np.ndarray:
    """Cholesky factor of the covariance over all grid points.

    Stationarity on a regular grid means only (|di|, |dj|) offsets matter, so
    only nx*ny kernel values are ever evaluated.
    """
    key = (spec.sigma, spec.ell, spec.nu, grid)
    got = _chol_cache.get(key)
    if got is not None:
        return got
    di = np.arange(grid.nx)[None, :] * grid.dx
    dj = np.arange(grid.ny)[:, None] * grid.dy
    ktable = matern_covariance(np.hypot(di, dj), replace(spec, mean=0.0))
    ix = np.tile(np.arange(grid.nx, dtype=np.int32), grid.ny)
    iy = np.repeat(np.arange(grid.ny, dtype=np.int32), grid.nx)
    C = ktable[np.abs(iy[:, None] - iy[None, :]), np.abs(ix[:, None] - ix[None, :])]
    L = _jittered_cholesky(C, spec.sigma)
    with _chol_lock:
        _chol_cache[key] = L
    return L


def sample_grf(spec: MaternSpec, points: np.ndarray, seed: int, n_draws: int = 1,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw Gaussian random field values at ``points`` (n,) or (n, d).

    Returns shape (n,) for a single draw, else (n_draws, n). Deterministic per
    seed via a counter-based generator.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    L = _cholesky_for(spec, points)
    if rng is None:
        rng = substream(seed, "grf")
    z = rng.standard_normal((n, n_draws))
    out = spec.mean + (L @ z).T
    return out[0] if n_draws == 1 else out


def _sample_grf_on_grid(spec: MaternSpec, grid: RegularGrid, rng: np.random.Generator) -> np.ndarray:
    L = _grid_cholesky(spec, grid)
    z = rng.standard_normal(L.shape[0])
    return (spec.mean + L @ z).reshape(grid.shape)


def sample_prior(prior: PriorSpec, seed: int) -> ParameterVector:
    """One joint prior draw: uniform scalars, Matern fields, hierarchical
    log-permeability baselines. All components use independent named substreams."""
    scalars = {}
    for name in SCALAR_NAMES:
        a, b = prior.scalar_ranges[name]
        scalars[name] = float(substream(seed, f"scalar/{name}").uniform(a, b))

    grids = {}
    for name in ("L",):
        grids[name] = _sample_grf_on_grid(prior.field_specs[name], prior.grid,
                                          substream(seed, f"field/{name}"))
    for name, region in (("logK_T", "T"), ("logK_B", "B"), ("logK_def", "def")):
        a, b = prior.baseline_ranges[region]
        k0 = substream(seed, f"baseline/{region}").uniform(a, b)
        spec = replace(prior.field_specs[name], mean=float(np.log(k0)))
        grids[name] = _sample_grf_on_grid(spec, prior.grid, substream(seed, f"field/{name}"))

    xs = prior.boundary_xs
    xi = {}
    for name in ("xi_T", "xi_B"):
        xi[name] = sample_grf(prior.field_specs[name], xs, seed,
                              rng=substream(seed, f"field/{name}"))

    return ParameterVector(L=grids["L"], logK_T=grids["logK_T"], logK_B=grids["logK_B"],
                           logK_def=grids["logK_def"], xi_T=xi["xi_T"], xi_B=xi["xi_B"],
                           scalars=scalars)


def region_labels(L: np.ndarray, xi_T: np.ndarray, xi_B: np.ndarray,
                  prior: PriorSpec, grid: RegularGrid) -> np.ndarray:
    """Label every grid point.

    Strip membership wins over the level set; negative strip widths clamp to
    zero (empty strip). xi is interpolated piecewise-linearly in x.
    """
    xs_b = prior.boundary_xs
    wT = np.clip(np.interp(grid.xs, xs_b, xi_T), 0.0, None)
    wB = np.clip(np.interp(grid.xs, xs_b, xi_B), 0.0, None)
    y = grid.ys[:, None]
    in_top = y > grid.Dy - wT[None, :]
    in_bot = y < wB[None, :]
    in_def = L > prior.level_threshold
    labels = np.full(grid.shape, LABEL_NOM, dtype=np.uint8)
    labels[in_def] = LABEL_DEF
    labels[in_bot] = LABEL_RT_B
    labels[in_top] = LABEL_RT_T
    return labels


def realise_fields(u: ParameterVector, prior: PriorSpec,
                   grid: RegularGrid | None = None) -> FieldPair:
    """Map one parameter draw to the physical (log K, phi) fields."""
    grid = grid or prior.grid
    if u.L.shape != grid.shape:
        raise ValueError(f"parameter fields on {u.L.shape}, grid is {grid.shape}")
    labels = region_labels(u.L, u.xi_T, u.xi_B, prior, grid)
    s = u.scalars
    log_K = np.where(labels == LABEL_RT_T, u.logK_T,
                     np.where(labels == LABEL_RT_B, u.logK_B,
                              np.where(labels == LABEL_DEF, u.logK_def, np.log(s["K_nom"]))))
    phi = np.choose(labels, [s["phi_nom"], s["phi_def"], s["phi_T"], s["phi_B"]])
    return FieldPair(log_K=log_K, phi=phi, region_labels=labels, grid=grid)


def inlet_pressure(t, P_I: float, lam: float, beta: float, chi: float):
    """Ramped inlet pressure chi*P_I + (P_I - chi*P_I) * (1 - exp(-(t/lam)^beta))."""
    t = np.asarray(t, dtype=float)
    p = chi * P_I + (P_I - chi * P_I) * (1.0 - np.exp(-((t / lam) ** beta)))
    return float(p) if p.ndim == 0 else p


# Benchmark truth geometry. The strip permeabilities and widths follow the
# reference configuration; inclusion centres and sizes are configuration with
# these defaults, recorded in output manifests.
TRUTH_SCALARS = {"mu": 0.092, "P_I": 109120.0, "lam": 1.114, "beta": 0.42, "chi": 0.66}
TRUTH_DEFAULTS = {
    "K_nom": 4e-10, "phi_nom": 0.73,
    "circle": {"cx": 0.15, "cy": 0.15, "radius": 0.04, "K": 1.2e-10, "phi": 0.62},
    "rect": {"x0": 0.18, "x1": 0.26, "y0": 0.05, "y1": 0.10, "K": 4e-11, "phi": 0.62},
    # (side, x_from, x_to, width, K); strips A and C share the top edge
    "strips": [
        {"name": "A", "side": "top", "x0": 0.0, "x1": 0.15, "width": 0.0075, "K": 2.5e-9},
        {"name": "B", "side": "bottom", "x0": 0.0, "x1": 0.3, "width": 0.015, "K": 4.0e-9},
        {"name": "C", "side": "top", "x0": 0.15, "x1": 0.3, "width": 0.0075, "K": 4.0e-9},
    ],
    "phi_RT": 0.91,
}


def build_synthetic_truth(grid: RegularGrid | None = None,
                          geometry: dict | None = None) -> tuple[FieldPair, dict]:
    """Benchmark ground truth: piecewise-constant inclusions and edge strips.

    Returns the field pair on ``grid`` plus the flow scalars. The geometry dict
    can override any TRUTH_DEFAULTS entry.
    """
    grid = grid or RegularGrid(120, 120, 0.3, 0.3)
    geo = dict(TRUTH_DEFAULTS)
    if geometry:
        geo.update(geometry)

    X, Y = np.meshgrid(grid.xs, grid.ys)
    log_K = np.full(grid.shape, np.log(geo["K_nom"]))
    phi = np.full(grid.shape, geo["phi_nom"])
    labels = np.full(grid.shape, LABEL_NOM, dtype=np.uint8)

    c = geo["circle"]
    in_circle = (X - c["cx"]) ** 2 + (Y - c["cy"]) ** 2 < c["radius"] ** 2
    log_K[in_circle] = np.log(c["K"])
    phi[in_circle] = c["phi"]
    labels[in_circle] = LABEL_DEF

    r = geo["rect"]
    in_rect = (X >= r["x0"]) & (X <= r["x1"]) & (Y >= r["y0"]) & (Y <= r["y1"])
    log_K[in_rect] = np.log(r["K"])
    phi[in_rect] = r["phi"]
    labels[in_rect] = LABEL_DEF

    for strip in geo["strips"]:
        in_x = (X >= strip["x0"]) & (X <= strip["x1"])
        if strip["side"] == "top":
            sel = in_x & (Y > grid.Dy - strip["width"])
            lab = LABEL_RT_T
        else:
            sel = in_x & (Y < strip["width"])
            lab = LABEL_RT_B
        log_K[sel] = np.log(strip["K"])
        phi[sel] = geo["phi_RT"]
        labels[sel] = lab

    scalars = dict(TRUTH_SCALARS)
    return FieldPair(log_K=log_K, phi=phi, region_labels=labels, grid=grid), scalars


# --- FLD1 binary field files ------------------------------------------------
#
# magic 'FLD1'; little-endian float64 header nx, ny, Dx, Dy; then row-major
# float64 log_K, float64 phi, uint8 labels, each of shape (ny, nx).

FLD1_MAGIC = b"FLD1"


class FieldFileError(ValueError):
    pass


def write_field_pair(fp: FieldPair, path) -> None:
    g = fp.grid
    with open(path, "wb") as fh:
        fh.write(FLD1_MAGIC)
        fh.write(struct.pack("<4d", float(g.nx), float(g.ny), g.Dx, g.Dy))
        fh.write(np.ascontiguousarray(fp.log_K, "<f8").tobytes())
        fh.write(np.ascontiguousarray(fp.phi, "<f8").tobytes())
        fh.write(np.ascontiguousarray(fp.region_labels, np.uint8).tobytes())


def read_field_pair(path) -> FieldPair:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLD1_MAGIC:
            raise FieldFileError(f"bad magic {magic!r}, expected {FLD1_MAGIC!r}")
        nxf, nyf, Dx, Dy = struct.unpack("<4d", fh.read(32))
        nx, ny = int(nxf), int(nyf)
        if nx != nxf or ny != nyf or nx < 2 or ny < 2:
            raise FieldFileError("non-integral or invalid grid dimensions")
        count = nx * ny
        log_K = np.frombuffer(fh.read(8 * count), "<f8").reshape(ny, nx)
        phi = np.frombuffer(fh.read(8 * count), "<f8").reshape(ny, nx)
        labels = np.frombuffer(fh.read(count), np.uint8).reshape(ny, nx)
        if log_K.size != count or phi.size != count or labels.size != count:
            raise FieldFileError("truncated field file")
    grid = RegularGrid(nx, ny, Dx, Dy)
    return FieldPair(log_K=log_K.copy(), phi=phi.copy(), region_labels=labels.copy(), grid=grid)
