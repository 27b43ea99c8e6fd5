"""Ensemble Kalman inversion with adaptive tempering and discrepancy damping.

The ensemble moves from prior (s = 0) to posterior (s = 1) in steps of size
1/alpha. Per iteration: evaluate the forward map on every member, pick alpha
from the ensemble data misfit, double it while the damping criterion rejects
the step, clip the final step so the 1/alpha values sum to exactly one, then
apply the perturbed-observation Kalman update. Scalar parameters travel
through a bounded-to-unbounded log-ratio transform so they can never leave
their prior supports; field parameters are updated untransformed.

Updates use the J-column factored form of the cross-covariance, so nothing of
parameter-space dimension squared is ever formed.
"""

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.special import expit

from . import cvfem
from . import fields as flds
from . import mesh as msh
from . import observe as obs
from .binio import checksum64
from .grid import RegularGrid
from .rng import substream


class NonConvergenceError(RuntimeError):
    """Iteration cap reached before the tempering parameter hit 1."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class EkiNumericalError(RuntimeError):
    pass


# --- bounded-parameter transform ---------------------------------------------

def transform(theta, a, b):
    """Map theta in (a, b) to the real line: log((b - theta) / (theta - a))."""
    theta = np.asarray(theta, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if np.any(theta <= a) or np.any(theta >= b):
        raise ValueError("theta must lie strictly inside (a, b)")
    return np.log((b - theta) / (theta - a))


def inverse_transform(zeta, a, b):
    """Inverse of :func:`transform`; maps any finite value back into (a, b).

    The image is kept strictly inside the open interval even where the
    logistic saturates in floating point.
    """
    zeta = np.asarray(zeta, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    out = a + (b - a) * expit(-zeta)
    out = np.clip(out, np.nextafter(a, b), np.nextafter(b, a))
    return float(out) if out.ndim == 0 else out


# --- forward map interface ----------------------------------------------------

_worker_ctx: dict = {}


def _init_worker(payload):
    _worker_ctx.update(payload)


def _eval_member(u):
    ctx = _worker_ctx
    try:
        rec = cvfem.forward_operator(u, ctx["prior"], ctx["mesh"], ctx["obs_times"],
                                     horizon=ctx["T"], p0=ctx["p0"], cv=ctx["cv"])
        return obs.observe(rec, ctx["config"], ctx["mesh"]).values
    except cvfem.SolverError:
        return None


class ForwardMap:
    """Evaluation contract u -> G(u) in R^(M*N).

    kind is "full_model" or "surrogate"; surrogate maps carry the error mean
    and covariance used for likelihood augmentation. A failed member is
    reported as a NaN row by evaluate_batch.
    """

    def __init__(self, evaluate, output_dim, kind="full_model",
                 error_mean=None, error_cov=None, workers=None):
        if kind == "surrogate":
            if error_mean is None or error_cov is None:
                raise ValueError("surrogate forward maps need error_mean and error_cov")
            error_mean = np.asarray(error_mean, float)
            error_cov = np.asarray(error_cov, float)
            if error_mean.shape != (output_dim,) or error_cov.shape != (output_dim,) * 2:
                raise ValueError("surrogate error statistics have the wrong shape")
            if not np.allclose(error_cov, error_cov.T, atol=1e-8 * (1 + np.abs(error_cov).max())):
                raise ValueError("surrogate error covariance must be symmetric")
        elif kind != "full_model":
            raise ValueError(f"unknown forward map kind {kind!r}")
        self.evaluate = evaluate
        self.output_dim = output_dim
        self.kind = kind
        self.error_mean = error_mean
        self.error_cov = error_cov
        self.workers = workers
        self._pool = None
        self._pool_payload = None

    def evaluate_batch(self, members) -> np.ndarray:
        G = np.full((len(members), self.output_dim), np.nan)
        if self._pool is not None:
            for j, values in enumerate(self._pool.map(_eval_member, members, chunksize=1)):
                if values is not None:
                    G[j] = values
            return G
        for j, u in enumerate(members):
            try:
                values = self.evaluate(u)
            except (cvfem.SolverError, FloatingPointError):
                continue
            if values is not None:
                G[j] = values
        return G

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def full_model_forward_map(prior: flds.PriorSpec, mesh, config: obs.ObservationConfig,
                           horizon: float = 110.0, p0: float = 0.0,
                           workers: int | None = None) -> ForwardMap:
    """Forward map running the CVFEM simulator, optionally on a process pool."""
    cv = msh.build_control_volumes(mesh)
    payload = {"prior": prior, "mesh": mesh, "cv": cv, "obs_times": config.times,
               "T": horizon, "p0": p0, "config": config}

    def evaluate(u):
        rec = cvfem.forward_operator(u, prior, mesh, config.times, horizon=horizon, p0=p0, cv=cv)
        return obs.observe(rec, config, mesh).values

    fm = ForwardMap(evaluate, output_dim=config.M * config.N, kind="full_model", workers=workers)
    if workers and workers > 1:
        fm._pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                       initargs=(payload,))
        _init_worker(payload)
    return fm


# --- noise covariance helpers --------------------------------------------------

class _Noise:
    """Gamma as a diagonal vector or a dense SPD matrix, with the square roots
    and samples the algorithm needs. Vectors are applied along the last axis."""

    def __init__(self, gamma):
        gamma = np.asarray(gamma, float)
        self.diag = gamma.ndim == 1
        self.gamma = gamma
        if self.diag:
            if (gamma <= 0).any():
                raise ValueError("noise variances must be positive")
            self._sqrt = np.sqrt(gamma)
        else:
            w, V = eigh(gamma)
            if w.min() <= -1e-10 * max(1.0, w.max()):
                raise ValueError("noise covariance must be positive semidefinite")
            w = np.maximum(w, 1e-14 * max(1.0, w.max()))
            self._half = (V * np.sqrt(w)) @ V.T
            self._inv_half = (V / np.sqrt(w)) @ V.T

    @property
    def n(self):
        return self.gamma.shape[0]

    def dense(self):
        return np.diag(self.gamma) if self.diag else self.gamma

    def half_apply(self, x):
        return x * self._sqrt if self.diag else x @ self._half

    def inv_half_apply(self, x):
        return x / self._sqrt if self.diag else x @ self._inv_half

    def sample(self, rng, n_draws):
        z = rng.standard_normal((n_draws, self.n))
        return z * self._sqrt if self.diag else z @ self._half


# --- core tempered update loop --------------------------------------------------

@dataclass
class EkiHistory:
    alphas: list = dc_field(default_factory=list)
    s_values: list = dc_field(default_factory=list)
    misfits: list = dc_field(default_factory=list)   # mean ||Gamma^-1/2 (d - G_j)||^2 per iteration
    n_failures: int = 0


_MAX_DOUBLINGS = 64


def eki_core(data, gamma, omega0, evaluate_batch, rho=0.65, seed=0,
             max_iterations=100, damping="half"):
    """Tempered EKI on flat, already-transformed coordinates.

    evaluate_batch maps an (J, dim) array to (J, MN) forward values with NaN
    rows for failed members. Returns (omega, G, history).
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if damping not in ("half", "inv-half"):
        raise ValueError("damping variant must be 'half' or 'inv-half'")
    d = np.asarray(data, float)
    noise = _Noise(gamma)
    MN = d.size
    omega = np.array(omega0, float, copy=True)
    J = omega.shape[0]
    if J < 2:
        raise ValueError("need at least two ensemble members")

    hist = EkiHistory()
    s = 0.0
    n = 0
    G = None
    while s < 1.0:
        if n >= max_iterations:
            raise NonConvergenceError(
                f"tempering did not reach s=1 within {max_iterations} iterations (s={s:.6g})",
                partial=(omega, G, hist))
        G = evaluate_batch(omega)
        failed = ~np.isfinite(G).all(axis=1)
        if failed.any():
            ok = np.flatnonzero(~failed)
            if ok.size == 0:
                raise EkiNumericalError("every ensemble member failed the forward map")
            rng_fail = substream(seed, "eki/failures", f"iter{n}")
            for j in np.flatnonzero(failed):
                pick = ok[rng_fail.integers(ok.size)]
                omega[j] = omega[pick]
                G[j] = G[pick]
            hist.n_failures += int(failed.sum())

        resid = d[None, :] - G
        misfit_each = (noise.inv_half_apply(resid) ** 2).sum(axis=1)
        hist.misfits.append(float(misfit_each.mean()))

        G_bar = G.mean(axis=0)
        Gp = G - G_bar
        CGG = (Gp.T @ Gp) / (J - 1)

        # Data-misfit controller: the leading branch is misfit/MN; the sqrt
        # branch accelerates tempering geometrically while the fit is poor,
        # and the 1 - s cap hands over to the final-step clip below.
        phi_ratio = float(misfit_each.mean()) / MN
        if not np.isfinite(phi_ratio) or phi_ratio <= 0:
            raise EkiNumericalError(f"invalid ensemble misfit {phi_ratio * MN}")
        inv_alpha = min(max(1.0 / phi_ratio, 1.0 / np.sqrt(phi_ratio)), 1.0 - s)
        alpha = 1.0 / inv_alpha

        # Damping: double alpha until the regularised step is conservative
        # enough, i.e. alpha*||Gamma^(1/2) (CGG + alpha*Gamma)^-1 (d - Gbar)||
        # >= rho*||Gamma^(-1/2) (d - Gbar)||. The left side grows with alpha
        # towards ||Gamma^(-1/2)(d - Gbar)||, so the loop always terminates.
        r_bar = d - G_bar
        rhs_norm = rho * float(np.linalg.norm(noise.inv_half_apply(r_bar)))
        doublings = 0
        while True:
            M = CGG + alpha * noise.dense()
            cho = cho_factor(M, lower=True, check_finite=False)
            v = cho_solve(cho, r_bar, check_finite=False)
            vh = noise.half_apply(v) if damping == "half" else noise.inv_half_apply(v)
            if alpha * float(np.linalg.norm(vh)) >= rhs_norm:
                break
            alpha *= 2.0
            doublings += 1
            if doublings > _MAX_DOUBLINGS:
                raise EkiNumericalError(
                    f"damping loop exceeded {_MAX_DOUBLINGS} doublings at iteration {n}")

        if s + 1.0 / alpha >= 1.0:
            alpha = 1.0 / (1.0 - s)
            s = 1.0
        else:
            s = s + 1.0 / alpha
        hist.alphas.append(float(alpha))
        hist.s_values.append(float(s))

        M = CGG + alpha * noise.dense()
        cho = cho_factor(M, lower=True, check_finite=False)
        eta = noise.sample(substream(seed, "eki/noise", f"iter{n}"), J)
        rhs = (d[None, :] - G + np.sqrt(alpha) * eta).T          # (MN, J)
        K = cho_solve(cho, rhs, check_finite=False)              # (MN, J)
        W = Gp @ K                                               # (J, J)
        omega = omega + (W.T @ (omega - omega.mean(axis=0))) / (J - 1)
        if not np.isfinite(omega).all():
            raise EkiNumericalError(f"non-finite ensemble update at iteration {n}")
        n += 1

    return omega, G, hist


# --- packing of the structured parameter vector ---------------------------------

class ParameterPacking:
    """Flattens ParameterVector objects for the core loop. Field components are
    packed as-is; the ten scalars are packed through the bounded transform."""

    def __init__(self, prior: flds.PriorSpec):
        self.prior = prior
        self.shape = prior.grid.shape
        self.nb = prior.n_boundary
        self.a = np.array([prior.scalar_ranges[k][0] for k in flds.SCALAR_NAMES])
        self.b = np.array([prior.scalar_ranges[k][1] for k in flds.SCALAR_NAMES])
        self.n_grid = self.shape[0] * self.shape[1]
        self.dim = 4 * self.n_grid + 2 * self.nb + 10

    def pack(self, u: flds.ParameterVector) -> np.ndarray:
        zeta = transform(u.scalar_array(), self.a, self.b)
        return np.concatenate([u.L.ravel(), u.logK_T.ravel(), u.logK_B.ravel(),
                               u.logK_def.ravel(), u.xi_T, u.xi_B, zeta])

    def unpack(self, w: np.ndarray) -> flds.ParameterVector:
        ng, nb = self.n_grid, self.nb
        parts = np.split(w, [ng, 2 * ng, 3 * ng, 4 * ng, 4 * ng + nb, 4 * ng + 2 * nb])
        theta = inverse_transform(parts[6], self.a, self.b)
        scalars = {k: float(v) for k, v in zip(flds.SCALAR_NAMES, theta)}
        return flds.ParameterVector(
            L=parts[0].reshape(self.shape), logK_T=parts[1].reshape(self.shape),
            logK_B=parts[2].reshape(self.shape), logK_def=parts[3].reshape(self.shape),
            xi_T=parts[4].copy(), xi_B=parts[5].copy(), scalars=scalars)


@dataclass
class Ensemble:
    members: list
    n_iterations: int
    s: float
    alphas: list
    misfits: list
    n_failures: int
    J: int
    rho: float
    seed: int


def eki_run(data: obs.MeasurementVector, forward: ForwardMap, prior: flds.PriorSpec,
            J: int, rho: float = 0.65, seed: int = 0, max_iterations: int = 100,
            damping: str = "half", initial: list | None = None) -> Ensemble:
    """Run the inversion from a prior ensemble to the posterior ensemble.

    In surrogate mode the data are shifted by the surrogate error mean and the
    noise covariance inflated by its covariance before the loop.
    """
    packing = ParameterPacking(prior)
    if initial is None:
        initial = [flds.sample_prior(prior, substream(seed, "eki/prior", f"member{j}")
                                     .integers(2 ** 63)) for j in range(J)]
    omega0 = np.stack([packing.pack(u) for u in initial])

    d = data.values
    gamma = data.gamma_diag
    if forward.kind == "surrogate":
        d = d - forward.error_mean
        # an exactly-zero error covariance keeps the diagonal representation,
        # making surrogate mode bit-compatible with full-model mode
        if forward.error_cov.any():
            gamma = np.diag(gamma) + forward.error_cov

    def evaluate_batch(omega):
        members = [packing.unpack(w) for w in omega]
        return forward.evaluate_batch(members)

    try:
        omega, G, hist = eki_core(d, gamma, omega0, evaluate_batch, rho=rho, seed=seed,
                                  max_iterations=max_iterations, damping=damping)
    except NonConvergenceError as exc:
        if exc.partial is not None:
            omega, G, hist = exc.partial
            exc.partial = Ensemble(
                members=[packing.unpack(w) for w in omega], n_iterations=len(hist.alphas),
                s=float(hist.s_values[-1]) if hist.s_values else 0.0, alphas=hist.alphas,
                misfits=hist.misfits, n_failures=hist.n_failures, J=J, rho=rho, seed=seed)
        raise

    return Ensemble(members=[packing.unpack(w) for w in omega],
                    n_iterations=len(hist.alphas), s=float(hist.s_values[-1]),
                    alphas=hist.alphas, misfits=hist.misfits,
                    n_failures=hist.n_failures, J=J, rho=rho, seed=seed)


# --- posterior outputs -----------------------------------------------------------

@dataclass
class PosteriorSummary:
    mean_log_K: np.ndarray
    std_log_K: np.ndarray
    mean_phi: np.ndarray
    std_phi: np.ndarray
    p_def: np.ndarray
    p_rt: np.ndarray
    scalar_samples: np.ndarray  # (J, 10) in SCALAR_NAMES order
    grid: RegularGrid


def posterior_summary(ensemble: Ensemble, prior: flds.PriorSpec,
                      grid: RegularGrid | None = None) -> PosteriorSummary:
    """Pointwise mean/STD of the realised fields plus defect and strip
    probabilities, streamed over the ensemble."""
    grid = grid or prior.grid
    members = ensemble.members
    J = len(members)
    if J == 0:
        raise ValueError("empty ensemble")
    shape = grid.shape
    # Welford accumulation: exact zeros when all members coincide
    mean_k = np.zeros(shape)
    m2_k = np.zeros(shape)
    mean_p = np.zeros(shape)
    m2_p = np.zeros(shape)
    c_def = np.zeros(shape)
    c_rt = np.zeros(shape)
    scalars = np.empty((J, len(flds.SCALAR_NAMES)))
    for j, u in enumerate(members):
        pair = flds.realise_fields(u, prior, grid)
        d_k = pair.log_K - mean_k
        mean_k += d_k / (j + 1)
        m2_k += d_k * (pair.log_K - mean_k)
        d_p = pair.phi - mean_p
        mean_p += d_p / (j + 1)
        m2_p += d_p * (pair.phi - mean_p)
        c_def += pair.region_labels == flds.LABEL_DEF
        c_rt += (pair.region_labels == flds.LABEL_RT_T) | (pair.region_labels == flds.LABEL_RT_B)
        scalars[j] = u.scalar_array()
    denom = max(J - 1, 1)
    return PosteriorSummary(mean_log_K=mean_k, std_log_K=np.sqrt(np.maximum(m2_k, 0.0) / denom),
                            mean_phi=mean_p, std_phi=np.sqrt(np.maximum(m2_p, 0.0) / denom),
                            p_def=c_def / J, p_rt=c_rt / J,
                            scalar_samples=scalars, grid=grid)


def predictive_pushforward(ensemble: Ensemble, forward: ForwardMap,
                           gamma_diag: np.ndarray, seed: int):
    """Push the posterior ensemble through the forward map and add observation
    noise (inflated by the surrogate error covariance in surrogate mode).
    Returns (predictive (J, MN), forward values (J, MN))."""
    G = forward.evaluate_batch(ensemble.members)
    if not np.isfinite(G).all():
        bad = int((~np.isfinite(G).all(axis=1)).sum())
        raise EkiNumericalError(f"forward map failed for {bad} members in the push-forward")
    gamma = np.asarray(gamma_diag, float)
    if forward.kind == "surrogate" and forward.error_cov.any():
        noise = _Noise(np.diag(gamma) + forward.error_cov)
    else:
        noise = _Noise(gamma)
    eta = noise.sample(substream(seed, "eki/predictive"), G.shape[0])
    return G + eta, G


def surrogate_error_stats(test_pairs) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of G - G_s over test pairs."""
    pairs = list(test_pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two test pairs")
    errors = np.stack([np.asarray(g, float) - np.asarray(gs, float) for g, gs in pairs])
    eps = errors.mean(axis=0)
    D = errors - eps
    Sigma = (D.T @ D) / (len(pairs) - 1)
    return eps, 0.5 * (Sigma + Sigma.T)


# --- DOES1 surrogate error statistics file ---------------------------------------
#
# magic 'DOES1'; little-endian u64 MN; float64 eps_mean (MN); float64 Sigma
# (MN*MN row-major); u64 checksum of all preceding bytes.

DOES1_MAGIC = b"DOES1"


class StatsFileError(ValueError):
    pass


def write_error_stats(path, eps_mean: np.ndarray, Sigma: np.ndarray) -> None:
    eps_mean = np.asarray(eps_mean, float)
    Sigma = np.asarray(Sigma, float)
    mn = eps_mean.size
    if Sigma.shape != (mn, mn):
        raise ValueError("Sigma shape does not match eps_mean")
    payload = DOES1_MAGIC + struct.pack("<Q", mn)
    payload += np.ascontiguousarray(eps_mean, "<f8").tobytes()
    payload += np.ascontiguousarray(Sigma, "<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum64(payload)))


def read_error_stats(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 21 or blob[:5] != DOES1_MAGIC:
        raise StatsFileError("not a DOES1 stats file")
    payload, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != checksum64(payload):
        raise StatsFileError("stats file checksum mismatch")
    mn = struct.unpack("<Q", payload[5:13])[0]
    need = 13 + 8 * mn + 8 * mn * mn
    if len(payload) != need:
        raise StatsFileError("stats file payload has the wrong length")
    eps = np.frombuffer(payload[13:13 + 8 * mn], "<f8").copy()
    Sigma = np.frombuffer(payload[13 + 8 * mn:], "<f8").reshape(mn, mn).copy()
    return eps, Sigma
