"""Inference-only DeepONet surrogate evaluation.

The branch encodes the material fields (convolutional encoder over log K,
porosity and two positional channels) and the five flow scalars (MLP); the two
latent vectors are fused elementwise into a gate vector. The trunk Fourier-
embeds a space-time query and passes it through gated dense layers; separate
heads emit pressure and a sigmoid filling factor. Raw pressure is masked to
zero wherever the predicted filling factor does not exceed the threshold.

Everything here is plain numpy; weights arrive through the portable DONW1
file format documented next to the reader.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from . import fields as flds
from .binio import checksum64

DONW1_MAGIC = b"DONW1"
_DTYPE_F32 = 1


class WeightFormatError(ValueError):
    """Bad magic, framing or metadata in a weight file."""


class WeightShapeError(ValueError):
    """Tensor shapes inconsistent with the architecture config."""


class WeightChecksumError(ValueError):
    """Stored checksum does not match the file contents."""


@dataclass(frozen=True)
class SurrogateConfig:
    grid_shape: tuple            # (H, W) of the field inputs
    channels: tuple = (4, 64, 128, 256, 512)   # encoder ladder, 3 downsamples + bottleneck
    scalar_widths: tuple = (64, 64, 64)        # 3 hidden layers of the scalar MLP
    n_out: int = 400
    trunk_layers: int = 6
    n_freq: int = 6
    mask_threshold: float = 0.9
    gelu: str = "exact"          # "exact" (Gaussian CDF) or "tanh"
    bn_eps: float = 1e-5
    coord_scale: tuple = (0.3, 0.3, 110.0)     # (Dx, Dy, T) normalising queries to [0,1]^3
    field_norm: dict = field(default_factory=lambda: {"min": [0.0] * 4, "max": [1.0] * 4})
    scalar_norm: dict = field(default_factory=lambda: {"mean": [0.0] * 5, "sd": [1.0] * 5})
    pressure_norm: dict = field(default_factory=lambda: {"mean": 0.0, "sd": 1.0})

    def __post_init__(self):
        if self.n_out % 2:
            raise ValueError("latent dimension must be even (equal pressure/fill split)")
        if self.trunk_layers < 1 or self.n_freq < 1:
            raise ValueError("trunk needs at least one layer and one frequency")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask threshold must lie in (0, 1)")
        if len(self.channels) != 5 or self.channels[0] != 4:
            raise ValueError("encoder ladder must be (4, c1, c2, c3, c4)")
        if len(self.scalar_widths) != 3:
            raise ValueError("scalar MLP uses exactly 3 hidden layers")
        H, W = self.grid_shape
        if H % 8 or W % 8:
            raise ValueError("field grid must be divisible by 8 for the 3 pooling stages")
        if self.gelu not in ("exact", "tanh"):
            raise ValueError("gelu form must be 'exact' or 'tanh'")

    @property
    def embed_dim(self) -> int:
        return 3 + 6 * self.n_freq

    @property
    def flat_dim(self) -> int:
        H, W = self.grid_shape
        return self.channels[4] * (H // 8) * (W // 8)


def desk_config(grid_shape=(40, 40), n_out=64, coord_scale=(0.3, 0.3, 110.0),
                **overrides) -> SurrogateConfig:
    """Laptop-sized architecture; the production ladder stays available via
    SurrogateConfig defaults."""
    kw = dict(grid_shape=grid_shape, channels=(4, 16, 32, 64, 128),
              scalar_widths=(32, 32, 32), n_out=n_out, coord_scale=coord_scale)
    kw.update(overrides)
    return SurrogateConfig(**kw)


def expected_shapes(cfg: SurrogateConfig) -> dict:
    """Name -> shape table for every tensor in a weight bundle."""
    shapes: dict = {}
    ch = cfg.channels
    for k in range(4):
        cin = ch[k]
        cout = ch[k + 1]
        shapes[f"branch.fields.block{k}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"branch.fields.block{k}.conv2.weight"] = (cout, cout, 3, 3)
        for conv in ("conv1", "conv2"):
            shapes[f"branch.fields.block{k}.{conv}.bias"] = (cout,)
        for bn in ("bn1", "bn2"):
            for part in ("weight", "bias", "running_mean", "running_var"):
                shapes[f"branch.fields.block{k}.{bn}.{part}"] = (cout,)
    shapes["branch.fields.head.weight"] = (cfg.n_out, cfg.flat_dim)
    shapes["branch.fields.head.bias"] = (cfg.n_out,)

    widths = (5,) + cfg.scalar_widths + (cfg.n_out,)
    for i in range(4):
        shapes[f"branch.scalars.fc{i}.weight"] = (widths[i + 1], widths[i])
        shapes[f"branch.scalars.fc{i}.bias"] = (widths[i + 1],)

    shapes["trunk.encoder.weight"] = (cfg.n_out, cfg.embed_dim)
    shapes["trunk.encoder.bias"] = (cfg.n_out,)
    for l in range(cfg.trunk_layers):
        shapes[f"trunk.gates.{l}.a"] = (cfg.n_out,)
        shapes[f"trunk.gates.{l}.b"] = (cfg.n_out,)
    for l in range(cfg.trunk_layers - 1):
        shapes[f"trunk.layers.{l}.weight"] = (cfg.n_out, cfg.n_out)
        shapes[f"trunk.layers.{l}.bias"] = (cfg.n_out,)
    half = cfg.n_out // 2
    shapes["trunk.head_p.weight"] = (half,)
    shapes["trunk.head_p.bias"] = ()
    shapes["trunk.head_f.weight"] = (half,)
    shapes["trunk.head_f.bias"] = ()
    return shapes


@dataclass
class WeightBundle:
    config: SurrogateConfig
    tensors: dict   # name -> float32 ndarray

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        missing = sorted(set(shapes) - set(self.tensors))
        if missing:
            raise WeightShapeError(f"missing tensors: {missing[:4]}")
        extra = sorted(set(self.tensors) - set(shapes))
        if extra:
            raise WeightShapeError(f"unexpected tensors: {extra[:4]}")
        for name, shape in shapes.items():
            got = self.tensors[name].shape
            if tuple(got) != tuple(shape):
                raise WeightShapeError(f"{name}: shape {got}, expected {shape}")
        for name in self.tensors:
            if "running_var" in name and (self.tensors[name] <= 0).any():
                raise WeightShapeError(f"{name}: running variances must be positive")

    def __getitem__(self, name):
        return self.tensors[name]


# --- DONW1 weight files -------------------------------------------------------
#
# magic 'DONW1'; little-endian u32 JSON length + UTF-8 JSON config; repeated
# tensor records (u16 name length, name, u8 dtype code 1 = f32, u8 ndim,
# ndim * u64 dims, raw little-endian data); trailing u64 checksum (low 8 bytes
# of SHA-256) over all preceding bytes.

def _config_to_json(cfg: SurrogateConfig) -> dict:
    return {
        "grid_shape": list(cfg.grid_shape), "channels": list(cfg.channels),
        "scalar_widths": list(cfg.scalar_widths), "n_out": cfg.n_out,
        "trunk_layers": cfg.trunk_layers, "n_freq": cfg.n_freq,
        "mask_threshold": cfg.mask_threshold, "gelu": cfg.gelu, "bn_eps": cfg.bn_eps,
        "coord_scale": list(cfg.coord_scale), "field_norm": cfg.field_norm,
        "scalar_norm": cfg.scalar_norm, "pressure_norm": cfg.pressure_norm,
    }


def _config_from_json(doc: dict) -> SurrogateConfig:
    try:
        return SurrogateConfig(
            grid_shape=tuple(doc["grid_shape"]), channels=tuple(doc["channels"]),
            scalar_widths=tuple(doc["scalar_widths"]), n_out=int(doc["n_out"]),
            trunk_layers=int(doc["trunk_layers"]), n_freq=int(doc["n_freq"]),
            mask_threshold=float(doc["mask_threshold"]), gelu=doc["gelu"],
            bn_eps=float(doc["bn_eps"]), coord_scale=tuple(doc["coord_scale"]),
            field_norm=doc["field_norm"], scalar_norm=doc["scalar_norm"],
            pressure_norm=doc["pressure_norm"])
    except (KeyError, TypeError) as exc:
        raise WeightFormatError(f"weight file config incomplete: {exc}") from exc


def save_weights(bundle: WeightBundle, path) -> None:
    parts = [DONW1_MAGIC]
    blob = json.dumps(_config_to_json(bundle.config), sort_keys=True).encode()
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    for name in sorted(bundle.tensors):
        t = np.asarray(bundle.tensors[name], dtype="<f4")  # asarray keeps 0-dim scalars
        if t.ndim:
            t = np.ascontiguousarray(t)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_F32, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape) if t.ndim else b"")
        parts.append(t.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum64(payload)))


def load_weights(path) -> tuple[SurrogateConfig, WeightBundle]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(DONW1_MAGIC) + 12 or blob[:5] != DONW1_MAGIC:
        raise WeightFormatError("not a DONW1 weight file")
    payload, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != checksum64(payload):
        raise WeightChecksumError("weight file checksum mismatch")
    off = 5
    (jlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    try:
        doc = json.loads(payload[off:off + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"bad config block: {exc}") from exc
    off += jlen
    cfg = _config_from_json(doc)
    tensors = {}
    while off < len(payload):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode()
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        if dtype != _DTYPE_F32:
            raise WeightFormatError(f"{name}: unsupported dtype code {dtype}")
        dims = struct.unpack_from(f"<{ndim}Q", payload, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(payload, "<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = arr.copy()
    try:
        bundle = WeightBundle(config=cfg, tensors=tensors)
    except WeightShapeError:
        raise
    return cfg, bundle


# --- numpy layers ----------------------------------------------------------------

def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, padding 1. x: (B, C_in, H, W) -> (B, C_out, H, W)."""
    B, cin, H, W = x.shape
    xp = np.zeros((B, cin, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    s = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(B, cin, H, W, 3, 3), strides=(s[0], s[1], s[2], s[3], s[2], s[3]))
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, cin * 9)
    out = cols @ w.reshape(w.shape[0], cin * 9).T + b
    return out.reshape(B, H, W, w.shape[0]).transpose(0, 3, 1, 2)


def _batchnorm(x, weight, bias, mean, var, eps):
    scale = weight / np.sqrt(var + eps)
    return x * scale[:, None, None] + (bias - mean * scale)[:, None, None]


def _maxpool2(x):
    B, c, H, W = x.shape
    return x.reshape(B, c, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def gelu(x, form="exact"):
    x = np.asarray(x, float)
    if form == "exact":
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _double_conv(x, bundle, block):
    p = f"branch.fields.block{block}"
    for stage in ("1", "2"):
        x = _conv3x3(x, bundle[f"{p}.conv{stage}.weight"].astype(float),
                     bundle[f"{p}.conv{stage}.bias"].astype(float))
        x = _batchnorm(x, bundle[f"{p}.bn{stage}.weight"].astype(float),
                       bundle[f"{p}.bn{stage}.bias"].astype(float),
                       bundle[f"{p}.bn{stage}.running_mean"].astype(float),
                       bundle[f"{p}.bn{stage}.running_var"].astype(float),
                       bundle.config.bn_eps)
        x = np.maximum(x, 0.0)
    return x


def branch_forward_batch(log_K: np.ndarray, phi: np.ndarray, scalars: np.ndarray,
                         bundle: WeightBundle) -> np.ndarray:
    """Batched gate vectors for (J, H, W) field stacks and (J, 5) scalars."""
    cfg = bundle.config
    H, W = cfg.grid_shape
    if log_K.shape[1:] != (H, W) or phi.shape != log_K.shape:
        raise ValueError(f"field inputs must be (J, {H}, {W})")
    scalars = np.asarray(scalars, float)
    if scalars.shape != (log_K.shape[0], 5):
        raise ValueError("expected the 5 flow scalars per member")
    if not (np.isfinite(log_K).all() and np.isfinite(phi).all() and np.isfinite(scalars).all()):
        raise ValueError("non-finite surrogate input")

    J = log_K.shape[0]
    ypos, xpos = np.meshgrid(np.linspace(0.0, 1.0, H), np.linspace(0.0, 1.0, W), indexing="ij")
    stack = np.stack([log_K, phi,
                      np.broadcast_to(xpos, log_K.shape),
                      np.broadcast_to(ypos, log_K.shape)], axis=1)   # (J, 4, H, W)
    lo = np.asarray(cfg.field_norm["min"], float)[:, None, None]
    hi = np.asarray(cfg.field_norm["max"], float)[:, None, None]
    x = (stack - lo) / np.where(hi - lo == 0, 1.0, hi - lo)

    for k in range(3):
        x = _double_conv(x, bundle, k)
        x = _maxpool2(x)
    x = _double_conv(x, bundle, 3)
    b_fields = x.reshape(J, -1) @ bundle["branch.fields.head.weight"].astype(float).T \
        + bundle["branch.fields.head.bias"].astype(float)

    mu = np.asarray(cfg.scalar_norm["mean"], float)
    sd = np.asarray(cfg.scalar_norm["sd"], float)
    h = (scalars - mu) / sd
    for i in range(4):
        h = h @ bundle[f"branch.scalars.fc{i}.weight"].astype(float).T \
            + bundle[f"branch.scalars.fc{i}.bias"].astype(float)
        if i < 3:
            h = np.maximum(h, 0.0)
    return b_fields * h


def branch_forward(log_K: np.ndarray, phi: np.ndarray, scalars: np.ndarray,
                   bundle: WeightBundle) -> np.ndarray:
    """Gate vector g = B_fields(log K, phi, x, y) * B_scalars(mu, P_I, lam, beta, chi)."""
    g = branch_forward_batch(np.asarray(log_K, float)[None], np.asarray(phi, float)[None],
                             np.asarray(scalars, float)[None], bundle)
    return g[0]


def fourier_embed(z: np.ndarray, n_freq: int) -> np.ndarray:
    """[z, sin(2 pi 2^k z), cos(2 pi 2^k z)] for k = 0..n_freq-1; z is (..., 3)."""
    z = np.asarray(z, float)
    freqs = 2.0 ** np.arange(n_freq)
    ang = 2.0 * np.pi * z[..., None, :] * freqs[:, None]    # (..., n_freq, 3)
    parts = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., n_freq, 6)
    return np.concatenate([z, parts.reshape(*z.shape[:-1], 6 * n_freq)], axis=-1)


def trunk_forward_batch(queries: np.ndarray, g: np.ndarray, bundle: WeightBundle):
    """Gated trunk over shared queries (Q, 3) and member gates (J, n_out).
    Returns raw (p_out, f_out), each (J, Q)."""
    cfg = bundle.config
    q = np.asarray(queries, float)
    if not np.isfinite(q).all():
        raise ValueError("non-finite trunk query")
    zt = fourier_embed(q, cfg.n_freq)
    z = zt @ bundle["trunk.encoder.weight"].astype(float).T \
        + bundle["trunk.encoder.bias"].astype(float)        # (Q, n)
    z = z[None]
    gates = g[:, None, :]                                   # (J, 1, n)
    for l in range(cfg.trunk_layers):
        gate = bundle[f"trunk.gates.{l}.a"].astype(float) * gates \
            + bundle[f"trunk.gates.{l}.b"].astype(float)
        h = gelu(z * gate, cfg.gelu)
        if l < cfg.trunk_layers - 1:
            z = h @ bundle[f"trunk.layers.{l}.weight"].astype(float).T \
                + bundle[f"trunk.layers.{l}.bias"].astype(float)
    half = cfg.n_out // 2
    p_out = h[:, :, :half] @ bundle["trunk.head_p.weight"].astype(float) \
        + float(bundle["trunk.head_p.bias"])
    f_out = expit(h[:, :, half:] @ bundle["trunk.head_f.weight"].astype(float)
                  + float(bundle["trunk.head_f.bias"]))
    if not (np.isfinite(p_out).all() and np.isfinite(f_out).all()):
        raise ValueError("non-finite trunk output")
    return p_out, f_out


def trunk_forward(queries: np.ndarray, g: np.ndarray, bundle: WeightBundle):
    """Gated trunk on normalised (x, y, t) queries. Returns raw (p_out, f_out).

    queries: (..., 3) in the normalised coordinate cube; g: gate vector.
    """
    q = np.atleast_2d(np.asarray(queries, float))
    p_out, f_out = trunk_forward_batch(q, np.asarray(g, float)[None], bundle)
    if np.asarray(queries).ndim == 1:
        return float(p_out[0, 0]), float(f_out[0, 0])
    return p_out[0], f_out[0]


def surrogate_predict(log_K: np.ndarray, phi: np.ndarray, scalars: np.ndarray,
                      queries: np.ndarray, bundle: WeightBundle):
    """Masked surrogate prediction at physical (x, y, t) queries.

    Pressure is de-normalised by the stored target statistics, then zeroed
    wherever the filling-factor output does not exceed the mask threshold.
    """
    cfg = bundle.config
    g = branch_forward(log_K, phi, scalars, bundle)
    q = np.atleast_2d(np.asarray(queries, float)) / np.asarray(cfg.coord_scale, float)
    p_raw, f_out = trunk_forward(q, g, bundle)
    p_phys = p_raw * cfg.pressure_norm["sd"] + cfg.pressure_norm["mean"]
    p_s = np.where(f_out > cfg.mask_threshold, p_phys, 0.0)
    return p_s, f_out


def _measurement_queries(config) -> np.ndarray:
    sensors = config.sensors
    times = config.times
    queries = np.empty((times.size * sensors.shape[0], 3))
    for n, t in enumerate(times):
        block = slice(n * sensors.shape[0], (n + 1) * sensors.shape[0])
        queries[block, 0] = sensors[:, 0]
        queries[block, 1] = sensors[:, 1]
        queries[block, 2] = t
    return queries


def _check_prior_grid(prior: flds.PriorSpec, cfg: SurrogateConfig):
    H, W = cfg.grid_shape
    if prior.grid.shape != (H, W):
        raise ValueError(f"prior grid {prior.grid.shape} does not match the "
                         f"surrogate field grid {(H, W)}")


def surrogate_forward_map(u: flds.ParameterVector, prior: flds.PriorSpec,
                          config, bundle: WeightBundle) -> np.ndarray:
    """G_s(u): realise the fields on the surrogate grid, predict the masked
    pressure at every (sensor, time) query, flatten time-major."""
    _check_prior_grid(prior, bundle.config)
    pair = flds.realise_fields(u, prior)
    scalars = np.array([u.scalars[k] for k in ("mu", "P_I", "lam", "beta", "chi")])
    p_s, _ = surrogate_predict(pair.log_K, pair.phi, scalars,
                               _measurement_queries(config), bundle)
    return p_s


def surrogate_forward_map_batch(members, prior: flds.PriorSpec, config,
                                bundle: WeightBundle) -> np.ndarray:
    """Vectorised G_s over a whole ensemble; one conv/trunk pass for all members."""
    cfg = bundle.config
    _check_prior_grid(prior, cfg)
    J = len(members)
    H, W = cfg.grid_shape
    log_K = np.empty((J, H, W))
    phi = np.empty((J, H, W))
    scalars = np.empty((J, 5))
    for j, u in enumerate(members):
        pair = flds.realise_fields(u, prior)
        log_K[j] = pair.log_K
        phi[j] = pair.phi
        scalars[j] = [u.scalars[k] for k in ("mu", "P_I", "lam", "beta", "chi")]
    g = branch_forward_batch(log_K, phi, scalars, bundle)
    q = _measurement_queries(config) / np.asarray(cfg.coord_scale, float)
    p_raw, f_out = trunk_forward_batch(q, g, bundle)
    p_phys = p_raw * cfg.pressure_norm["sd"] + cfg.pressure_norm["mean"]
    return np.where(f_out > cfg.mask_threshold, p_phys, 0.0)


def make_surrogate_forward(prior: flds.PriorSpec, config, bundle: WeightBundle,
                           error_mean: np.ndarray, error_cov: np.ndarray):
    """ForwardMap wrapper (kind 'surrogate') with batched ensemble evaluation."""
    from .eki import ForwardMap

    def evaluate(u):
        return surrogate_forward_map(u, prior, config, bundle)

    fm = ForwardMap(evaluate, output_dim=config.M * config.N, kind="surrogate",
                    error_mean=error_mean, error_cov=error_cov)

    def evaluate_batch(members):
        try:
            return surrogate_forward_map_batch(members, prior, config, bundle)
        except ValueError:
            out = np.full((len(members), fm.output_dim), np.nan)
            for j, u in enumerate(members):
                try:
                    out[j] = evaluate(u)
                except ValueError:
                    pass
            return out

    fm.evaluate_batch = evaluate_batch
    return fm
