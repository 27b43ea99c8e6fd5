"""Surrogate network: convolutional field branch, scalar MLP branch, and a
Fourier-embedded trunk whose layers are modulated by the fused branch gate."""

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class ModelConfig:
    grid_shape: tuple = (40, 40)
    channels: tuple = (4, 16, 32, 64, 128)
    scalar_widths: tuple = (32, 32, 32)
    n_out: int = 64
    trunk_layers: int = 6
    n_freq: int = 6
    mask_threshold: float = 0.9
    bn_eps: float = 1e-5
    coord_scale: tuple = (0.3, 0.3, 110.0)

    def __post_init__(self):
        if self.n_out % 2:
            raise ValueError("latent dimension must be even")
        H, W = self.grid_shape
        if H % 8 or W % 8:
            raise ValueError("field grid must be divisible by 8")


def _double_conv(cin, cout, eps):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout, eps=eps), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout, eps=eps), nn.ReLU())


class FieldBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        H, W = cfg.grid_shape
        self.blocks = nn.ModuleList([_double_conv(ch[k], ch[k + 1], cfg.bn_eps)
                                     for k in range(4)])
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Linear(ch[4] * (H // 8) * (W // 8), cfg.n_out)

    def forward(self, x):
        for k in range(3):
            x = self.pool(self.blocks[k](x))
        x = self.blocks[3](x)
        return self.head(x.flatten(1))


class ScalarBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = (5,) + cfg.scalar_widths + (cfg.n_out,)
        self.fcs = nn.ModuleList([nn.Linear(widths[i], widths[i + 1]) for i in range(4)])

    def forward(self, s):
        for i, fc in enumerate(self.fcs):
            s = fc(s)
            if i < 3:
                s = torch.relu(s)
        return s


class GatedTrunk(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_out
        self.encoder = nn.Linear(3 + 6 * cfg.n_freq, n)
        self.gate_a = nn.ParameterList([nn.Parameter(torch.ones(n))
                                        for _ in range(cfg.trunk_layers)])
        self.gate_b = nn.ParameterList([nn.Parameter(torch.zeros(n))
                                        for _ in range(cfg.trunk_layers)])
        self.layers = nn.ModuleList([nn.Linear(n, n) for _ in range(cfg.trunk_layers - 1)])
        half = n // 2
        self.head_p_w = nn.Parameter(torch.zeros(half))
        self.head_p_b = nn.Parameter(torch.zeros(()))
        self.head_f_w = nn.Parameter(torch.zeros(half))
        self.head_f_b = nn.Parameter(torch.zeros(()))
        nn.init.normal_(self.head_p_w, std=1.0 / math.sqrt(half))
        nn.init.normal_(self.head_f_w, std=1.0 / math.sqrt(half))

    def embed(self, q):
        """[q, sin(2 pi 2^k q), cos(2 pi 2^k q)] along the last axis."""
        freqs = 2.0 ** torch.arange(self.cfg.n_freq, dtype=q.dtype, device=q.device)
        ang = 2.0 * math.pi * q.unsqueeze(-2) * freqs.view(-1, 1)
        parts = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return torch.cat([q, parts.flatten(-2)], dim=-1)

    def forward(self, q, g):
        """q: (..., Q, 3) normalised queries; g: (..., n_out) gate."""
        z = self.encoder(self.embed(q))
        gate_in = g.unsqueeze(-2)
        for l in range(self.cfg.trunk_layers):
            gate = self.gate_a[l] * gate_in + self.gate_b[l]
            h = nn.functional.gelu(z * gate)   # exact erf form
            if l < self.cfg.trunk_layers - 1:
                z = self.layers[l](h)
        half = self.cfg.n_out // 2
        p = h[..., :half] @ self.head_p_w + self.head_p_b
        f = torch.sigmoid(h[..., half:] @ self.head_f_w + self.head_f_b)
        return p, f


class Surrogate(nn.Module):
    """Full branch + trunk surrogate on normalised inputs.

    fields: (B, 4, H, W) already min-max normalised (channels log_K, phi, x, y);
    scalars: (B, 5) standardised; queries: (B, Q, 3) in [0, 1]^3.
    Outputs standardised pressure and raw filling factor, both (B, Q).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fields = FieldBranch(cfg)
        self.scalars = ScalarBranch(cfg)
        self.trunk = GatedTrunk(cfg)

    def gate(self, fields, scalars):
        return self.fields(fields) * self.scalars(scalars)

    def forward(self, fields, scalars, queries):
        g = self.gate(fields, scalars)
        return self.trunk(queries, g)


def positional_channels(H, W, dtype=torch.float32):
    y = torch.linspace(0.0, 1.0, H, dtype=dtype)
    x = torch.linspace(0.0, 1.0, W, dtype=dtype)
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return xx, yy


def export_tensors(model: Surrogate) -> dict:
    """State dict remapped to the portable weight-file tensor names."""
    out = {}
    for k, block in enumerate(model.fields.blocks):
        conv1, bn1, _, conv2, bn2, _ = block
        p = f"branch.fields.block{k}"
        out[f"{p}.conv1.weight"] = conv1.weight.detach().cpu().numpy()
        out[f"{p}.conv1.bias"] = conv1.bias.detach().cpu().numpy()
        out[f"{p}.conv2.weight"] = conv2.weight.detach().cpu().numpy()
        out[f"{p}.conv2.bias"] = conv2.bias.detach().cpu().numpy()
        for tag, bn in (("bn1", bn1), ("bn2", bn2)):
            out[f"{p}.{tag}.weight"] = bn.weight.detach().cpu().numpy()
            out[f"{p}.{tag}.bias"] = bn.bias.detach().cpu().numpy()
            out[f"{p}.{tag}.running_mean"] = bn.running_mean.detach().cpu().numpy()
            out[f"{p}.{tag}.running_var"] = bn.running_var.detach().cpu().numpy()
    out["branch.fields.head.weight"] = model.fields.head.weight.detach().cpu().numpy()
    out["branch.fields.head.bias"] = model.fields.head.bias.detach().cpu().numpy()
    for i, fc in enumerate(model.scalars.fcs):
        out[f"branch.scalars.fc{i}.weight"] = fc.weight.detach().cpu().numpy()
        out[f"branch.scalars.fc{i}.bias"] = fc.bias.detach().cpu().numpy()
    out["trunk.encoder.weight"] = model.trunk.encoder.weight.detach().cpu().numpy()
    out["trunk.encoder.bias"] = model.trunk.encoder.bias.detach().cpu().numpy()
    for l in range(model.cfg.trunk_layers):
        out[f"trunk.gates.{l}.a"] = model.trunk.gate_a[l].detach().cpu().numpy()
        out[f"trunk.gates.{l}.b"] = model.trunk.gate_b[l].detach().cpu().numpy()
    for l, fc in enumerate(model.trunk.layers):
        out[f"trunk.layers.{l}.weight"] = fc.weight.detach().cpu().numpy()
        out[f"trunk.layers.{l}.bias"] = fc.bias.detach().cpu().numpy()
    out["trunk.head_p.weight"] = model.trunk.head_p_w.detach().cpu().numpy()
    out["trunk.head_p.bias"] = model.trunk.head_p_b.detach().cpu().numpy()
    out["trunk.head_f.weight"] = model.trunk.head_f_w.detach().cpu().numpy()
    out["trunk.head_f.bias"] = model.trunk.head_f_b.detach().cpu().numpy()
    return out


def donw1_config(cfg: ModelConfig, norm) -> dict:
    return {
        "grid_shape": list(cfg.grid_shape), "channels": list(cfg.channels),
        "scalar_widths": list(cfg.scalar_widths), "n_out": cfg.n_out,
        "trunk_layers": cfg.trunk_layers, "n_freq": cfg.n_freq,
        "mask_threshold": cfg.mask_threshold, "gelu": "exact", "bn_eps": cfg.bn_eps,
        "coord_scale": list(cfg.coord_scale),
        "field_norm": {"min": norm.field_min.tolist(), "max": norm.field_max.tolist()},
        "scalar_norm": {"mean": norm.scalar_mean.tolist(), "sd": norm.scalar_sd.tolist()},
        "pressure_norm": {"mean": norm.pressure_mean, "sd": norm.pressure_sd},
    }
