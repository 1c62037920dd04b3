"""Canonical background fitting with coordinate networks.

A canonical image ``B(u, v)``, a deformation ``g_b(x, y, t)`` and a residual
``g_f(x, y, t)`` are fitted jointly so that ``clamp(B((x, y) + g_b) + g_f)``
reproduces the clip. The residual is L1-penalised and therefore soaks up
whatever the deformed background cannot explain. All coordinates live in
``[-1, 1]``.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from denver.errors import ConfigError, InputError, NumericError
from denver.imaging_io import VideoClip, load_arrays, save_arrays

log = logging.getLogger(__name__)

LOSS_TERMS = ("recons", "smooth", "limit", "total")


@dataclass
class Stage1Config:
    lambda_smooth: float = 0.02
    lambda_limit: float = 0.02
    steps: int = 3000
    lr: float = 1e-3
    batch_pixels: int = 8192
    seed: int = 0
    encoding_freqs: int = 8
    hidden: int = 128
    layers: int = 4
    render_chunk: int = 65536

    def validate(self):
        if min(self.lambda_smooth, self.lambda_limit) < 0:
            raise ConfigError("stage-1 loss weights must be non-negative")
        if self.steps < 1 or self.batch_pixels < 1:
            raise ConfigError("steps and batch_pixels must be at least 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.encoding_freqs < 0 or self.hidden < 1 or self.layers < 1:
            raise ConfigError("network sizes must be positive")
        return self


class FourierFeatures(nn.Module):
    """``p -> [p, sin(2^k pi p), cos(2^k pi p)]`` for ``k < n_freqs``."""

    def __init__(self, in_dim: int, n_freqs: int):
        super().__init__()
        self.in_dim, self.n_freqs = in_dim, n_freqs
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freqs)) * math.pi)

    @property
    def out_dim(self):
        return self.in_dim * (1 + 2 * self.n_freqs)

    def forward(self, p):
        a = (p[..., None] * self.freqs).flatten(-2)
        return torch.cat([p, a.sin(), a.cos()], dim=-1)


def coordinate_mlp(in_dim, out_dim, n_freqs, hidden, layers, zero_last=False) -> nn.Sequential:
    enc = FourierFeatures(in_dim, n_freqs)
    mods: list[nn.Module] = [enc]
    width = enc.out_dim
    for _ in range(layers):
        mods += [nn.Linear(width, hidden), nn.ReLU()]
        width = hidden
    last = nn.Linear(width, out_dim)
    if zero_last:
        # start as the zero function so the fit begins from a static background
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    mods.append(last)
    return nn.Sequential(*mods)


class BackgroundModel(nn.Module):
    """Canonical image, background deformation and residual as coordinate networks."""

    def __init__(self, encoding_freqs=8, hidden=128, layers=4):
        super().__init__()
        self.encoding_freqs = encoding_freqs
        self.canonical_net = coordinate_mlp(2, 1, encoding_freqs, hidden, layers)
        self.deform_net = coordinate_mlp(3, 2, encoding_freqs, hidden, layers, zero_last=True)
        self.residual_net = coordinate_mlp(3, 1, encoding_freqs, hidden, layers, zero_last=True)

    @classmethod
    def from_config(cls, cfg: Stage1Config):
        return cls(cfg.encoding_freqs, cfg.hidden, cfg.layers)

    def canonical(self, uv):
        return torch.sigmoid(self.canonical_net(uv))[..., 0]

    def deform(self, xyt):
        return self.deform_net(xyt)

    def residual(self, xyt):
        return self.residual_net(xyt)[..., 0]

    def background(self, xyt):
        """``B((x, y) + g_b(x, y, t))`` without the residual."""
        return self.canonical(xyt[..., :2] + self.deform(xyt))


def render_recon(model: BackgroundModel, coords: torch.Tensor) -> torch.Tensor:
    """Reconstructed intensities at normalised ``(x, y, t)`` coordinates (``N x 3``)."""
    return (model.background(coords) + model.residual(coords)).clamp(0.0, 1.0)


def normalized_grid(height, width, num_frames, ts=None, dtype=torch.float32) -> torch.Tensor:
    """``len(ts) x H x W x 3`` grid of normalised ``(x, y, t)``."""
    ts = np.arange(num_frames) if ts is None else np.asarray(ts)
    x = torch.linspace(-1, 1, width, dtype=dtype)
    y = torch.linspace(-1, 1, height, dtype=dtype)
    t = torch.as_tensor(2 * ts / max(num_frames - 1, 1) - 1, dtype=dtype)
    tt, yy, xx = torch.meshgrid(t, y, x, indexing="ij")
    return torch.stack([xx, yy, tt], dim=-1)


def pixel_coords(idx, height, width, num_frames, dtype=torch.float32) -> torch.Tensor:
    """Normalised coordinates of flat pixel indices into a ``T x H x W`` clip."""
    t = idx // (height * width)
    y = (idx // width) % height
    x = idx % width
    return torch.stack([
        2 * x.to(dtype) / (width - 1) - 1,
        2 * y.to(dtype) / (height - 1) - 1,
        2 * t.to(dtype) / max(num_frames - 1, 1) - 1,
    ], dim=-1)


def deform_jacobian(model: BackgroundModel, coords: torch.Tensor, create_graph=True):
    """Per-sample ``2 x 3`` Jacobian of ``g_b`` with respect to ``(x, y, t)``, plus ``g_b``."""
    x = coords.detach().requires_grad_(True)
    d = model.deform(x)
    rows = [torch.autograd.grad(d[:, k].sum(), x, create_graph=create_graph, retain_graph=True)[0]
            for k in range(2)]
    return torch.stack(rows, dim=1), d


def stage1_losses(model: BackgroundModel, coords: torch.Tensor, target: torch.Tensor,
                  cfg: Stage1Config | None = None) -> dict:
    """Summed loss terms over a pixel batch.

    ``recons`` is the squared error, ``smooth`` the L1 norm of the deformation
    Jacobian over ``(x, y, t)``, ``limit`` the L1 norm of the residual.
    """
    cfg = cfg or Stage1Config()
    if coords.shape[0] != target.shape[0]:
        raise InputError("coordinates and targets differ in length")
    jac, d = deform_jacobian(model, coords)
    resid = model.residual(coords)
    pred = (model.canonical(coords[..., :2] + d) + resid).clamp(0.0, 1.0)
    recons = ((pred - target) ** 2).sum()
    smooth = jac.abs().sum()
    limit = resid.abs().sum()
    total = recons + cfg.lambda_smooth * smooth + cfg.lambda_limit * limit
    return {"recons": recons, "smooth": smooth, "limit": limit, "total": total}


@dataclass
class BackgroundFit:
    model: BackgroundModel
    background: np.ndarray  # T x H x W renders of B((x, y) + g_b)
    loss_trace: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def pixel_flows(self) -> np.ndarray:
        return background_pixel_flows(self.model, *self.background.shape)


def _seeded(seed):
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@torch.no_grad()
def render_background(model: BackgroundModel, num_frames, height, width, chunk=65536) -> np.ndarray:
    grid = normalized_grid(height, width, num_frames).reshape(-1, 3)
    out = torch.cat([model.background(grid[i:i + chunk]) for i in range(0, len(grid), chunk)])
    return out.clamp(0.0, 1.0).reshape(num_frames, height, width).numpy()


@torch.no_grad()
def background_pixel_flows(model: BackgroundModel, num_frames, height, width) -> np.ndarray:
    """``g_b`` converted to frame-to-canonical displacements in pixels, ``T x H x W x 2``."""
    grid = normalized_grid(height, width, num_frames)
    d = model.deform(grid.reshape(-1, 3)).reshape(num_frames, height, width, 2).double()
    d[..., 0] *= (width - 1) / 2
    d[..., 1] *= (height - 1) / 2
    return d.numpy()


def fit_background(clip: VideoClip, cfg: Stage1Config | None = None, progress_every=0) -> BackgroundFit:
    """Minimise the weighted stage-1 objective with Adam on random pixel batches.

    The optimiser sees the summed loss divided by the batch size; the trace
    records the raw sums. A non-finite loss aborts with :class:`NumericError`
    carrying the last finite parameter snapshot.
    """
    cfg = (cfg or Stage1Config()).validate()
    gen = _seeded(cfg.seed)
    frames = torch.from_numpy(np.ascontiguousarray(clip.frames, dtype=np.float32))
    T, H, W = frames.shape
    flat = frames.reshape(-1)
    model = BackgroundModel.from_config(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    batch = min(cfg.batch_pixels, flat.numel())
    trace, snapshot = [], copy.deepcopy(model.state_dict())
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = torch.randint(0, flat.numel(), (batch,), generator=gen)
        parts = stage1_losses(model, pixel_coords(idx, H, W, T), flat[idx], cfg)
        row = {"step": step, **{k: parts[k].item() for k in LOSS_TERMS}}
        if not all(math.isfinite(row[k]) for k in LOSS_TERMS):
            raise NumericError(f"non-finite stage-1 loss at step {step}", checkpoint=snapshot)
        trace.append(row)
        opt.zero_grad(set_to_none=True)
        (parts["total"] / batch).backward()
        opt.step()
        if step % 50 == 0:
            snapshot = copy.deepcopy(model.state_dict())
        if progress_every and step % progress_every == 0:
            log.info("stage1 step %d total %.4f", step, row["total"])
    bg = render_background(model, T, H, W, cfg.render_chunk)
    return BackgroundFit(model, bg, trace, time.perf_counter() - start)


def save_checkpoint(path, model: BackgroundModel, cfg: Stage1Config, extra: dict | None = None):
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {"config": asdict(cfg), "seed": cfg.seed, **(extra or {})}
    save_arrays(Path(path), arrays, meta)


def load_checkpoint(path) -> tuple[BackgroundModel, Stage1Config, dict]:
    arrays, meta = load_arrays(Path(path))
    cfg = Stage1Config(**meta["config"])
    model = BackgroundModel.from_config(cfg)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return model, cfg, meta
