"""Layer motion models: a space-time cubic B-spline for the background and a
stationary Eulerian field for the vessels.

Layer flows are frame-to-canonical displacements: the canonical image of a
layer is sampled at ``x + F_t(x)`` to render frame ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from denver.errors import InputError, RangeError
from denver.imaging_io import FlowSequence, warp_field

SCALE_FLOOR = 1e-3


def cubic_bspline_basis(u: torch.Tensor, n_ctrl: int) -> torch.Tensor:
    """Uniform cubic B-spline weights, ``(len(u), n_ctrl)``.

    Parameters ``u`` must lie in ``[1, n_ctrl - 2]``; on that interval the
    weights of every row sum to one.
    """
    seg = u.detach().floor().clamp(1, n_ctrl - 3).long()
    s = u - seg.to(u.dtype)
    s2, s3 = s * s, s * s * s
    w = torch.stack([
        (1 - s) ** 3 / 6,
        (3 * s3 - 6 * s2 + 4) / 6,
        (-3 * s3 + 3 * s2 + 3 * s + 1) / 6,
        s3 / 6,
    ], dim=-1)
    basis = torch.zeros(u.shape[0], n_ctrl, dtype=u.dtype, device=u.device)
    cols = seg[:, None] + torch.arange(-1, 3, device=u.device)[None]
    return basis.scatter(1, cols, w)


def default_temporal_controls(num_frames: int) -> int:
    return max(4, math.ceil(num_frames / 8))


class SpaceTimeBSplineField(nn.Module):
    """Dense background flow from a ``Cx x Cy x Ct x 2`` control lattice (pixels)."""

    def __init__(self, height, width, num_frames, nx=6, ny=6, nt=None, dtype=torch.float32):
        super().__init__()
        nt = nt or default_temporal_controls(num_frames)
        if min(nx, ny, nt) < 4:
            raise InputError("cubic support needs at least 4 controls per axis")
        if num_frames < 2 or height < 2 or width < 2:
            raise InputError("field domain must span at least 2 frames and 2 x 2 pixels")
        self.height, self.width, self.num_frames = height, width, num_frames
        self.control = nn.Parameter(torch.zeros(nx, ny, nt, 2, dtype=dtype))
        xs = torch.arange(width, dtype=torch.float64)
        ys = torch.arange(height, dtype=torch.float64)
        self.register_buffer("bx", cubic_bspline_basis(1 + xs / self.spacing[1], nx).to(dtype))
        self.register_buffer("by", cubic_bspline_basis(1 + ys / self.spacing[0], ny).to(dtype))

    @property
    def shape(self):
        return tuple(self.control.shape[:3])

    @property
    def spacing(self) -> tuple[float, float]:
        """Pixels between spatial knots, ``(rows, cols)``."""
        nx, ny, _ = self.shape
        return (self.height - 1) / (ny - 3), (self.width - 1) / (nx - 3)

    @property
    def t_knots(self) -> np.ndarray:
        nt = self.shape[2]
        step = (self.num_frames - 1) / (nt - 3)
        return (np.arange(nt) - 1) * step

    def time_basis(self, ts) -> torch.Tensor:
        ts = torch.as_tensor(ts, dtype=torch.float64).reshape(-1)
        if ts.numel() and (ts.min() < 0 or ts.max() > self.num_frames - 1):
            raise RangeError(f"t outside [0, {self.num_frames - 1}]")
        nt = self.shape[2]
        u = 1 + ts * (nt - 3) / (self.num_frames - 1)
        return cubic_bspline_basis(u, nt).to(self.control.dtype)

    def forward(self, ts) -> torch.Tensor:
        """Flows at the times ``ts``, shape ``(len(ts), H, W, 2)``."""
        bt = self.time_basis(ts)
        return torch.einsum("xi,yj,tk,ijkc->tyxc", self.bx, self.by, bt, self.control)

    @torch.no_grad()
    def fit_(self, flows) -> "SpaceTimeBSplineField":
        """Least-squares fit of the controls to dense flows at integer times ``0..T-1``."""
        f = torch.as_tensor(np.asarray(flows), dtype=torch.float64)
        if tuple(f.shape) != (self.num_frames, self.height, self.width, 2):
            raise InputError(f"flows shape {tuple(f.shape)} does not match the field domain")
        bt = self.time_basis(np.arange(self.num_frames)).double()
        px = torch.linalg.pinv(self.bx.double())
        py = torch.linalg.pinv(self.by.double())
        pt = torch.linalg.pinv(bt)
        ctrl = torch.einsum("ix,jy,kt,tyxc->ijkc", px, py, pt, f)
        self.control.copy_(ctrl.to(self.control.dtype))
        return self


def bspline_eval(field: SpaceTimeBSplineField, t) -> torch.Tensor:
    """Dense ``H x W x 2`` flow of ``field`` at a single time ``t``."""
    return field([float(t)])[0]


class EulerianField(nn.Module):
    """Stationary vessel motion, dense ``H x W x 2`` in canonical coordinates."""

    def __init__(self, height, width, dtype=torch.float32):
        super().__init__()
        self.values = nn.Parameter(torch.zeros(height, width, 2, dtype=dtype))

    def forward(self):
        return self.values


def compose_vessel_flow(eulerian: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """Foreground flow ``E(x + Fb(x)) + Fb(x)``.

    ``eulerian`` is ``H x W x 2``; ``background`` is ``H x W x 2`` or a
    stack ``T x H x W x 2``.
    """
    single = background.ndim == 3
    fb = background[None] if single else background
    if eulerian.shape != fb.shape[1:]:
        raise InputError(f"Eulerian field {tuple(eulerian.shape)} vs flow {tuple(fb.shape)}")
    e = eulerian[None].expand(fb.shape[0], *eulerian.shape)
    out = warp_field(e, fb) + fb
    return out[0] if single else out


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero (not NaN) gradient at 0."""
    sq = (v * v).sum(-1)
    return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


def flow_scale(flow: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mask-weighted mean flow magnitude, floored at 1e-3."""
    n = safe_norm(flow)
    if mask is None:
        mean = n.mean()
    else:
        total = mask.sum()
        mean = (mask * n).sum() / total.clamp_min(1e-12) if bool(total > 0) else n.sum() * 0
    return mean.clamp_min(SCALE_FLOOR)


@dataclass
class LayerFlows:
    """Frame-to-canonical flows of both layers, each ``T x H x W x 2``."""

    background: FlowSequence
    foreground: FlowSequence

    def __post_init__(self):
        if self.background.flows.shape != self.foreground.flows.shape:
            raise InputError("background and foreground flows must share T and resolution")
