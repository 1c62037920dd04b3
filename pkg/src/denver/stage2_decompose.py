"""Test-time layer decomposition into vessel masks, a canonical foreground and layer motions.

The stage-1 background renders stay frozen. A U-Net predicts per-frame
foreground/background masks, a generator with a fixed latent code draws the
canonical foreground, and the vessel motion is a stationary Eulerian field
composed with the B-spline background flow.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from denver.errors import ConfigError, InputError, NumericError
from denver.imaging_io import FlowSequence, MaskSequence, VideoClip, warp_torch
from denver.motion_fields import (
    EulerianField,
    LayerFlows,
    SpaceTimeBSplineField,
    compose_vessel_flow,
    flow_scale,
    safe_norm,
)
from denver.vessel_prior import vessel_direction_field

log = logging.getLogger(__name__)

LOSS_NAMES = ("prior", "parallel", "warp", "mask", "rec")
NORM_EPS = 1e-6


@dataclass
class Stage2Config:
    lambda_prior: float = 0.5
    lambda_parallel: float = 0.05
    lambda_warp: float = 0.1
    lambda_mask: float = 0.1
    lambda_rec: float = 0.5
    alpha_prior: float = 0.5
    warmup_steps: int = 500
    warp_start: int = 700  # warp and mask consistency join here
    rec_start: int = 900
    total_steps: int = 2500
    lr: float = 1e-3
    seed: int = 0
    window: int = 4  # consecutive frames per optimisation step
    unet_channels: int = 8
    latent_channels: int = 16
    threshold: float = 0.5
    bspline_nx: int = 6
    bspline_ny: int = 6
    bspline_nt: int = 0  # 0: the default lattice for the clip length

    def validate(self):
        weights = [getattr(self, f"lambda_{n}") for n in LOSS_NAMES] + [self.alpha_prior]
        if min(weights) < 0:
            raise ConfigError("stage-2 loss weights must be non-negative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps)")
        if not self.warmup_steps <= self.warp_start <= self.rec_start:
            raise ConfigError("loss start steps must not precede the warm-up or each other")
        if self.lr <= 0 or self.window < 2 or self.unet_channels < 1:
            raise ConfigError("lr must be positive, window >= 2, unet_channels >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        return self

    def weight(self, name):
        return getattr(self, f"lambda_{name}")

    def active_losses(self, step) -> tuple[str, ...]:
        if step < self.warmup_steps:
            return ("prior",)
        active = ["prior", "parallel"]
        if step >= self.warp_start:
            active += ["warp", "mask"]
        if step >= self.rec_start:
            active.append("rec")
        return tuple(active)


# ---------------------------------------------------------------------------
# Networks


def _block(cin, cout):
    groups = max(1, cout // 4)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
    )


class MaskNet(nn.Module):
    """Two-level U-Net from ``(frame, t)`` to softmax foreground/background masks."""

    def __init__(self, channels=8):
        super().__init__()
        c = channels
        self.enc1 = _block(2, c)
        self.enc2 = _block(c, 2 * c)
        self.mid = _block(2 * c, 4 * c)
        self.dec2 = _block(4 * c + 2 * c, 2 * c)
        self.dec1 = _block(2 * c + c, c)
        self.head = nn.Conv2d(c, 2, 1)

    def forward(self, frames: torch.Tensor, ts: torch.Tensor) -> torch.Tensor:
        """``frames`` ``(N, H, W)``, ``ts`` normalised times ``(N,)`` -> ``(N, 2, H, W)``."""
        n, h, w = frames.shape
        ph, pw = (-h) % 4, (-w) % 4
        x = torch.stack([frames, ts.view(n, 1, 1).expand(n, h, w)], dim=1)
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2.0), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0), e1], 1))
        return torch.softmax(self.head(d1), dim=1)[:, :, :h, :w]


class ForegroundGenerator(nn.Module):
    """Convolutional decoder from a fixed random code to the canonical foreground."""

    def __init__(self, height, width, latent_channels=16, seed=0):
        super().__init__()
        self.height, self.width = height, width
        gen = torch.Generator().manual_seed(seed)
        zh, zw = math.ceil(height / 4), math.ceil(width / 4)
        self.register_buffer("z", 0.1 * torch.rand(1, latent_channels, zh, zw, generator=gen))
        c = 2 * latent_channels
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, c, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(c, latent_channels, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(latent_channels, 1, 1),
        )

    def forward(self) -> torch.Tensor:
        return torch.sigmoid(self.net(self.z))[0, 0, : self.height, : self.width]


# ---------------------------------------------------------------------------
# Losses (summed over pixels and frames)


def loss_prior(prior, mb, alpha=0.5) -> torch.Tensor:
    """``sum H * Mb + alpha * (1 - H) * (1 - Mb)``."""
    if prior.shape != mb.shape:
        raise InputError(f"prior {tuple(prior.shape)} and mask {tuple(mb.shape)} differ in shape")
    return (prior * mb + alpha * (1 - prior) * (1 - mb)).sum()


def loss_parallel(v, valid, flow) -> torch.Tensor:
    """Absolute cosine between the direction field and the flow over valid pixels."""
    fn = safe_norm(flow)
    use = valid.bool() & (fn >= NORM_EPS)
    if not bool(use.any()):
        return flow.sum() * 0
    vn = safe_norm(v)
    dot = (v * flow).sum(-1)
    cos = dot.abs() / (vn * fn).clamp_min(NORM_EPS * NORM_EPS)
    return torch.where(use, cos, torch.zeros_like(cos)).sum()


def loss_warp(layer_flows, layer_masks, guidance, scales=None) -> torch.Tensor:
    """Flow consistency along the guidance flow.

    ``layer_flows`` and ``layer_masks`` hold one ``(N, H, W, 2)`` / ``(N, H, W)``
    tensor per layer; ``guidance`` is ``(N - 1, H, W, 2)``. ``scales`` defaults
    to :func:`flow_scale` of each frame under its mask.
    """
    total = guidance.sum() * 0
    for li, (flow, mask) in enumerate(zip(layer_flows, layer_masks)):
        n = flow.shape[0]
        if guidance.shape[0] != n - 1:
            raise InputError("guidance must hold one flow per consecutive frame pair")
        if scales is None:
            s = torch.stack([flow_scale(flow[t], mask[t]) for t in range(n)])
        else:
            s = torch.as_tensor(scales[li], dtype=flow.dtype)
        nxt = warp_torch(flow[1:].permute(0, 3, 1, 2), guidance).permute(0, 2, 3, 1)
        diff = safe_norm(flow[:-1] - nxt)
        total = total + ((mask[:-1] * diff).sum((1, 2)) / (s[:-1] + s[1:])).sum()
    return total


def loss_mask(mf, mb) -> torch.Tensor:
    return (mf[1:] - mf[:-1]).abs().sum() + (mb[1:] - mb[:-1]).abs().sum()


def render_layers(bg, canonical_fg, fg_flows, mf, mb) -> torch.Tensor:
    """``Mf * Cf(x + Ff) + Mb * BG`` per frame."""
    n = fg_flows.shape[0]
    cf = canonical_fg.expand(n, 1, *canonical_fg.shape[-2:])
    warped = warp_torch(cf, fg_flows)[:, 0]
    return mf * warped + mb * bg


def render_and_rec(frames, bg, canonical_fg, fg_flows, mf, mb):
    """Rendered frames and their summed L1 distance to ``frames``."""
    pred = render_layers(bg, canonical_fg, fg_flows, mf, mb)
    return pred, (pred - frames).abs().sum()


def loss_total(parts: dict, cfg: Stage2Config | None = None) -> torch.Tensor:
    """Weighted sum of the loss terms present in ``parts``."""
    cfg = cfg or Stage2Config()
    total = 0.0
    for name in LOSS_NAMES:
        if name not in parts:
            continue
        value = parts[name]
        if not math.isfinite(float(torch.as_tensor(value).detach())):
            raise NumericError(f"non-finite {name} loss")
        total = total + cfg.weight(name) * value
    return total


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class SegmentationResult:
    soft_masks: MaskSequence
    binary_masks: MaskSequence
    canonical_fg: np.ndarray
    layer_flows: LayerFlows
    loss_trace: list[dict] = field(default_factory=list)
    wall_time: float = 0.0


class DecompositionModel(nn.Module):
    """All trainable stage-2 state."""

    def __init__(self, height, width, num_frames, cfg: Stage2Config):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.num_frames = num_frames
        self.masknet = MaskNet(cfg.unet_channels)
        self.generator = ForegroundGenerator(height, width, cfg.latent_channels, cfg.seed)
        self.background_flow = SpaceTimeBSplineField(
            height, width, num_frames, cfg.bspline_nx, cfg.bspline_ny, cfg.bspline_nt or None)
        self.eulerian = EulerianField(height, width)

    def time_code(self, ts):
        return torch.as_tensor(2 * np.asarray(ts) / max(self.num_frames - 1, 1) - 1, dtype=torch.float32)

    def masks(self, frames, ts):
        out = self.masknet(frames, self.time_code(ts))
        return out[:, 0], out[:, 1]

    def flows(self, ts):
        fb = self.background_flow(list(map(float, ts)))
        return compose_vessel_flow(self.eulerian(), fb), fb


def _direction_fields(prior):
    vs, valids = zip(*(vessel_direction_field(h) for h in prior))
    return torch.from_numpy(np.stack(vs).astype(np.float32)), torch.from_numpy(np.stack(valids))


def _check_inputs(clip, prior, guidance, background):
    T, H, W = clip.frames.shape
    if prior.shape != (T, H, W):
        raise InputError(f"prior masks {prior.shape} do not match the clip {(T, H, W)}")
    if guidance.shape != (T - 1, H, W, 2):
        raise InputError(f"guidance flows {guidance.shape} need shape {(T - 1, H, W, 2)}")
    if background.shape != (T, H, W):
        raise InputError(f"background renders {background.shape} do not match the clip")


def run_stage2(clip: VideoClip, prior: MaskSequence, guidance: FlowSequence, background,
               cfg: Stage2Config | None = None, background_flows=None, progress_every=0) -> SegmentationResult:
    """Fit masks, canonical foreground and layer motion with the staged loss schedule.

    ``background`` holds the frozen stage-1 renders ``T x H x W``.
    ``background_flows`` (``T x H x W x 2`` pixels, frame to canonical) warm-starts
    the B-spline background motion by least squares when given.
    """
    cfg = (cfg or Stage2Config()).validate()
    frames_np = np.asarray(clip.frames, dtype=np.float32)
    T, H, W = frames_np.shape
    prior_np = np.asarray(prior.masks).astype(np.float32)
    guide_np = np.asarray(guidance.flows, dtype=np.float32)
    bg_np = np.asarray(background, dtype=np.float32)
    _check_inputs(clip, prior_np, guide_np, bg_np)
    window = min(cfg.window, T)

    # the mask network sees the clip standardised; rendering uses raw intensities
    raw = torch.from_numpy(frames_np)
    frames = (raw - raw.mean()) / raw.std().clamp_min(1e-6)
    prior_t = torch.from_numpy(prior_np)
    guide, bg = torch.from_numpy(guide_np), torch.from_numpy(bg_np)
    v_all, valid_all = _direction_fields(prior_np)

    model = DecompositionModel(H, W, T, cfg)
    if background_flows is not None:
        model.background_flow.fit_(background_flows)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    pixels = window * H * W
    trace, snapshot = [], copy.deepcopy(model.state_dict())
    start_time = time.perf_counter()

    for step in range(cfg.total_steps):
        active = cfg.active_losses(step)
        s0 = int(torch.randint(0, T - window + 1, (1,), generator=gen))
        ts = list(range(s0, s0 + window))
        sl = slice(s0, s0 + window)
        mf, mb = model.masks(frames[sl], ts)
        parts = {"prior": loss_prior(prior_t[sl], mb, cfg.alpha_prior)}
        if len(active) > 1:
            ff, fb = model.flows(ts)
            parts["parallel"] = loss_parallel(v_all[sl], valid_all[sl], ff)
            if "warp" in active:
                parts["warp"] = loss_warp((ff, fb), (mf, mb), guide[s0:s0 + window - 1])
                parts["mask"] = loss_mask(mf, mb)
            if "rec" in active:
                _, parts["rec"] = render_and_rec(raw[sl], bg[sl], model.generator(), ff, mf, mb)
        try:
            total = loss_total(parts, cfg)
        except NumericError as err:
            raise NumericError(f"stage 2 step {step}: {err}", checkpoint=snapshot) from err
        row = {"step": step, "window": s0}
        row.update({n: (parts[n].item() if n in parts else None) for n in LOSS_NAMES})
        row["total"] = total.item()
        trace.append(row)
        opt.zero_grad(set_to_none=True)
        (total / pixels).backward()
        opt.step()
        if step % 50 == 0:
            snapshot = copy.deepcopy(model.state_dict())
        if progress_every and step % progress_every == 0:
            log.info("stage2 step %d total %.3f %s", step, row["total"], "+".join(active))

    return _collect(model, frames, cfg, trace, time.perf_counter() - start_time)


@torch.no_grad()
def _collect(model, frames, cfg, trace, wall_time) -> SegmentationResult:
    T = frames.shape[0]
    soft = torch.cat([model.masks(frames[t:t + 4], list(range(t, min(t + 4, T))))[0]
                      for t in range(0, T, 4)]).numpy()
    ff, fb = model.flows(range(T))
    return SegmentationResult(
        soft_masks=MaskSequence(soft.astype(np.float32), "soft"),
        binary_masks=MaskSequence((soft > cfg.threshold).astype(np.uint8), "binary"),
        canonical_fg=model.generator().numpy(),
        layer_flows=LayerFlows(FlowSequence(fb.numpy(), [(t, t) for t in range(T)]),
                               FlowSequence(ff.numpy(), [(t, t) for t in range(T)])),
        loss_trace=trace,
        wall_time=wall_time,
    )
