"""Guidance optical flow between consecutive frames.

Two providers: ``external`` reads precomputed ``flow_%05d.flo`` files (for
instance from a pretrained estimator), ``builtin`` runs a coarse-to-fine
Horn-Schunck solver so the pipeline stays self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from denver.errors import ConfigError, InputError
from denver.imaging_io import FlowSequence, VideoClip, read_flo, warp_bilinear, write_flo

FLOW_PATTERN = "flow_%05d.flo"

_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])


@dataclass
class FlowProviderConfig:
    mode: str = "builtin"
    external_dir: str | None = None
    hs_lambda: float = 15.0  # smoothness weight, on the 8-bit intensity scale
    hs_iters: int = 100
    pyramid_levels: int = 4

    def validate(self):
        if self.mode not in ("external", "builtin"):
            raise ConfigError(f"unknown flow mode {self.mode!r}")
        if self.mode == "external":
            if not self.external_dir or not Path(self.external_dir).is_dir():
                raise ConfigError(f"external flow dir {self.external_dir!r} does not exist")
        if self.hs_lambda <= 0 or self.hs_iters < 1 or self.pyramid_levels < 1:
            raise ConfigError("Horn-Schunck parameters must be positive")
        return self


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) < 16:
            break
        smooth = ndimage.gaussian_filter(prev, 1.0, mode="nearest")
        shape = ((prev.shape[0] + 1) // 2, (prev.shape[1] + 1) // 2)
        pyr.append(resize(smooth, shape, order=1, mode="edge", anti_aliasing=False))
    return pyr[::-1]


def _upsample_flow(flow, shape):
    sy = shape[0] / flow.shape[0]
    sx = shape[1] / flow.shape[1]
    up = resize(flow, (*shape, 2), order=1, mode="edge", anti_aliasing=False)
    up[..., 0] *= sx
    up[..., 1] *= sy
    return up


def _hs_level(f1, f2, flow, lam, iters):
    warped = warp_bilinear(f2, flow)
    gy1, gx1 = np.gradient(f1)
    gy2, gx2 = np.gradient(warped)
    ix = 0.5 * (gx1 + gx2)
    iy = 0.5 * (gy1 + gy2)
    it = warped - f1
    u0 = flow[..., 0].copy()
    v0 = flow[..., 1].copy()
    u, v = u0.copy(), v0.copy()
    denom = lam + ix * ix + iy * iy
    for _ in range(iters):
        ub = ndimage.convolve(u, _HS_KERNEL, mode="nearest")
        vb = ndimage.convolve(v, _HS_KERNEL, mode="nearest")
        r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
        u = ub - ix * r
        v = vb - iy * r
    return np.stack([u, v], axis=-1)


def horn_schunck_pair(f1, f2, cfg: FlowProviderConfig | None = None) -> np.ndarray:
    """Flow ``F`` with ``f1(x) ~ f2(x + F(x))``, as an ``H x W x 2`` array."""
    cfg = cfg or FlowProviderConfig()
    f1 = np.asarray(f1, dtype=np.float64) * 255.0
    f2 = np.asarray(f2, dtype=np.float64) * 255.0
    if f1.shape != f2.shape:
        raise InputError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    p1 = _pyramid(f1, cfg.pyramid_levels)
    p2 = _pyramid(f2, cfg.pyramid_levels)
    flow = np.zeros((*p1[0].shape, 2))
    for a, b in zip(p1, p2):
        if flow.shape[:2] != a.shape:
            flow = _upsample_flow(flow, a.shape)
        flow = _hs_level(a, b, flow, cfg.hs_lambda, cfg.hs_iters)
    return flow.astype(np.float32)


def estimate_flows(clip: VideoClip, cfg: FlowProviderConfig | None = None) -> FlowSequence:
    """Forward flows ``F_{t -> t+1}`` for every consecutive pair of the clip."""
    cfg = (cfg or FlowProviderConfig()).validate()
    n = clip.num_frames - 1
    if cfg.mode == "external":
        flows = []
        for t in range(n):
            p = Path(cfg.external_dir) / (FLOW_PATTERN % t)
            if not p.exists():
                raise InputError(f"missing external flow {p}")
            f = read_flo(p)
            if f.shape[:2] != clip.shape:
                raise InputError(f"{p} has resolution {f.shape[:2]}, clip is {clip.shape}")
            flows.append(f)
    else:
        flows = [horn_schunck_pair(clip.frames[t], clip.frames[t + 1], cfg) for t in range(n)]
    return FlowSequence(np.stack(flows), [(t, t + 1) for t in range(n)])


def save_flows(flows: FlowSequence, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for (t, _), f in zip(flows.pairing, flows.flows):
        p = directory / (FLOW_PATTERN % t)
        write_flo(f, p)
        paths.append(p)
    return paths


def load_flows(directory, num_frames: int) -> FlowSequence:
    directory = Path(directory)
    flows = []
    for t in range(num_frames - 1):
        p = directory / (FLOW_PATTERN % t)
        if not p.exists():
            raise InputError(f"missing flow file {p}")
        flows.append(read_flo(p))
    return FlowSequence(np.stack(flows))
