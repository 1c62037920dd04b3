"""Seeded synthetic angiography videos with ground-truth masks and motion.

A random vessel tree lies on a smooth background texture. Both deform with
a sinusoidal "heartbeat" B-spline field; contrast fills the tree from the
root at a constant arc-length speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from denver.errors import ConfigError
from denver.imaging_io import (
    FlowSequence,
    MaskSequence,
    VideoClip,
    save_binary_masks,
    save_frames,
    warp_bilinear,
    write_flo,
)
from denver.motion_fields import SpaceTimeBSplineField

SAMPLE_STEP = 0.25  # px between centreline samples


@dataclass
class SynthConfig:
    seed: int = 0
    size: int = 128
    frames: int = 24
    branches: int = 2
    max_depth: int = 4
    radius_root: float = 4.0
    contrast_speed: float = 12.0
    heartbeat_period: float = 12.0
    heartbeat_amp: float = 3.0
    noise_sigma: float = 0.02
    dip_per_radius: float = 0.06
    root_length: float = 0.3  # fraction of the image size

    def validate(self):
        if self.size < 16 or self.frames < 2:
            raise ConfigError("synthetic clips need size >= 16 and at least 2 frames")
        if self.branches < 1 or self.max_depth < 0 or self.radius_root <= 0:
            raise ConfigError("tree parameters must be positive")
        if self.heartbeat_period <= 0:
            raise ConfigError("heartbeat_period must be positive")
        if min(self.contrast_speed, self.heartbeat_amp, self.noise_sigma, self.dip_per_radius) < 0:
            raise ConfigError("speeds, amplitudes and noise must be non-negative")
        if self.heartbeat_amp >= self.size / 8:
            raise ConfigError("heartbeat_amp must stay below size / 8")
        return self


@dataclass
class Segment:
    points: np.ndarray  # (N, 2) as (x, y), canonical coordinates
    arclen: np.ndarray  # (N,) arc length from the tree root
    radius: float
    depth: int
    parent: int | None


@dataclass
class SynthSample:
    clip: VideoClip
    gt_masks: MaskSequence
    gt_bg_flows: FlowSequence  # T frame-to-canonical fields
    centerlines: list[Segment]
    canonical_background: np.ndarray
    clean_background: np.ndarray  # deformed background without vessels or noise
    config: SynthConfig = field(default_factory=SynthConfig)

    def annotated_frames(self, fraction: float = 0.5) -> list[int]:
        return annotated_frames(self.gt_masks.masks, fraction)


def annotated_frames(gt_masks, fraction: float = 0.5) -> list[int]:
    """Frames where the visible vessel area reaches ``fraction`` of its maximum."""
    areas = np.asarray(gt_masks).reshape(len(gt_masks), -1).sum(1)
    if areas.max() == 0:
        return []
    return [int(t) for t in np.flatnonzero(areas >= fraction * areas.max())]


def _quadratic(p0, p1, p2):
    approx = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    n = max(int(math.ceil(approx / SAMPLE_STEP)) + 1, 2)
    u = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - u) ** 2 * p0 + 2 * (1 - u) * u * p1 + u ** 2 * p2


def _inside(p, size, margin):
    return margin <= p[0] <= size - 1 - margin and margin <= p[1] <= size - 1 - margin


def grow_vessel_tree(seed: int, cfg: SynthConfig) -> list[Segment]:
    """Binary-style branching tree of quadratic segments, deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.size
    margin = 0.08 * size
    start = np.array([rng.uniform(0.15, 0.35) * size, rng.uniform(0.08, 0.15) * size])
    centre = np.array([size / 2, size / 2])
    heading = math.atan2(*(centre - start)[::-1]) + rng.uniform(-0.3, 0.3)
    segments: list[Segment] = []

    def add(p0, angle, length, radius, depth, parent, s0):
        direction = np.array([math.cos(angle), math.sin(angle)])
        for _ in range(12):
            end = p0 + length * direction
            if _inside(end, size, margin):
                break
            angle = angle + rng.uniform(-1.2, 1.2)
            direction = np.array([math.cos(angle), math.sin(angle)])
        else:
            to_c = centre - p0
            direction = to_c / (np.linalg.norm(to_c) + 1e-12)
            angle = math.atan2(direction[1], direction[0])
            end = p0 + length * direction
        normal = np.array([-direction[1], direction[0]])
        ctrl = 0.5 * (p0 + end) + normal * rng.uniform(-0.25, 0.25) * length
        pts = _quadratic(p0, ctrl, end)
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arclen = s0 + np.concatenate([[0.0], np.cumsum(steps)])
        segments.append(Segment(pts, arclen, radius, depth, parent))
        me = len(segments) - 1
        if depth >= cfg.max_depth:
            return
        tangent = pts[-1] - pts[-2]
        base = math.atan2(tangent[1], tangent[0])
        spread = np.linspace(-1.0, 1.0, cfg.branches) if cfg.branches > 1 else np.zeros(1)
        for k in spread:
            child_angle = base + k * rng.uniform(0.35, 0.8) + rng.uniform(-0.1, 0.1)
            add(pts[-1], child_angle, length * 0.8, radius * 0.75, depth + 1, me, arclen[-1])

    add(start, heading, cfg.root_length * size, cfg.radius_root, 0, None, 0.0)
    return segments


def heartbeat_flows(cfg: SynthConfig, rng) -> np.ndarray:
    """``T x H x W x 2`` frame-to-canonical flows: a random spatial B-spline pattern
    scaled by ``amp * sin(2 pi t / period)``."""
    n, T = cfg.size, cfg.frames
    field_ = SpaceTimeBSplineField(n, n, max(T, 2), nx=6, ny=6, nt=4, dtype=torch.float64)
    pattern = rng.normal(size=(6, 6, 1, 2)).repeat(4, axis=2)
    with torch.no_grad():
        field_.control.copy_(torch.from_numpy(pattern))
        spatial = field_([0.0])[0].numpy()
    peak = np.linalg.norm(spatial, axis=-1).max()
    spatial = spatial / peak if peak > 0 else spatial
    phase = np.sin(2 * np.pi * np.arange(T) / cfg.heartbeat_period)
    return cfg.heartbeat_amp * phase[:, None, None, None] * spatial[None]


def random_texture(size: int, rng) -> np.ndarray:
    """Smooth low-frequency texture in [0.45, 0.85]."""
    t = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 10, mode="reflect")
    t = t + 0.5 * ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 25, mode="reflect")
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    return 0.45 + 0.4 * t


def _tube_profile(d, r):
    """Cosine falloff, 1 on the centreline and exactly 0 from radius ``r`` on."""
    q = np.clip(d / r, 0.0, 1.0)
    return np.where(d <= r, np.cos(0.5 * np.pi * q * q), 0.0)


def _render_vessels(segments, cfg, coords, front):
    """Intensity dip and visible-tube mask at canonical ``coords`` (N x 2)."""
    pts = np.concatenate([s.points for s in segments])
    arc = np.concatenate([s.arclen for s in segments])
    rad = np.concatenate([np.full(len(s.points), s.radius) for s in segments])
    visible = arc < front
    dip = np.zeros(len(coords))
    mask = np.zeros(len(coords), dtype=bool)
    if not visible.any():
        return dip, mask
    pts, rad = pts[visible], rad[visible]
    tree = cKDTree(pts)
    rmax = float(rad.max())
    k = min(len(pts), 128)
    while True:
        d, idx = tree.query(coords, k=list(range(1, k + 1)), distance_upper_bound=rmax + 0.5)
        # every neighbour slot filled: some in-range samples may have been cut off
        if k == len(pts) or not np.isfinite(d[:, -1]).any():
            break
        k = min(len(pts), 2 * k)
    found = np.isfinite(d)
    idx = np.where(found, idx, 0)
    r = rad[idx]
    inside = found & (d <= r)
    contrib = np.where(inside, cfg.dip_per_radius * r * _tube_profile(np.where(found, d, 0.0), r), 0.0)
    dip = contrib.max(axis=1)
    mask = inside.any(axis=1)
    return dip, mask


def generate_video(cfg: SynthConfig | None = None) -> SynthSample:
    cfg = (cfg or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    segments = grow_vessel_tree(int(rng.integers(2 ** 31)), cfg)
    canonical = random_texture(cfg.size, rng)
    flows = heartbeat_flows(cfg, rng)
    n, T = cfg.size, cfg.frames
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    frames, masks, clean = [], [], []
    for t in range(T):
        bg = warp_bilinear(canonical, flows[t])
        coords = np.stack([xs + flows[t, ..., 0], ys + flows[t, ..., 1]], axis=-1).reshape(-1, 2)
        dip, mask = _render_vessels(segments, cfg, coords, cfg.contrast_speed * t)
        frame = bg - dip.reshape(n, n)
        if cfg.noise_sigma > 0:
            frame = frame + rng.normal(0.0, cfg.noise_sigma, frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
        masks.append(mask.reshape(n, n))
        clean.append(bg)
    return SynthSample(
        clip=VideoClip(np.stack(frames), [f"{t:05d}" for t in range(T)]),
        gt_masks=MaskSequence(np.stack(masks).astype(np.uint8), "binary"),
        gt_bg_flows=FlowSequence(flows, [(t, t) for t in range(T)]),
        centerlines=segments,
        canonical_background=canonical,
        clean_background=np.stack(clean),
        config=cfg,
    )


def write_sample(sample: SynthSample, directory) -> Path:
    """Write ``frames/``, ``gt_masks/``, ``gt_flows/`` and ``manifest.json``."""
    directory = Path(directory)
    save_frames(sample.clip.frames, directory / "frames", "frame")
    save_binary_masks(sample.gt_masks.masks, directory / "gt_masks", "mask")
    (directory / "gt_flows").mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(sample.gt_bg_flows.flows):
        write_flo(f, directory / "gt_flows" / f"flow_{t:05d}.flo")
    manifest = {
        "config": asdict(sample.config),
        "seed": sample.config.seed,
        "annotated_frames": sample.annotated_frames(),
        "num_segments": len(sample.centerlines),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory
