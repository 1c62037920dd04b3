"""Hessian-based vessel prior masks and the vessel direction field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from denver.errors import ConfigError
from denver.imaging_io import MaskSequence, VideoClip, connected_components, distance_transform

DARK_ON_BRIGHT = "dark-on-bright"
BRIGHT_ON_DARK = "bright-on-dark"


@dataclass
class VesselnessConfig:
    scales: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    alpha_f: float = 0.5
    beta_f: float = 0.5  # unused by the 2D filter, kept for config compatibility
    c_f: float | None = None  # None: half the largest Hessian norm of the frame
    polarity: str = DARK_ON_BRIGHT

    def validate(self):
        if not self.scales:
            raise ConfigError("vesselness needs at least one scale")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("vesselness scales must be positive")
        if self.alpha_f <= 0 or self.beta_f <= 0 or (self.c_f is not None and self.c_f <= 0):
            raise ConfigError("vesselness sensitivities must be positive")
        if self.polarity not in (DARK_ON_BRIGHT, BRIGHT_ON_DARK):
            raise ConfigError(f"unknown polarity {self.polarity!r}")
        return self


@dataclass
class PriorConfig:
    intensity_percentile: float = 0.20
    min_component_area: int = 30
    seed_quantile: float = 0.9

    def validate(self):
        for name in ("intensity_percentile", "seed_quantile"):
            q = getattr(self, name)
            if not 0.0 < q < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {q}")
        if self.min_component_area < 1:
            raise ConfigError("min_component_area must be >= 1")
        return self


def _gaussian_kernels(sigma):
    """Sampled Gaussian and its first two derivatives, as correlation weights.

    The derivative kernels are corrected to sum to zero so that the Hessian
    ignores additive intensity offsets.
    """
    r = int(np.ceil(4.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    d1 = x / sigma ** 2 * g
    d1 -= d1.mean()
    d2 = (x * x / sigma ** 4 - 1.0 / sigma ** 2) * g
    d2 -= g * d2.sum()
    return g, d1, d2


def _separable(img, ky, kx):
    out = ndimage.correlate1d(img, ky, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kx, axis=1, mode="nearest")


def hessian_eigenvalues(frame, sigma):
    """Scale-normalised Hessian eigenvalues ``(l1, l2)`` with ``|l1| <= |l2|``."""
    img = np.asarray(frame, dtype=np.float64)
    g, d1, d2 = _gaussian_kernels(sigma)
    s2 = sigma * sigma
    hxx = s2 * _separable(img, g, d2)
    hyy = s2 * _separable(img, d2, g)
    hxy = s2 * _separable(img, d1, d1)
    half_trace = 0.5 * (hxx + hyy)
    root = np.sqrt((0.5 * (hxx - hyy)) ** 2 + hxy ** 2)
    a, b = half_trace + root, half_trace - root
    swap = np.abs(a) < np.abs(b)
    l1 = np.where(swap, a, b)
    l2 = np.where(swap, b, a)
    return l1, l2


def frangi_vesselness(frame, cfg: VesselnessConfig | None = None) -> np.ndarray:
    """Multiscale Frangi tubularity in [0, 1], maximum over ``cfg.scales``."""
    cfg = (cfg or VesselnessConfig()).validate()
    per_scale = [hessian_eigenvalues(frame, s) for s in cfg.scales]
    norms = [np.hypot(l1, l2) for l1, l2 in per_scale]
    c = cfg.c_f
    if c is None:
        c = 0.5 * max(float(n.max()) for n in norms)
    out = np.zeros(np.shape(frame), dtype=np.float64)
    # derivative filters of a flat image leave round-off only
    if c < 1e-10:
        return out
    for (l1, l2), s_norm in zip(per_scale, norms):
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = np.where(l2 != 0, l1 / l2, 0.0)
        v = np.exp(-rb ** 2 / (2 * cfg.alpha_f ** 2)) * (1.0 - np.exp(-s_norm ** 2 / (2 * c ** 2)))
        wrong_sign = l2 < 0 if cfg.polarity == DARK_ON_BRIGHT else l2 > 0
        v[wrong_sign | (l2 == 0)] = 0.0
        np.maximum(out, v, out=out)
    return np.clip(out, 0.0, 1.0)


def darkness_gain(frame) -> float:
    """Darker, contrast-filled frames keep more pixels: ``clamp(2 (1 - mean), 0.5, 2)``."""
    return float(np.clip(2.0 * (1.0 - float(np.mean(frame))), 0.5, 2.0))


def binarize_prior(vesselness, frame, cfg: PriorConfig | None = None) -> np.ndarray:
    cfg = (cfg or PriorConfig()).validate()
    v = np.asarray(vesselness, dtype=np.float64)
    keep = cfg.intensity_percentile * darkness_gain(frame)
    q = float(np.clip(1.0 - keep, 0.0, 1.0))
    thr = np.quantile(v, q)
    return ((v > thr) & (v > 0)).astype(np.uint8)


def region_grow_clean(mask, vesselness, cfg: PriorConfig | None = None) -> np.ndarray:
    """Keep the 8-connected mask regions reached from strong seeds, minus small ones."""
    cfg = (cfg or PriorConfig()).validate()
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    v = np.asarray(vesselness, dtype=np.float64)
    seeds = m & (v >= np.quantile(v[m], cfg.seed_quantile))
    labels, areas = connected_components(m)
    seeded = np.zeros(areas.size + 1, dtype=bool)
    seeded[np.unique(labels[seeds])] = True
    big = np.concatenate([[False], areas >= cfg.min_component_area])
    keep = seeded & big
    keep[0] = False
    return keep[labels].astype(np.uint8)


def prior_mask(frame, vcfg=None, pcfg=None) -> np.ndarray:
    v = frangi_vesselness(frame, vcfg)
    return region_grow_clean(binarize_prior(v, frame, pcfg), v, pcfg)


def make_prior_masks(clip: VideoClip, vcfg=None, pcfg=None) -> MaskSequence:
    """Per-frame, temporally independent prior masks ``H_t``."""
    vcfg = (vcfg or VesselnessConfig()).validate()
    pcfg = (pcfg or PriorConfig()).validate()
    masks = np.stack([prior_mask(f, vcfg, pcfg) for f in clip.frames])
    return MaskSequence(masks, "binary")


def vessel_direction_field(prior_mask, eps: float = 1e-6):
    """Gradient of the mask's distance transform.

    Returns ``(V, valid)``: ``V`` is ``H x W x 2`` as ``(d/dx, d/dy)``, zero
    off the mask; ``valid`` marks mask pixels whose gradient is not
    vanishing (the medial ridge and empty frames are excluded).
    """
    m = np.asarray(prior_mask).astype(bool)
    d = distance_transform(m)
    if d.shape[0] > 1:
        gy = np.gradient(d, axis=0)
    else:
        gy = np.zeros_like(d)
    gx = np.gradient(d, axis=1) if d.shape[1] > 1 else np.zeros_like(d)
    v = np.stack([gx, gy], axis=-1)
    v[~m] = 0.0
    valid = m & (np.hypot(v[..., 0], v[..., 1]) >= eps)
    return v, valid
