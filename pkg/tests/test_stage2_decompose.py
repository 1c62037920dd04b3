import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from denver.errors import ConfigError, InputError, NumericError
from denver.imaging_io import FlowSequence, MaskSequence
from denver.metrics_eval import dice
from denver.motion_fields import EulerianField, SpaceTimeBSplineField, compose_vessel_flow
from denver.stage2_decompose import (
    ForegroundGenerator,
    MaskNet,
    Stage2Config,
    loss_mask,
    loss_parallel,
    loss_prior,
    loss_total,
    loss_warp,
    render_and_rec,
    run_stage2,
)
from denver.synth_gen import SynthConfig, _render_vessels, generate_video
from denver.vessel_prior import PriorConfig, VesselnessConfig, make_prior_masks, vessel_direction_field

D = torch.float64


# -- prior ----------------------------------------------------------------------------

def test_prior_complementary_is_zero():
    h = (torch.rand(6, 7) > 0.5).to(D)
    for alpha in (0.0, 0.5, 2.0):
        assert float(loss_prior(h, 1 - h, alpha)) == 0.0


def test_prior_saturated():
    one = torch.ones(10, 10, dtype=D)
    assert float(loss_prior(one, one)) == 100.0


def test_prior_hand_value():
    h = torch.zeros(100, dtype=D)
    h[:10] = 1
    assert float(loss_prior(h, torch.full((100,), 0.5, dtype=D), 0.5)) == pytest.approx(27.5)


def test_prior_shape_mismatch():
    with pytest.raises(InputError):
        loss_prior(torch.zeros(3, 3), torch.zeros(3, 4))


# -- parallel ---------------------------------------------------------------------------

def bar_field():
    m = np.zeros((12, 12), bool)
    m[:, 3:9] = True
    v, valid = vessel_direction_field(m)
    return torch.from_numpy(v), torch.from_numpy(valid)


def test_parallel_orthogonal_is_zero():
    v, valid = bar_field()
    flow = torch.zeros(12, 12, 2, dtype=D)
    flow[..., 1] = 1.0
    assert float(loss_parallel(v, valid, flow)) == 0.0


def test_parallel_aligned_counts_valid():
    v, valid = bar_field()
    flow = torch.zeros(12, 12, 2, dtype=D)
    flow[..., 0] = 0.3
    assert int(valid.sum()) > 0
    assert float(loss_parallel(v, valid, flow)) == pytest.approx(int(valid.sum()))


def test_parallel_diagonal():
    v, valid = bar_field()
    flow = torch.ones(12, 12, 2, dtype=D)
    assert float(loss_parallel(v, valid, flow)) == pytest.approx(int(valid.sum()) / math.sqrt(2), abs=1e-6)


def test_parallel_skips_tiny_flow_and_empty():
    v, valid = bar_field()
    assert float(loss_parallel(v, valid, torch.full((12, 12, 2), 1e-8, dtype=D))) == 0.0
    v0, valid0 = vessel_direction_field(np.zeros((5, 5), bool))
    assert float(loss_parallel(torch.from_numpy(v0), torch.from_numpy(valid0), torch.ones(5, 5, 2, dtype=D))) == 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2 ** 16))
def test_parallel_scale_invariant(c, seed):
    v, valid = bar_field()
    flow = torch.randn(12, 12, 2, dtype=D, generator=torch.Generator().manual_seed(seed))
    assert float(loss_parallel(v, valid, c * flow)) == pytest.approx(float(loss_parallel(v, valid, flow)), rel=1e-9)


# -- warp ---------------------------------------------------------------------------------

def test_warp_time_constant_zero_guidance():
    f = torch.randn(1, 6, 6, 2, dtype=D).expand(3, 6, 6, 2)
    m = torch.rand(3, 6, 6, dtype=D)
    assert float(loss_warp([f], [m], torch.zeros(2, 6, 6, 2, dtype=D))) == 0.0


def test_warp_constant_fields_any_guidance():
    f = torch.zeros(2, 6, 6, 2, dtype=D)
    f[..., 0] = 1.0
    g = 3 * torch.randn(1, 6, 6, 2, dtype=D)
    assert float(loss_warp([f, f], [torch.ones(2, 6, 6, dtype=D)] * 2, g)) == pytest.approx(0.0, abs=1e-12)


def test_warp_hand_value():
    f = torch.zeros(2, 5, 5, 2, dtype=D)
    f[0, ..., 0] = 2.0
    out = loss_warp([f], [torch.ones(2, 5, 5, dtype=D)], torch.zeros(1, 5, 5, 2, dtype=D))
    assert float(out) == pytest.approx(25 * 2 / (2 + 1e-3))


def test_warp_needs_pairs():
    with pytest.raises(InputError):
        loss_warp([torch.zeros(3, 4, 4, 2)], [torch.ones(3, 4, 4)], torch.zeros(3, 4, 4, 2))


# -- mask ---------------------------------------------------------------------------------

def test_mask_constant_zero():
    m = torch.rand(1, 5, 5, dtype=D).expand(4, 5, 5)
    assert float(loss_mask(m, 1 - m)) == 0.0


def test_mask_flip():
    mf = torch.zeros(2, 6, 6, dtype=D)
    mf[1, :2, :3] = 1.0  # k = 6 pixels flip
    assert float(loss_mask(mf, 1 - mf)) == 12.0


def test_mask_hand_value():
    mf = torch.stack([torch.full((10, 10), 0.3, dtype=D), torch.full((10, 10), 0.5, dtype=D)])
    assert float(loss_mask(mf, 1 - mf)) == pytest.approx(40.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2 ** 16), st.booleans())
def test_mask_zero_iff_constant(T, seed, constant):
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(1, 4, 4, dtype=D, generator=g)
    m = base.expand(T, 4, 4).clone()
    if not constant:
        m[-1, 0, 0] = 1.0 - m[-1, 0, 0] + 1e-3
    assert (float(loss_mask(m, 1 - m)) == 0.0) == constant


# -- rendering ------------------------------------------------------------------------------

def test_rec_background_only():
    frames = torch.rand(3, 5, 5, dtype=D)
    zeros = torch.zeros(3, 5, 5, dtype=D)
    _, rec = render_and_rec(frames, frames, torch.rand(5, 5, dtype=D), torch.zeros(3, 5, 5, 2, dtype=D),
                            zeros, 1 - zeros)
    assert float(rec) == 0.0


def test_rec_constant_gap():
    frames = torch.full((3, 4, 6), 0.5, dtype=D)
    bg = frames + 0.1
    zeros = torch.zeros(3, 4, 6, dtype=D)
    _, rec = render_and_rec(frames, bg, torch.zeros(4, 6, dtype=D), torch.zeros(3, 4, 6, 2, dtype=D),
                            zeros, 1 - zeros)
    assert float(rec) == pytest.approx(0.1 * 24 * 3)


def test_rec_with_true_layers_reaches_noise_floor():
    cfg = SynthConfig(size=64, frames=8, seed=2, noise_sigma=0.02, contrast_speed=20, max_depth=2)
    s = generate_video(cfg)
    n = cfg.size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    dip, _ = _render_vessels(s.centerlines, cfg, np.stack([xs, ys], -1).reshape(-1, 2), np.inf)
    canonical_fg = torch.from_numpy(s.canonical_background - dip.reshape(n, n))
    mf = torch.from_numpy(s.gt_masks.masks.astype(np.float64))
    _, rec = render_and_rec(torch.from_numpy(s.clip.frames.astype(np.float64)),
                            torch.from_numpy(s.clean_background), canonical_fg,
                            torch.from_numpy(s.gt_bg_flows.flows.astype(np.float64)), mf, 1 - mf)
    floor = cfg.noise_sigma * n * n * cfg.frames * math.sqrt(2 / math.pi)
    assert float(rec) < 1.1 * floor


# -- total -----------------------------------------------------------------------------------

PARTS = ("prior", "parallel", "warp", "mask", "rec")


def test_total_examples():
    cfg = Stage2Config()
    assert loss_total(dict.fromkeys(PARTS, 0.0), cfg) == 0.0
    assert loss_total(dict.fromkeys(PARTS, 1.0), cfg) == pytest.approx(1.25, abs=1e-12)
    assert loss_total(dict(zip(PARTS, (2.0, 0, 0, 0, 4.0))), cfg) == pytest.approx(3.0, abs=1e-12)


def test_total_non_finite():
    with pytest.raises(NumericError):
        loss_total({"prior": 1.0, "rec": float("nan")})


# -- gradients -----------------------------------------------------------------------------------

def _fd_check(params, objective, probes=60, seed=0, h=1e-6):
    for p in params:
        p.grad = None
    objective().backward()
    grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(len(params)))
        p = params[k]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        with torch.no_grad():
            p[idx] += h
            up = float(objective())
            p[idx] -= 2 * h
            down = float(objective())
            p[idx] += h
        fd = (up - down) / (2 * h)
        g = float(grads[k][idx])
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-6))
    return worst


def _toy(T=3, n=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    logits = (torch.randn(T, 2, n, n, dtype=D, generator=g)).requires_grad_(True)
    field = SpaceTimeBSplineField(n, n, T, nx=4, ny=4, nt=4, dtype=D)
    eul = EulerianField(n, n, dtype=D)
    with torch.no_grad():
        field.control.copy_(0.7 * torch.randn(field.control.shape, dtype=D, generator=g))
        eul.values.copy_(0.5 * torch.randn(eul.values.shape, dtype=D, generator=g))
    return g, logits, field, eul


def _masks(logits):
    m = torch.softmax(logits, dim=1)
    return m[:, 0], m[:, 1]


def test_grad_prior():
    g, logits, _, _ = _toy()
    h = (torch.rand(3, 5, 5, generator=g) > 0.5).to(D)
    assert _fd_check([logits], lambda: loss_prior(h, _masks(logits)[1], 0.5)) < 1e-3


def test_grad_parallel():
    g, _, field, eul = _toy(seed=1)
    m = np.zeros((5, 5), bool)
    m[:, 1:4] = True
    m[0, 0] = True
    v, valid = (torch.from_numpy(a) for a in vessel_direction_field(m))

    def objective():
        fb = field([0.0, 1.0, 2.0])
        return loss_parallel(v, valid, compose_vessel_flow(eul(), fb))

    assert _fd_check([field.control, eul.values], objective) < 1e-3


def test_grad_warp():
    g, logits, field, eul = _toy(seed=2)
    guide = 0.8 * torch.randn(2, 5, 5, 2, dtype=D, generator=g)

    def objective():
        fb = field([0.0, 1.0, 2.0])
        ff = compose_vessel_flow(eul(), fb)
        mf, mb = _masks(logits)
        return loss_warp((ff, fb), (mf, mb), guide)

    assert _fd_check([logits, field.control, eul.values], objective) < 1e-3


def test_grad_mask():
    _, logits, _, _ = _toy(seed=3)
    assert _fd_check([logits], lambda: loss_mask(*_masks(logits))) < 1e-3


def test_grad_rec():
    g, logits, field, eul = _toy(seed=4)
    frames = torch.rand(3, 5, 5, dtype=D, generator=g)
    bg = torch.rand(3, 5, 5, dtype=D, generator=g)
    cf = torch.rand(5, 5, dtype=D, generator=g).requires_grad_(True)

    def objective():
        ff = compose_vessel_flow(eul(), field([0.0, 1.0, 2.0]))
        mf, mb = _masks(logits)
        return render_and_rec(frames, bg, cf, ff, mf, mb)[1]

    assert _fd_check([logits, cf, field.control, eul.values], objective) < 1e-3


# -- networks ----------------------------------------------------------------------------------------

def test_masknet_softmax_identity_odd_size():
    net = MaskNet(4)
    out = net(torch.rand(2, 13, 10), torch.tensor([-1.0, 1.0]))
    assert out.shape == (2, 2, 13, 10)
    assert torch.allclose(out.sum(1), torch.ones(2, 13, 10))
    assert out.min() >= 0 and out.max() <= 1


def test_generator_fixed_latent():
    gen = ForegroundGenerator(10, 14, latent_channels=4, seed=1)
    assert "z" not in dict(gen.named_parameters())
    z = gen.z.clone()
    out = gen()
    assert out.shape == (10, 14) and out.min() >= 0 and out.max() <= 1
    out.sum().backward()
    assert torch.equal(gen.z, z)


# -- config and schedule ------------------------------------------------------------------------------

def test_schedule():
    cfg = Stage2Config()
    assert cfg.active_losses(0) == ("prior",)
    assert cfg.active_losses(499) == ("prior",)
    assert cfg.active_losses(500) == ("prior", "parallel")
    assert cfg.active_losses(700) == ("prior", "parallel", "warp", "mask")
    assert cfg.active_losses(2499) == PARTS


def test_config_validation():
    with pytest.raises(ConfigError):
        Stage2Config(warmup_steps=10, total_steps=10).validate()
    with pytest.raises(ConfigError):
        Stage2Config(lambda_rec=-1).validate()
    with pytest.raises(ConfigError):
        Stage2Config(warp_start=400).validate()


# -- optimisation -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_clip():
    s = generate_video(SynthConfig(size=64, frames=8, seed=3, contrast_speed=24, max_depth=3, radius_root=3))
    prior = make_prior_masks(s.clip, VesselnessConfig(), PriorConfig())
    guidance = FlowSequence(np.zeros((7, 64, 64, 2), np.float32))
    return s, prior, guidance


def test_warm_start_follows_prior(small_clip):
    s, prior, guidance = small_clip
    cfg = Stage2Config(warmup_steps=500, warp_start=10 ** 6, rec_start=10 ** 6, total_steps=501,
                       lambda_parallel=0.0, window=2, seed=0)
    res = run_stage2(s.clip, prior, guidance, s.clean_background, cfg)
    soft = res.soft_masks.masks
    assert soft.min() >= 0 and soft.max() <= 1
    scores = [dice(res.binary_masks.masks[t], prior.masks[t]) for t in range(8) if prior.masks[t].any()]
    assert np.mean(scores) >= 0.8
    assert np.array_equal(res.binary_masks.masks, (soft > 0.5).astype(np.uint8))


def test_run_deterministic_and_traced(small_clip):
    s, prior, guidance = small_clip
    cfg = Stage2Config(warmup_steps=4, warp_start=6, rec_start=8, total_steps=12, window=3, seed=7)
    a = run_stage2(s.clip, prior, guidance, s.clean_background, cfg)
    b = run_stage2(s.clip, prior, guidance, s.clean_background, cfg)
    assert np.array_equal(a.binary_masks.masks, b.binary_masks.masks)
    assert a.loss_trace == b.loss_trace
    assert len(a.loss_trace) == 12
    assert a.loss_trace[0]["rec"] is None and a.loss_trace[-1]["rec"] is not None
    assert a.layer_flows.foreground.flows.shape == (8, 64, 64, 2)
    assert a.canonical_fg.shape == (64, 64)


def test_run_rejects_mismatched_inputs(small_clip):
    s, prior, guidance = small_clip
    short = MaskSequence(prior.masks[:4])
    with pytest.raises(InputError):
        run_stage2(s.clip, short, guidance, s.clean_background, Stage2Config(total_steps=2, warmup_steps=1))
