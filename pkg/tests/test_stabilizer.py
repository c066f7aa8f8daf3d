import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from oracles import alg2_simulate, max_rectangle_bruteforce
from warpstab.core import AffineTransform, affine_to_warp_field, identity_field, psnr
from warpstab.exceptions import InvalidInputError, NoValidRegionError
from warpstab.network import desk_tunet_config, zero_weights
from warpstab.stabilizer import (
    ClassicalPredictor,
    CropRegion,
    IdentityPredictor,
    SlidingWindow,
    SlidingWindowConfig,
    VideoStabilizer,
    compute_crop_region,
    crop_resize,
    make_predictor,
    max_rectangle,
    norm_affine_to_pixel,
    pixel_affine_to_norm,
    render_frame,
    stabilize_sequence,
    valid_mask,
    window_trace,
)
from warpstab.synth import JitterModel, SceneConfig, build_scene, inject_jitter, render_scene


@pytest.mark.parametrize("n", [1, 2, 5, 16, 31, 40])
@pytest.mark.parametrize("theta", [1, 3, 15])
def test_window_trace_matches_simulation(n, theta):
    assert window_trace(n, theta) == alg2_simulate(n, theta)


def test_window_center_and_lookahead():
    win = SlidingWindow(40, 15)
    for i in range(1, 41):
        if i > 1:
            win.advance()
        assert len(win.indices) == 31
        assert win.newest_needed() <= min(i + 15, 40)


@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=9), min_size=1, max_size=9))
def test_max_rectangle_matches_bruteforce(rows):
    w = min(len(r) for r in rows)
    mask = np.array([r[:w] for r in rows])
    assert max_rectangle(mask) == max_rectangle_bruteforce(mask)


def test_max_rectangle_tie_break():
    mask = np.array([[1, 1, 0, 1, 1]], dtype=bool)
    assert max_rectangle(mask) == (0, 0, 0, 1)
    assert max_rectangle(np.zeros((3, 3), bool)) is None


def test_crop_region_identity_is_full():
    assert compute_crop_region([identity_field(16, 16)] * 3).as_tuple() == (-1.0, -1.0, 1.0, 1.0)


def test_crop_region_shifted_fields():
    f = affine_to_warp_field(AffineTransform.translation(2, 0), 11, 11)
    r = compute_crop_region([f, identity_field(11, 11)])
    assert r.as_tuple() == pytest.approx((-1.0, -1.0, 0.6, 1.0))


def test_crop_region_errors():
    far = identity_field(8, 8) + 5.0
    with pytest.raises(NoValidRegionError):
        compute_crop_region([far])
    with pytest.raises(InvalidInputError):
        compute_crop_region([])
    with pytest.raises(InvalidInputError):
        CropRegion(0.5, -1, 0.2, 1)


def test_crop_resize_full_region_is_identity(rng):
    img = rng.random((9, 9, 3))
    np.testing.assert_allclose(crop_resize(img, CropRegion.full(), 9, 9), img, atol=1e-12)


@given(st.floats(-0.2, 0.2), st.floats(-5, 5), st.floats(-5, 5))
def test_norm_pixel_affine_roundtrip(ang, tx, ty):
    a = AffineTransform.rotation(ang, (10, 7)) @ AffineTransform.translation(tx, ty)
    back = norm_affine_to_pixel(pixel_affine_to_norm(a, 15, 21), 15, 21)
    assert back.allclose(a, atol=1e-9)


def test_render_affine_equals_field_path(rng):
    img = rng.random((20, 24, 3))
    theta = np.array([[0.95, 0.02, 0.03], [-0.01, 0.97, -0.02]])
    region = CropRegion(-0.8, -0.7, 0.9, 0.85)
    from warpstab.core import affine_grid

    a = render_frame(img, theta, region)
    b = render_frame(img, affine_grid(theta, 20, 24), region)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_identity_predictor_roundtrip():
    frames = render_scene(SceneConfig(48, 48, 6))
    res = stabilize_sequence(frames, IdentityPredictor(), SlidingWindowConfig(2, 32))
    assert psnr(res.frames, frames) == float("inf")
    assert res.region.as_tuple() == (-1.0, -1.0, 1.0, 1.0)
    assert len(res.diagnostics) == 6 and res.fps > 0


def test_windows_recorded_match_trace():
    frames = render_scene(SceneConfig(32, 32, 9))
    res = stabilize_sequence(frames, IdentityPredictor(), SlidingWindowConfig(3, 16), record_windows=True)
    assert res.windows == window_trace(9, 3)


def test_zero_weight_network_is_identity():
    cfg = desk_tunet_config()
    frames = render_scene(SceneConfig(32, 32, 3))
    pred = make_predictor("tunet", net_config=cfg, weights=zero_weights(cfg))
    res = stabilize_sequence(frames, pred, SlidingWindowConfig(cfg.theta, cfg.input_size))
    np.testing.assert_allclose(res.frames, frames, atol=1e-4)


def test_classical_reduces_shake():
    scene = build_scene(SceneConfig(96, 96, 24, seed=1))
    shaken, ts = inject_jitter(scene, JitterModel(3.0, 0.01, 0.0, 0.5, seed=2))
    pred = ClassicalPredictor(sigma=8.0)
    res = stabilize_sequence(shaken, pred, SlidingWindowConfig(6, 96))
    # predicted corrections should track the true shake at each frame's centre
    corr = [norm_affine_to_pixel(p, 96, 96) for p in res.predictions]
    c = np.array([[47.5, 47.5]])
    err_pred = np.mean([np.linalg.norm(a.apply(c) - t.inverse().apply(c)) for a, t in zip(corr, ts)])
    err_none = np.mean([np.linalg.norm(c - t.inverse().apply(c)) for t in ts])
    assert err_pred < 0.5 * err_none


def test_online_crop_is_causal():
    theta = 3
    scene = build_scene(SceneConfig(64, 64, 14, seed=3))
    shaken, _ = inject_jitter(scene, JitterModel(seed=3))
    cfg = SlidingWindowConfig(theta, 64)
    base = stabilize_sequence(shaken, ClassicalPredictor(), cfg, crop_mode="online").frames
    i = 6  # 1-based output index; frame i + theta + 1 must not matter
    mutated = shaken.copy()
    mutated[i + theta] = np.random.default_rng(0).random(mutated[i + theta].shape)
    out = stabilize_sequence(mutated, ClassicalPredictor(), cfg, crop_mode="online").frames
    np.testing.assert_array_equal(out[:i], base[:i])


def test_bad_arguments():
    frames = render_scene(SceneConfig(16, 16, 2))
    with pytest.raises(InvalidInputError):
        stabilize_sequence(frames, IdentityPredictor(), crop_mode="sideways")
    with pytest.raises(InvalidInputError):
        SlidingWindowConfig(theta=0)
    with pytest.raises(InvalidInputError):
        make_predictor("magic")
    with pytest.raises(InvalidInputError):
        make_predictor("tunet")
    with pytest.raises(InvalidInputError):
        ClassicalPredictor(sigma=0)


def test_video_stabilizer_estimator():
    frames = render_scene(SceneConfig(32, 32, 5))
    est = VideoStabilizer(predictor="identity", theta=2, size=32)
    with pytest.raises(NotFittedError):
        est.transform(frames)
    out = est.fit(frames).transform(frames)
    np.testing.assert_array_equal(out, frames)
    assert len(est.diagnostics_) == 5 and est.fps_ > 0
    assert est.get_params()["crop_mode"] == "global"
    with pytest.raises(InvalidInputError):
        est.transform(frames[:, :16])


def test_valid_mask_handles_nan():
    f = identity_field(4, 4)
    f[0, 0] = np.nan
    m = valid_mask(f)
    assert not m[0, 0] and m[1:, 1:].all()
