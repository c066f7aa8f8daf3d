import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warpstab.core import AffineTransform, apply_warp, affine_to_warp_field, psnr
from warpstab.exceptions import FrameIOError, InvalidInputError
from warpstab.synth import (
    JitterModel,
    SceneConfig,
    build_scene,
    format_transforms,
    inject_jitter,
    read_transforms,
    render_scene,
    sample_jitter,
    write_transforms,
)


def test_render_shapes_and_range():
    f = render_scene(SceneConfig(32, 48, 5, texture="checker"))
    assert f.shape == (5, 32, 48, 3) and f.dtype == np.float32
    assert f.min() >= 0 and f.max() <= 1


def test_render_is_seeded():
    a = render_scene(SceneConfig(32, 32, 2, seed=5))
    b = render_scene(SceneConfig(32, 32, 2, seed=5))
    c = render_scene(SceneConfig(32, 32, 2, seed=6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pan_moves_content():
    f = render_scene(SceneConfig(32, 32, 3, path="pan", pan_velocity=(2.0, 0.0)))
    np.testing.assert_allclose(f[1][:, :-2], f[0][:, 2:], atol=1e-6)


def test_null_jitter_is_identity():
    scene = build_scene(SceneConfig(32, 32, 4))
    frames, ts = inject_jitter(scene, JitterModel(0, 0, 0))
    np.testing.assert_array_equal(frames, scene.frames())
    assert all(t.allclose(AffineTransform.identity()) for t in ts)


@given(st.integers(0, 500))
def test_jitter_bounded_by_clip(seed):
    model = JitterModel(4.0, 0.01, 0.0, 0.8, seed=seed)
    ts = sample_jitter(64, model, (31.5, 31.5))
    for t in ts:
        ang = np.arctan2(t.matrix[1, 0], t.matrix[0, 0])
        assert abs(ang) <= 0.03 + 1e-12
        # centre moves by the clipped translation only
        c = t.apply([[31.5, 31.5]])[0] - 31.5
        assert np.all(np.abs(c) <= 12.0 + 1e-9)


def test_jitter_statistics():
    ts = sample_jitter(20000, JitterModel(4.0, 0.01, 0.0, 0.8, seed=1), (0.0, 0.0))
    tx = np.array([t.matrix[0, 2] for t in ts])
    assert tx.std() == pytest.approx(4.0, rel=0.1)
    assert np.corrcoef(tx[:-1], tx[1:])[0, 1] == pytest.approx(0.8, abs=0.03)


@pytest.mark.parametrize("texture", ["noise", "checker", "sprites"])
def test_shake_roundtrip(texture):
    scene = build_scene(SceneConfig(96, 96, 4, texture=texture, seed=2))
    stable = scene.frames()
    shaken, ts = inject_jitter(scene, JitterModel(3.0, 0.01, 0.0, seed=4))
    # undo: stable(q) = shaken(T^-1 q), compare away from the border
    for s, k, t in zip(stable, shaken, ts):
        back = apply_warp(k, affine_to_warp_field(t.inverse(), 96, 96))
        assert psnr(back[16:-16, 16:-16], s[16:-16, 16:-16]) > 35.0


def test_inject_on_plain_array():
    frames = render_scene(SceneConfig(32, 32, 3))
    shaken, ts = inject_jitter(frames, JitterModel(seed=0))
    assert shaken.shape == frames.shape and len(ts) == 3


def test_transform_sidecar(tmp_path):
    ts = [AffineTransform.rotation(0.1), AffineTransform.translation(1.5, -2)]
    text = format_transforms(ts)
    assert text.splitlines()[1] == "1.000000 0.000000 1.500000 0.000000 1.000000 -2.000000"
    write_transforms(tmp_path / "t.txt", ts)
    back = read_transforms(tmp_path / "t.txt")
    assert all(a.allclose(b, atol=1e-6) for a, b in zip(ts, back))
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(FrameIOError):
        read_transforms(tmp_path / "bad.txt")


def test_config_validation():
    with pytest.raises(InvalidInputError):
        SceneConfig(texture="marble")
    with pytest.raises(InvalidInputError):
        JitterModel(rho=1.0)
    with pytest.raises(InvalidInputError):
        build_scene(SceneConfig(8, 8, 2)).render([None])
