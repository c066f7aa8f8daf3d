"""Acceptance criteria; each test prints one PASS/FAIL line with the measured values."""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from helpers import ransac_trial
from oracles import (
    adjacent_loop,
    alg2_simulate,
    attention_loop,
    content_loop,
    dft_power,
    discrimination_loop,
    max_rectangle_bruteforce,
    points_loop,
    relative_loop,
    temporal_loop,
)
from warpstab.core import AffineTransform, affine_to_warp_field, identity_field, pixel_to_norm
from warpstab.exceptions import NoValidRegionError
from warpstab.losses import (
    adjacent_grid_loss,
    content_loss,
    discrimination_loss,
    generator_loss,
    points_loss,
    relative_grid_loss,
    temporal_loss,
)
from warpstab.metrics import (
    band_power_split,
    cropping_ratio,
    distortion_score,
    evaluate,
    stability_score,
    vertex_trajectories,
)
from warpstab.motion import CorrespondenceSet, RansacConfig, build_affine_system, ransac_affine, solve_affine_lsq
from warpstab.network import (
    AttentionParams,
    full_tunet_config,
    head_additivity_error,
    init_weights,
    scaled_cosine_attention,
    stage_shapes,
    tunet_forward,
)
from warpstab.stabilizer import (
    REFERENCE_GPU_FPS,
    ClassicalPredictor,
    SlidingWindowConfig,
    compute_crop_region,
    stabilize_sequence,
    valid_mask,
    window_trace,
)
from warpstab.synth import JitterModel, SceneConfig, build_scene, inject_jitter


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}")
        return ok

    return emit


def test_c01_affine_recovery(report):
    rng = np.random.default_rng(2024)
    worst, elapsed, fails = 0.0, 0.0, 0
    for trial in range(100):
        truth, src, dst, _ = ransac_trial(rng)
        cs = CorrespondenceSet(src, dst)
        t0 = time.perf_counter()
        _, mask = ransac_affine(cs, RansacConfig(seed=trial))
        model = solve_affine_lsq(build_affine_system(cs.subset(mask)))
        elapsed += time.perf_counter() - t0
        err = float(np.abs(model.coeffs - truth.coeffs).max())
        worst = max(worst, err)
        fails += err > 1e-3
    ms = 1000.0 * elapsed / 100
    ok = fails == 0 and ms < 5.0
    assert report(1, "affine recovery", ok, f"max coeff error {worst:.2e} (tol 1e-3), {fails}/100 failed, {ms:.2f} ms/trial (< 5)")


def test_c02_metric_fixed_points(report):
    eye = [np.eye(3)] * 5
    c_id, d_id = cropping_ratio(eye), distortion_score(eye)
    d_half = distortion_score([np.diag([2.0, 1.0, 1.0])])
    c_quarter = cropping_ratio([np.diag([2.0, 2.0, 1.0])])
    ok = abs(c_id - 1) <= 1e-6 and abs(d_id - 1) <= 1e-6 and d_half == 0.5 and c_quarter == 0.25
    assert report(2, "metric fixed points", ok,
                  f"identity C={c_id!r} D={d_id!r}; diag(2,1) D={d_half!r}; scale 2 C={c_quarter!r}")


def test_c03_stability_spectral_oracle(report):
    t = np.arange(64)
    s_const = stability_score(np.full((4, 64, 2), 3.0))
    s_low = stability_score(np.sin(2 * np.pi * 2 * t / 64 + 0.3)[None])
    s_high = stability_score(np.sin(2 * np.pi * 20 * t / 64 + 0.3)[None])
    rng = np.random.default_rng(7)
    worst_parseval, worst_dft = 0.0, 0.0
    for _ in range(20):
        x = rng.normal(size=64)
        inside, _, total = band_power_split(x)
        xc = x - x.mean()
        worst_parseval = max(worst_parseval, abs(total - 64 * float(np.sum(xc ** 2))) / total)
        ref_in = sum(dft_power(xc, k) for k in (1, 2, 3, 4, 5, 59, 60, 61, 62, 63))
        worst_dft = max(worst_dft, abs(inside - ref_in) / ref_in)
    ok = (s_const == 1.0 and abs(s_low - 1) <= 1e-9 and abs(s_high) <= 1e-9
          and worst_parseval <= 1e-6 and worst_dft <= 1e-6)
    assert report(3, "stability spectral oracle", ok,
                  f"const S={s_const}, bin-2 S={s_low:.12f}, bin-20 S={s_high:.1e}, "
                  f"Parseval rel err {worst_parseval:.1e}, band vs DFT {worst_dft:.1e}")


def _synthetic_run(seed):
    scene = build_scene(SceneConfig(256, 256, 64, texture="noise", path="static", seed=seed))
    shaken, _ = inject_jitter(scene, JitterModel(4.0, 0.01, 0.0, 0.8, seed=1000 + seed))
    t0 = time.perf_counter()
    res = stabilize_sequence(shaken, ClassicalPredictor(), SlidingWindowConfig(15, 256))
    rep = evaluate(shaken, res.frames)
    s_in = stability_score(vertex_trajectories(shaken))
    return time.perf_counter() - t0, s_in, rep


@pytest.mark.slow
def test_c04_end_to_end_synthetic(report):
    wins, d_min, c_min, t_max = 0, np.inf, np.inf, 0.0
    rows = []
    with threadpool_limits(limits=1):
        for seed in range(20):
            dt, s_in, rep = _synthetic_run(seed)
            wins += rep.stability > s_in
            d_min = min(d_min, rep.distortion)
            c_min = min(c_min, rep.cropping)
            t_max = max(t_max, dt)
            rows.append(f"{rep.stability:.2f}/{s_in:.2f}")
    ok = wins >= 19 and d_min >= 0.90 and c_min >= 0.60 and t_max < 60.0
    assert report(4, "end-to-end synthetic stabilization", ok,
                  f"S_out > S_in on {wins}/20 (S out/in: {' '.join(rows)}), min D={d_min:.3f} (>= 0.90), "
                  f"min C={c_min:.3f} (>= 0.60), slowest run {t_max:.1f} s (< 60)")


def _random_crop_case(rng):
    h, w = int(rng.integers(4, 49)), int(rng.integers(4, 49))
    fields = []
    for _ in range(int(rng.integers(1, 11))):
        a = AffineTransform.rotation(rng.uniform(-0.1, 0.1), ((w - 1) / 2, (h - 1) / 2))
        a = AffineTransform.translation(*rng.uniform(-0.25, 0.25, 2) * (w, h)) @ a
        f = affine_to_warp_field(a, h, w)
        if rng.random() < 0.5:
            # scattered invalid pixels exercise ties and ragged masks
            holes = rng.random((h, w)) < rng.uniform(0.0, 0.08)
            f[holes] = 1.5
        fields.append(f)
    return h, w, fields


def test_c05_crop_region_oracle(report):
    rng = np.random.default_rng(55)
    mismatches, empty = 0, 0
    for _ in range(200):
        h, w, fields = _random_crop_case(rng)
        mask = np.logical_and.reduce([valid_mask(f) for f in fields])
        ref = max_rectangle_bruteforce(mask)
        if ref is None or ref[0] == ref[2] or ref[1] == ref[3]:
            empty += 1
            try:
                compute_crop_region(fields)
                mismatches += 1
            except NoValidRegionError:
                pass
            continue
        top, left, bottom, right = ref
        expect = (pixel_to_norm(left, w), pixel_to_norm(top, h), pixel_to_norm(right, w), pixel_to_norm(bottom, h))
        got = compute_crop_region(fields).as_tuple()
        mismatches += got != tuple(float(v) for v in expect)
    ok = mismatches == 0
    assert report(5, "crop-region oracle equivalence", ok,
                  f"{200 - mismatches}/200 exact matches ({empty} cases with no usable region)")


def test_c06_attention(report):
    rng = np.random.default_rng(66)
    worst_out, worst_sum, worst_spread = 0.0, 0.0, 0.0
    for case in range(50):
        m = int(rng.integers(1, 5))
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 17))
        q, k, v = (rng.normal(size=(n, m * d)) for _ in range(3))
        tau = rng.uniform(0.05, 1.0, m)
        bias = rng.normal(size=(m, n, n)) if case % 2 else None
        out, attn = scaled_cosine_attention(q, k, v, AttentionParams(tau, bias, m), return_weights=True)
        ref, _ = attention_loop(q, k, v, tau, bias, m)
        worst_out = max(worst_out, float(np.abs(out - ref).max()))
        worst_sum = max(worst_sum, float(np.abs(attn.sum(-1) - 1).max()))
        if bias is None:
            # logits lie in [-1/tau, 1/tau], so within-row log weights span at most 2/tau
            logw = np.log(attn)
            spread = (logw.max(-1) - logw.min(-1)) * tau[:, None] / 2.0
            worst_spread = max(worst_spread, float(spread.max()))
    ok = worst_out <= 1e-6 and worst_sum <= 1e-6 and worst_spread <= 1.0 + 1e-9
    assert report(6, "scaled cosine attention", ok,
                  f"max |out - loop| {worst_out:.1e}, max |row sum - 1| {worst_sum:.1e}, "
                  f"max logit span x tau/2 {worst_spread:.4f} (<= 1)")


@pytest.mark.slow
def test_c07_full_architecture(report):
    cfg = full_tunet_config()
    w = init_weights(cfg, seed=0)
    x = np.random.default_rng(7).random((cfg.in_channels, 256, 256), dtype=np.float32)
    (f1, f2), trace = tunet_forward(x, cfg, w, return_trace=True)
    expected = stage_shapes(cfg)
    bad = []
    for name, shape in expected.items():
        arr = trace[f"stage1.{name}"]
        got = arr.shape if name.startswith("out") else (arr.shape[1], arr.shape[2], arr.shape[0])
        if tuple(got) != tuple(shape):
            bad.append(f"{name} {got} != {shape}")
    table = {"init": (256, 256, 32), "down1": (128, 128, 64), "down7": (2, 2, 256),
             "out_a": (2, 3), "up1": (256, 256, 64), "out_w": (256, 256, 2), "out_t": (256, 256, 2)}
    bad += [f"{k} expected {v}" for k, v in table.items() if tuple(expected[k]) != v]
    worst = head_additivity_error(x, cfg, w, trace)
    ok = not bad and f1.shape == f2.shape == (256, 256, 2) and worst <= 1e-5
    assert report(7, "architecture table conformance", ok,
                  f"{len(expected) - len(bad)}/{len(expected)} stage shapes match, fields {f1.shape}, "
                  f"head additivity max deviation {worst:.1e}" + (f"; {'; '.join(bad)}" if bad else ""))


def test_c08_window_trace_and_causality(report):
    mismatched = [n for n in (1, 16, 31, 40, 100) if window_trace(n, 15) != alg2_simulate(n, 15)]
    theta = 15
    scene = build_scene(SceneConfig(64, 64, 40, seed=8))
    shaken, _ = inject_jitter(scene, JitterModel(seed=8))
    cfg = SlidingWindowConfig(theta, 64)
    base = stabilize_sequence(shaken, ClassicalPredictor(), cfg, crop_mode="online").frames
    changed = []
    for i in (1, 10, 20):
        mutated = shaken.copy()
        mutated[i + theta] = np.random.default_rng(i).random(mutated[i + theta].shape)
        out = stabilize_sequence(mutated, ClassicalPredictor(), cfg, crop_mode="online").frames
        if not np.array_equal(out[:i], base[:i]):
            changed.append(i)
    ok = not mismatched and not changed
    assert report(8, "sliding window trace and online causality", ok,
                  f"trace mismatches for n in {mismatched or 'none'}; outputs <= i changed by frame i+16 "
                  f"for i in {changed or 'none'} (checked i = 1, 10, 20)")


def test_c09_losses(report):
    rng = np.random.default_rng(99)
    img = rng.random((10, 12, 3))
    f_id = identity_field(10, 12)
    pts = rng.uniform(0, 9, (12, 2))
    ys, xs = np.mgrid[0:6, 0:7].astype(float)
    a = AffineTransform.from_coeffs([1.1, 0.2, 3.0, -0.3, 0.9, 1.0])
    affine_mesh = a.apply(np.stack([xs.ravel(), ys.ravel()], 1)).reshape(6, 7, 2)
    rot_mesh = AffineTransform.rotation(0.7).apply(np.stack([xs.ravel(), ys.ravel()], 1)).reshape(6, 7, 2)
    fixed = {
        "content": content_loss(img, img),
        "points": points_loss(f_id, pts, pts),
        "relative": relative_grid_loss(affine_mesh),
        "adjacent": adjacent_grid_loss(rot_mesh),
        "temporal": temporal_loss(img, img, f_id),
        "discrimination": discrimination_loss(-np.ones((4, 4)), np.ones((4, 4))),
        "generator": generator_loss(0.0, 0.0, 0.0, 0.0, 0.0),
    }
    worst_fixed = max(abs(v) for v in fixed.values())

    worst_loop = 0.0
    for _ in range(5):
        s, p = rng.random((7, 8, 3)), rng.random((7, 8, 3))
        field = affine_to_warp_field(AffineTransform.from_coeffs(
            [1 + rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-1, 1),
             rng.uniform(-0.1, 0.1), 1 + rng.uniform(-0.1, 0.1), rng.uniform(-1, 1)]), 7, 8)
        pp, qq = rng.uniform(1, 5, (9, 2)), rng.uniform(0, 6, (9, 2))
        mesh = rng.normal(size=(5, 6, 2))
        phi = identity_field(7, 8) + rng.uniform(-0.2, 0.2, (7, 8, 2))
        dp, ds = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        pairs = [
            (content_loss(s, p), content_loop(s, p)),
            (points_loss(field, pp, qq), points_loop(field, pp, qq)),
            (relative_grid_loss(mesh), relative_loop(mesh)),
            (adjacent_grid_loss(mesh), adjacent_loop(mesh)),
            (temporal_loss(s, p, phi), temporal_loop(s, p, phi)),
            (discrimination_loss(dp, ds), discrimination_loop(dp, ds)),
        ]
        terms = rng.uniform(0, 2, 5)
        c, pt, rl, ad, tm = terms
        pairs.append((generator_loss(c, pt, rl, ad, tm), c + 1.0 * (pt + rl + ad) + 8.0 * tm))
        worst_loop = max(worst_loop, max(abs(x - y) for x, y in pairs))
    weighting = generator_loss(1.0, 1.0, 0.0, 0.0, 1.0)
    # identity inputs go through float sampling, so allow rounding-level residue
    ok = worst_fixed <= 1e-12 and worst_loop <= 1e-9 and weighting == 10.0
    assert report(9, "loss fixed points and oracles", ok,
                  f"max fixed-point value {worst_fixed:.1e} over {len(fixed)} losses, "
                  f"max |loss - loop| {worst_loop:.1e} (tol 1e-9), G(1, shape 1, temporal 1) = {weighting} (1/1/8)")


@pytest.mark.slow
def test_c10_throughput(report):
    scene = build_scene(SceneConfig(360, 640, 64, texture="noise", path="pan", pan_velocity=(1.0, 0.0), seed=10))
    shaken, _ = inject_jitter(scene, JitterModel(4.0, 0.01, 0.0, 0.8, seed=10))
    # the median of three full runs damps interference from other tenants of a shared core
    runs = []
    with threadpool_limits(limits=1):
        for _ in range(3):
            runs.append(stabilize_sequence(shaken, ClassicalPredictor(), SlidingWindowConfig(15, 256)).fps)
    fps = float(np.median(runs))
    ok = fps >= 24.0
    assert report(10, "throughput at 640x360", ok,
                  f"median {fps:.1f} frames/s on one core over 3 runs of 64 frames "
                  f"({', '.join(f'{r:.1f}' for r in runs)}; soft target >= 24); "
                  f"reference GPU figure {REFERENCE_GPU_FPS:.0f} frames/s (not reproducible here)")
