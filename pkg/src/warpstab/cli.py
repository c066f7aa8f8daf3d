"""Command line: ``warpstab {synth,stabilize,evaluate,net-check}``.

Videos travel as frame directories: ``000001.png`` (or ``.ppm``) onward,
8-bit RGB, contiguous numbering, identical sizes. Convert a video with e.g.
``ffmpeg -i in.mp4 frames/%06d.png`` and back with
``ffmpeg -framerate 30 -i out/%06d.png out.mp4``.

Exit status: 0 on success, 1 when a check fails, 2 for bad input.
"""

import argparse
import contextlib
import json
import os
import re
import sys
import tempfile
import time

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import FrameIOError, WarpstabError
from .stabilizer import REFERENCE_GPU_FPS

_FRAME_RE = re.compile(r"^(\d{6})\.(png|ppm)$")


# ---------------------------------------------------------------------------
# frame directories


def list_frames(path):
    if not os.path.isdir(path):
        raise FrameIOError(f"{path}: not a directory")
    found = {}
    for name in os.listdir(path):
        m = _FRAME_RE.match(name)
        if m:
            idx = int(m.group(1))
            if idx in found:
                raise FrameIOError(f"{path}: frame {idx} exists in two formats")
            found[idx] = os.path.join(path, name)
    if not found:
        raise FrameIOError(f"{path}: no frames named 000001.png / 000001.ppm")
    n = len(found)
    for idx in range(1, n + 1):
        if idx not in found:
            raise FrameIOError(f"{path}: frame {idx} is missing (numbering must be contiguous from 1)")
    return [found[i] for i in range(1, n + 1)]


def read_frame(path, index=None):
    label = f"frame {index} ({path})" if index is not None else path
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise FrameIOError(f"{label}: cannot decode ({exc})") from exc
    return arr


def read_frame_dir(path):
    """Frames as a uint8 array ``(n, H, W, 3)``."""
    paths = list_frames(path)
    frames = []
    for i, p in enumerate(paths, 1):
        arr = read_frame(p, i)
        if frames and arr.shape != frames[0].shape:
            raise FrameIOError(f"frame {i} ({p}) is {arr.shape[:2]}, frame 1 is {frames[0].shape[:2]}")
        frames.append(arr)
    return np.stack(frames)


def to_uint8(frame):
    f = np.asarray(frame)
    if f.dtype == np.uint8:
        return f
    return np.clip(np.round(f * 255.0), 0, 255).astype(np.uint8)


def write_frame_dir(path, frames, fmt="png"):
    if fmt not in ("png", "ppm"):
        raise FrameIOError(f"unknown frame format {fmt!r}")
    os.makedirs(path, exist_ok=True)
    for i, f in enumerate(frames, 1):
        Image.fromarray(to_uint8(f), "RGB").save(os.path.join(path, f"{i:06d}.{fmt}"))


def _write_atomic(path, text):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _emit(record, stream=None):
    stream = stream or sys.stderr
    stream.write(json.dumps(record, sort_keys=True) + "\n")
    stream.flush()


@contextlib.contextmanager
def _serial(enabled):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .synth import JitterModel, SceneConfig, build_scene, inject_jitter, write_transforms

    cfg = SceneConfig(
        height=args.height, width=args.width, n_frames=args.frames, texture=args.texture,
        path=args.path, seed=args.seed,
    )
    model = JitterModel(
        trans_sigma=args.trans_sigma, rot_sigma=args.rot_sigma, scale_sigma=args.scale_sigma,
        rho=args.rho, seed=args.seed if args.jitter_seed is None else args.jitter_seed,
    )
    scene = build_scene(cfg)
    stable = scene.frames()
    shaken, transforms = inject_jitter(scene, model)
    stable_dir = os.path.join(args.out, "stable")
    shaken_dir = os.path.join(args.out, "shaken")
    write_frame_dir(stable_dir, stable, args.format)
    write_frame_dir(shaken_dir, shaken, args.format)
    sidecar = os.path.join(args.out, "transforms.txt")
    write_transforms(sidecar, transforms)
    print(json.dumps({
        "command": "synth",
        "frames": cfg.n_frames,
        "size": [cfg.height, cfg.width],
        "stable": stable_dir,
        "shaken": shaken_dir,
        "transforms": sidecar,
    }, sort_keys=True))
    return 0


def _load_net(args):
    from .network import desk_tunet_config, full_tunet_config, load_config, load_weights

    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "full", False):
        cfg = full_tunet_config()
    else:
        cfg = desk_tunet_config()
    weights = load_weights(args.weights, cfg) if args.weights else None
    return cfg, weights


def cmd_stabilize(args):
    from .stabilizer import SlidingWindowConfig, make_predictor, stabilize_sequence

    t_read = time.perf_counter()
    frames = read_frame_dir(args.input)
    t_read = time.perf_counter() - t_read
    net_cfg = weights = None
    size = args.size
    if args.predictor == "tunet":
        if not args.weights:
            raise WarpstabError("--predictor tunet needs --weights")
        net_cfg, weights = _load_net(args)
        size = net_cfg.input_size
        if args.theta != net_cfg.theta:
            raise WarpstabError(f"--theta {args.theta} does not match the network's theta {net_cfg.theta}")
    predictor = make_predictor(args.predictor, args.sigma, None, net_cfg, weights)
    cfg = SlidingWindowConfig(args.theta, size)
    with _serial(args.serial):
        t_run = time.perf_counter()
        res = stabilize_sequence(frames, predictor, cfg, args.crop_mode, on_diagnostic=_emit)
        t_run = time.perf_counter() - t_run
    t_write = time.perf_counter()
    write_frame_dir(args.output, res.frames, args.format)
    t_write = time.perf_counter() - t_write
    n, h, w = frames.shape[:3]
    _emit({
        "event": "summary",
        "frames": int(n),
        "size": [int(h), int(w)],
        "predictor": args.predictor,
        "crop_mode": args.crop_mode,
        "crop_region": list(res.region.as_tuple()),
        "fps": round(res.fps, 3),
        "reference_gpu_fps": REFERENCE_GPU_FPS,
        "timings_s": {"read": round(t_read, 4), "stabilize": round(t_run, 4), "write": round(t_write, 4)},
        "fallback_frames": [d["frame"] for d in res.diagnostics if d["fallback"]],
    })
    return 0


def cmd_evaluate(args):
    from .core import resize_frame
    from .metrics import StabilityConfig, evaluate

    orig = read_frame_dir(args.original)
    stab = read_frame_dir(args.stabilized)
    if len(orig) != len(stab):
        raise WarpstabError(f"length mismatch: {len(orig)} original vs {len(stab)} stabilized frames")
    orig = orig.astype(np.float32) / 255.0
    stab = stab.astype(np.float32) / 255.0
    if args.resize_360p:
        orig = np.stack([resize_frame(f, 360, 640) for f in orig])
        stab = np.stack([resize_frame(f, 360, 640) for f in stab])
    with _serial(args.serial):
        rep = evaluate(orig, stab, mode=args.mode, stability_cfg=StabilityConfig(band=tuple(args.band)))
    doc = {"original": args.original, "stabilized": args.stabilized, "frames": int(len(orig)), **rep.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.output:
        _write_atomic(args.output, text)
    print(json.dumps({"C": rep.cropping, "D": rep.distortion, "S": rep.stability}, sort_keys=True))
    return 0


def cmd_net_check(args):
    from .network import SDMConfig, run_network_checks

    cfg, weights = _load_net(args)
    with _serial(True):
        results = run_network_checks(cfg, SDMConfig(), seed=args.seed, weights=weights)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.detail}".rstrip())
    print("net-check: " + ("all checks passed" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="warpstab", description="Pixel-level online video stabilization.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene and a shaken copy")
    s.add_argument("--out", required=True, help="output folder (stable/, shaken/, transforms.txt)")
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--texture", choices=("noise", "checker", "sprites"), default="noise")
    s.add_argument("--path", choices=("static", "pan", "sine"), default="static")
    s.add_argument("--trans-sigma", type=float, default=4.0, help="shake translation sigma (px)")
    s.add_argument("--rot-sigma", type=float, default=0.01, help="shake rotation sigma (rad)")
    s.add_argument("--scale-sigma", type=float, default=0.0, help="shake log-scale sigma")
    s.add_argument("--rho", type=float, default=0.8, help="AR(1) correlation of the shake")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter-seed", type=int, default=None, help="defaults to --seed")
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stabilize", help="stabilize a frame directory")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--predictor", choices=("identity", "classical", "tunet"), default="classical")
    s.add_argument("--weights", help="weight file for --predictor tunet")
    s.add_argument("--config", help="network config JSON (default: desk config)")
    s.add_argument("--crop-mode", choices=("global", "online"), default="global")
    s.add_argument("--theta", type=int, default=15, help="look-ahead; the window holds 2*theta+1 frames")
    s.add_argument("--size", type=int, default=256, help="square processing size")
    s.add_argument("--sigma", type=float, default=8.0, help="trajectory smoothing sigma (frames)")
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.add_argument("--serial", action="store_true", help="single-threaded numerics")
    s.set_defaults(func=cmd_stabilize)

    s = sub.add_parser("evaluate", help="cropping, distortion and stability scores")
    s.add_argument("--original", required=True)
    s.add_argument("--stabilized", required=True)
    s.add_argument("--output", help="JSON report path")
    s.add_argument("--resize-360p", action="store_true", help="resize frames to 640x360 first")
    s.add_argument("--mode", choices=("pair", "consecutive"), default="pair")
    s.add_argument("--band", type=int, nargs=2, default=(1, 5), metavar=("LO", "HI"))
    s.add_argument("--serial", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("net-check", help="network invariant checks")
    s.add_argument("--full", action="store_true", help="full-size generator instead of the desk config")
    s.add_argument("--config", help="network config JSON")
    s.add_argument("--weights", help="check a saved weight file instead of a seeded init")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_net_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (WarpstabError, OSError, ValueError) as exc:
        print(f"warpstab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
