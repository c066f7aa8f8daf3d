"""Forward-only numpy reference for the warp-field generator and the discriminator.

Generator (``tunet_forward``)
    A UNet over the stacked input window whose encoder/decoder blocks
    exchange information with a token (transformer) branch through HAFM
    fusion. Each stage emits three heads that are summed into one field::

        field = affine_grid(A_hat) + W_hat + reshape(T_hat)

    Two stages are cascaded; the second consumes the first stage's stem
    features warped by the first field.

Discriminator (``sdm_forward``)
    Patch embedding, windowed scaled-cosine attention blocks with
    post-norm residuals, and a linear head giving one score per patch.

Activations use channel-first ``(C, H, W)`` float32 arrays; tokens are
``(N, E)`` in row-major grid order.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import affine_grid, sample_bilinear
from .exceptions import InvalidInputError, ShapeMismatchError, WeightFormatError

DTYPE = np.float32
FORMAT_VERSION = 1
_MAGIC = b"WSTBWGT\x00"
TAU_FLOOR = 0.01


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    padding: int = 1
    stride: int = 2
    # (token upsample stride into the block input, pool stride from the block output)
    hafm: tuple = None


@dataclass(frozen=True)
class TUNetConfig:
    input_size: int = 64
    theta: int = 15
    embed_dim: int = 96
    heads: int = 4
    patch_size: int = 8
    mlp_ratio: int = 4
    init: ConvSpec = ConvSpec(16, kernel=5, padding=2, stride=1)
    down: tuple = (
        ConvSpec(32, hafm=(8, 4)),
        ConvSpec(64, hafm=(4, 2)),
        ConvSpec(64),
        ConvSpec(128),
        ConvSpec(128),
    )
    head_hidden: int = 256
    up: tuple = (
        ConvSpec(128, kernel=4),
        ConvSpec(128, kernel=4),
        ConvSpec(64, kernel=4),
        ConvSpec(64, kernel=4, hafm=(2, 4)),
        ConvSpec(32, kernel=4, hafm=(4, 8)),
    )
    out_kernel: int = 3
    n_stages: int = 2

    def __post_init__(self):
        object.__setattr__(self, "init", _as_spec(self.init))
        object.__setattr__(self, "down", tuple(_as_spec(s) for s in self.down))
        object.__setattr__(self, "up", tuple(_as_spec(s) for s in self.up))
        if self.theta < 1:
            raise InvalidInputError("theta must be >= 1")
        if self.embed_dim % self.heads:
            raise InvalidInputError("embed_dim must be divisible by heads")
        if self.input_size % self.patch_size:
            raise InvalidInputError("input_size must be divisible by patch_size")
        if len(self.up) != len(self.down):
            raise InvalidInputError("encoder and decoder need the same depth")
        if self.n_stages < 1:
            raise InvalidInputError("n_stages must be >= 1")
        stage_shapes(self)  # raises on inconsistent strides

    @property
    def window_length(self):
        return 2 * self.theta + 1

    @property
    def in_channels(self):
        return 2 * self.window_length * 3

    @property
    def token_grid(self):
        return self.input_size // self.patch_size

    @property
    def n_transformer_blocks(self):
        return sum(s.hafm is not None for s in self.down + self.up)


def _as_spec(s):
    if isinstance(s, ConvSpec):
        return s
    if isinstance(s, dict):
        d = dict(s)
        if d.get("hafm") is not None:
            d["hafm"] = tuple(d["hafm"])
        return ConvSpec(**d)
    raise InvalidInputError(f"cannot interpret {s!r} as a conv spec")


def full_tunet_config():
    """Full-size generator: 256 x 256 input, 768-wide tokens, 12 heads, 7 + 7 blocks."""
    down = (
        ConvSpec(64, hafm=(16, 8)),
        ConvSpec(64, hafm=(8, 4)),
        ConvSpec(128, hafm=(4, 2)),
        ConvSpec(256, hafm=(2, 1)),
        ConvSpec(256),
        ConvSpec(256),
        ConvSpec(256),
    )
    up = (
        ConvSpec(512, kernel=4),
        ConvSpec(512, kernel=4),
        ConvSpec(512, kernel=4),
        ConvSpec(512, kernel=4, hafm=(1, 2)),
        ConvSpec(256, kernel=4, hafm=(2, 4)),
        ConvSpec(128, kernel=4, hafm=(4, 8)),
        ConvSpec(64, kernel=4, hafm=(8, 16)),
    )
    return TUNetConfig(
        input_size=256, theta=15, embed_dim=768, heads=12, patch_size=16, mlp_ratio=4,
        init=ConvSpec(32, kernel=5, padding=2, stride=1), down=down, head_hidden=512,
        up=up, out_kernel=3, n_stages=2,
    )


def desk_tunet_config():
    return TUNetConfig()


@dataclass(frozen=True)
class SDMConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 2
    window: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise InvalidInputError("embed_dim must be divisible by heads")
        if self.image_size % (self.patch_size * self.window):
            raise InvalidInputError("image_size must be divisible by patch_size * window")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def score_shape(self):
        return (self.grid, self.grid)


def config_to_dict(cfg):
    kind = "tunet" if isinstance(cfg, TUNetConfig) else "sdm"
    return {"kind": kind, **asdict(cfg)}


def config_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "tunet")
    try:
        if kind == "tunet":
            return TUNetConfig(**d)
        if kind == "sdm":
            return SDMConfig(**d)
    except TypeError as exc:
        raise WeightFormatError(f"bad config fields: {exc}") from exc
    raise WeightFormatError(f"unknown config kind {kind!r}")


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path):
    try:
        with open(path) as fh:
            return config_from_dict(json.load(fh))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"{path}: not a JSON config ({exc})") from exc


# ---------------------------------------------------------------------------
# shape bookkeeping


def _conv_out(size, spec):
    return (size + 2 * spec.padding - spec.kernel) // spec.stride + 1


def _deconv_out(size, spec):
    return (size - 1) * spec.stride - 2 * spec.padding + spec.kernel


def stage_shapes(cfg):
    """Expected ``(H, W, C)`` of every named stage output for one stage."""
    shapes = {}
    s = _conv_out(cfg.input_size, cfg.init)
    if s != cfg.input_size:
        raise InvalidInputError(f"stem must preserve the input size, gives {s}")
    shapes["init"] = (s, s, cfg.init.out_channels)
    g = cfg.token_grid
    for i, spec in enumerate(cfg.down, 1):
        s_in = s
        s = _conv_out(s, spec)
        if s < 1:
            raise InvalidInputError(f"down{i} shrinks the map below 1 pixel")
        if spec.hafm is not None:
            s_up, s_down = spec.hafm
            if g * s_up != s_in or s % s_down or s // s_down != g:
                raise InvalidInputError(
                    f"down{i}: HAFM strides {spec.hafm} do not connect a {g}x{g} token "
                    f"grid with {s_in} -> {s} features"
                )
        shapes[f"down{i}"] = (s, s, spec.out_channels)
    if s != 2:
        raise InvalidInputError(f"encoder must end at 2 x 2 for the affine head, ends at {s}")
    shapes["out_a"] = (2, 3)
    n = len(cfg.down)
    for j, spec in enumerate(cfg.up):
        name = f"up{n - j}"
        s_in = s
        s = _deconv_out(s, spec)
        if spec.hafm is not None:
            s_up, s_down = spec.hafm
            if g * s_up != s_in or s % s_down or s // s_down != g:
                raise InvalidInputError(
                    f"{name}: HAFM strides {spec.hafm} do not connect a {g}x{g} token "
                    f"grid with {s_in} -> {s} features"
                )
        shapes[name] = (s, s, spec.out_channels)
    if s != cfg.input_size:
        raise InvalidInputError(f"decoder ends at {s}, expected {cfg.input_size}")
    shapes["out_w"] = (s, s, 2)
    shapes["out_t"] = (s, s, 2)
    return shapes


def _up_in_channels(cfg, j, prev_channels):
    """Channels entering decoder block ``j``: previous output plus skip (none for the first)."""
    if j == 0:
        return prev_channels
    return prev_channels + cfg.down[-(j + 1)].out_channels


def _transformer_shapes(prefix, e, hidden):
    return {
        f"{prefix}.qkv.weight": (e, 3 * e),
        f"{prefix}.qkv.bias": (3 * e,),
        f"{prefix}.proj.weight": (e, e),
        f"{prefix}.proj.bias": (e,),
        f"{prefix}.ln1.scale": (e,),
        f"{prefix}.ln1.shift": (e,),
        f"{prefix}.fc1.weight": (e, hidden),
        f"{prefix}.fc1.bias": (hidden,),
        f"{prefix}.fc2.weight": (hidden, e),
        f"{prefix}.fc2.bias": (e,),
        f"{prefix}.ln2.scale": (e,),
        f"{prefix}.ln2.shift": (e,),
    }


def tunet_param_shapes(cfg):
    """Ordered mapping ``name -> shape`` for every generator parameter."""
    shapes = {}
    e = cfg.embed_dim
    p = cfg.patch_size
    hidden = cfg.mlp_ratio * e
    for st in range(1, cfg.n_stages + 1):
        pre = f"stage{st}"
        c0 = cfg.init.out_channels
        if st == 1:
            k = cfg.init.kernel
            shapes[f"{pre}.init.conv.weight"] = (c0, cfg.in_channels, k, k)
            shapes[f"{pre}.init.conv.bias"] = (c0,)
            shapes[f"{pre}.init.bn.scale"] = (c0,)
            shapes[f"{pre}.init.bn.shift"] = (c0,)
        shapes[f"{pre}.embed.weight"] = (c0 * p * p, e)
        shapes[f"{pre}.embed.bias"] = (e,)
        c = c0
        t = 0
        for i, spec in enumerate(cfg.down, 1):
            b = f"{pre}.down{i}"
            k = spec.kernel
            if spec.hafm is not None:
                shapes.update(_transformer_shapes(f"{pre}.trans{t}", e, hidden))
                t += 1
                shapes[f"{b}.hafm.t2c.weight"] = (e, c)
                shapes[f"{b}.hafm.t2c.bias"] = (c,)
            o = spec.out_channels
            shapes[f"{b}.conv.weight"] = (o, c, k, k)
            shapes[f"{b}.conv.bias"] = (o,)
            shapes[f"{b}.skip.weight"] = (o, c, 1, 1)
            if spec.hafm is not None:
                shapes[f"{b}.hafm.c2t.weight"] = (o, e)
                shapes[f"{b}.hafm.c2t.bias"] = (e,)
            shapes[f"{b}.bn.scale"] = (o,)
            shapes[f"{b}.bn.shift"] = (o,)
            c = o
        shapes[f"{pre}.head_a.conv.weight"] = (cfg.head_hidden, c, 2, 2)
        shapes[f"{pre}.head_a.conv.bias"] = (cfg.head_hidden,)
        shapes[f"{pre}.head_a.fc.weight"] = (cfg.head_hidden, 6)
        shapes[f"{pre}.head_a.fc.bias"] = (6,)
        n = len(cfg.down)
        for j, spec in enumerate(cfg.up):
            b = f"{pre}.up{n - j}"
            cin = _up_in_channels(cfg, j, c)
            if spec.hafm is not None:
                shapes.update(_transformer_shapes(f"{pre}.trans{t}", e, hidden))
                t += 1
                shapes[f"{b}.hafm.t2c.weight"] = (e, cin)
                shapes[f"{b}.hafm.t2c.bias"] = (cin,)
            o = spec.out_channels
            shapes[f"{b}.deconv.weight"] = (cin, o, spec.kernel, spec.kernel)
            shapes[f"{b}.deconv.bias"] = (o,)
            if spec.hafm is not None:
                shapes[f"{b}.hafm.c2t.weight"] = (o, e)
                shapes[f"{b}.hafm.c2t.bias"] = (e,)
            shapes[f"{b}.bn.scale"] = (o,)
            shapes[f"{b}.bn.shift"] = (o,)
            c = o
        k = cfg.out_kernel
        shapes[f"{pre}.head_w.conv.weight"] = (2, c + c0, k, k)
        shapes[f"{pre}.head_w.conv.bias"] = (2,)
        shapes[f"{pre}.head_t.weight"] = (e, p * p * 2)
        shapes[f"{pre}.head_t.bias"] = (p * p * 2,)
    return shapes


def sdm_param_shapes(cfg):
    e, p, w = cfg.embed_dim, cfg.patch_size, cfg.window
    shapes = {"embed.weight": (3 * p * p, e), "embed.bias": (e,)}
    for b in range(cfg.blocks):
        pre = f"block{b}"
        shapes[f"{pre}.qkv.weight"] = (e, 3 * e)
        shapes[f"{pre}.qkv.bias"] = (3 * e,)
        shapes[f"{pre}.tau"] = (cfg.heads,)
        shapes[f"{pre}.rel_bias"] = (cfg.heads, w * w, w * w)
        shapes[f"{pre}.proj.weight"] = (e, e)
        shapes[f"{pre}.proj.bias"] = (e,)
        shapes[f"{pre}.ln1.scale"] = (e,)
        shapes[f"{pre}.ln1.shift"] = (e,)
        shapes[f"{pre}.fc1.weight"] = (e, cfg.mlp_ratio * e)
        shapes[f"{pre}.fc1.bias"] = (cfg.mlp_ratio * e,)
        shapes[f"{pre}.fc2.weight"] = (cfg.mlp_ratio * e, e)
        shapes[f"{pre}.fc2.bias"] = (e,)
        shapes[f"{pre}.ln2.scale"] = (e,)
        shapes[f"{pre}.ln2.shift"] = (e,)
    shapes["head.weight"] = (e, 1)
    shapes["head.bias"] = (1,)
    return shapes


def param_shapes(cfg):
    return tunet_param_shapes(cfg) if isinstance(cfg, TUNetConfig) else sdm_param_shapes(cfg)


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True, eq=False)
class WeightStore:
    params: dict
    config: object
    seed: int = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        for v in self.params.values():
            v.setflags(write=False)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def replace(self, **updates):
        """Copy with some tensors swapped out (e.g. zeroed heads)."""
        params = dict(self.params)
        for k, v in updates.items():
            if k not in params:
                raise KeyError(k)
            params[k] = np.array(v, dtype=DTYPE).reshape(params[k].shape)
        return WeightStore(params, self.config, self.seed, self.version)

    def zeroed(self, prefixes):
        """Copy with every tensor whose name starts with one of ``prefixes`` set to 0."""
        return self.replace(**{
            k: np.zeros_like(v) for k, v in self.params.items()
            if any(k.startswith(p) for p in prefixes)
        })

    def equals(self, other):
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def _fan_in(name, shape):
    if name.endswith(".bias"):
        return None
    if len(shape) == 4:
        # conv (out, in, k, k); deconv stored (in, out, k, k)
        if ".deconv." in name:
            return shape[0] * shape[2] * shape[3]
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:
        return shape[0]
    return None


def init_weights(cfg, seed=0):
    """Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases ditto by layer fan-in.

    Norm scales start at 1, shifts at 0, attention temperatures at 0.1, the
    relative position bias at 0, and the affine head bias at the identity.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    fan = {}
    for name, shape in shapes.items():
        f = _fan_in(name, shape)
        if f is not None:
            fan[name.rsplit(".", 1)[0]] = f
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        layer = name.rsplit(".", 1)[0]
        if leaf == "scale":
            arr = np.ones(shape, DTYPE)
        elif leaf == "shift" or leaf == "rel_bias":
            arr = np.zeros(shape, DTYPE)
        elif leaf == "tau":
            arr = np.full(shape, 0.1, DTYPE)
        elif name.endswith("head_a.fc.bias"):
            arr = np.array([1, 0, 0, 0, 1, 0], DTYPE)
        else:
            bound = 1.0 / math.sqrt(fan.get(layer, 1))
            arr = (rng.random(shape, dtype=DTYPE) * 2 - 1) * DTYPE(bound)
        params[name] = arr
    return WeightStore(params, cfg, seed)


def zero_weights(cfg):
    """All-zero store except the affine head bias (identity) and unit norms/taus."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("head_a.fc.bias"):
            params[name] = np.array([1, 0, 0, 0, 1, 0], DTYPE)
        elif name.endswith(".tau"):
            params[name] = np.ones(shape, DTYPE)
        else:
            params[name] = np.zeros(shape, DTYPE)
    return WeightStore(params, cfg, None)


def save_weights(store, path):
    """Write ``magic | u64 header length | JSON header | float32 LE tensors``."""
    entries = []
    offset = 0
    for name, arr in store.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = {
        "format": "warpstab-weights",
        "version": store.version,
        "seed": store.seed,
        "config": config_to_dict(store.config),
        "tensors": entries,
        "count": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in store.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path, cfg=None):
    """Read a weight file; with ``cfg`` given, every shape must match it."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise WeightFormatError(f"{path}: cannot read weights ({exc})") from exc
    if len(raw) < 16 or raw[:8] != _MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise WeightFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format") != "warpstab-weights":
        raise WeightFormatError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise WeightFormatError(
            f"{path}: weight format version {header.get('version')} is not {FORMAT_VERSION}"
        )
    data = raw[16 + hlen :]
    if len(data) != 4 * int(header.get("count", -1)):
        raise WeightFormatError(
            f"{path}: payload holds {len(data)} bytes, header promises {4 * header.get('count', 0)}"
        )
    values = np.frombuffer(data, dtype="<f4")
    file_cfg = config_from_dict(header["config"])
    params = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        arr = values[ent["offset"] : ent["offset"] + n].astype(DTYPE).reshape(ent["shape"])
        if ent["name"].endswith(".tau"):
            arr = np.maximum(arr, DTYPE(TAU_FLOOR))
        params[ent["name"]] = arr
    expected = param_shapes(cfg if cfg is not None else file_cfg)
    for name, shape in expected.items():
        if name not in params:
            raise WeightFormatError(f"{path}: missing parameter {name}")
        if tuple(params[name].shape) != tuple(shape):
            raise WeightFormatError(
                f"{path}: shape mismatch for {name}: file has {tuple(params[name].shape)}, "
                f"config expects {tuple(shape)}"
            )
    extra = [k for k in params if k not in expected]
    if extra:
        raise WeightFormatError(f"{path}: unexpected parameter {extra[0]}")
    return WeightStore({k: params[k] for k in expected}, cfg or file_cfg, header.get("seed"))


# ---------------------------------------------------------------------------
# primitive layers


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of ``x`` (C, H, W) with ``w`` (O, C, k, k)."""
    c, h, wd = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ShapeMismatchError(f"conv expects {ci} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho * wo), dtype=DTYPE)
    # per-tap contiguous blocks keep the products on the BLAS path
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1), dtype=DTYPE)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]
            out += taps[ky, kx] @ np.ascontiguousarray(patch).reshape(c, ho * wo)
    out += b[:, None]
    return out.reshape(o, ho, wo)


def conv_transpose2d(x, w, b, stride=2, padding=1):
    """Transposed convolution; ``w`` is stored (C_in, C_out, k, k)."""
    c, h, wd = x.shape
    ci, o, k, _ = w.shape
    if ci != c:
        raise ShapeMismatchError(f"deconv expects {ci} input channels, got {c}")
    full_h = (h - 1) * stride + k
    full_w = (wd - 1) * stride + k
    buf = np.zeros((o, full_h, full_w), dtype=DTYPE)
    flat = np.ascontiguousarray(x, dtype=DTYPE).reshape(c, h * wd)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=DTYPE)
    for ky in range(k):
        for kx in range(k):
            contrib = (taps[ky, kx] @ flat).reshape(o, h, wd)
            buf[:, ky : ky + stride * (h - 1) + 1 : stride, kx : kx + stride * (wd - 1) + 1 : stride] += contrib
    ho = full_h - 2 * padding
    wo = full_w - 2 * padding
    out = buf[:, padding : padding + ho, padding : padding + wo]
    return out + b[:, None, None]


def relu(x):
    return np.maximum(x, 0, dtype=x.dtype)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(DTYPE(0.7978845608) * (x + DTYPE(0.044715) * x ** 3)))


def layer_norm(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + DTYPE(eps)) * scale + shift


def channel_affine(x, scale, shift):
    """Inference-time batch norm with running statistics folded in."""
    return x * scale[:, None, None] + shift[:, None, None]


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def avg_pool(x, s):
    if s == 1:
        return x
    c, h, w = x.shape
    if h % s or w % s:
        raise ShapeMismatchError(f"pool stride {s} does not divide {h}x{w}")
    return x.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


def upsample_nearest(x, s):
    if s == 1:
        return x
    return x.repeat(s, axis=1).repeat(s, axis=2)


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True, eq=False)
class AttentionParams:
    tau: np.ndarray
    bias: np.ndarray = None
    heads: int = None

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=np.float64))
        if not np.all(tau > 0):
            raise InvalidInputError("tau must be > 0 for every head")
        m = self.heads if self.heads is not None else tau.size
        if tau.size == 1 and m > 1:
            tau = np.full(m, tau[0])
        if tau.size != m:
            raise InvalidInputError(f"{tau.size} temperatures for {m} heads")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "heads", m)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float64)
            if not np.all(np.isfinite(bias)):
                raise InvalidInputError("relative position bias must be finite")
            object.__setattr__(self, "bias", bias)


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, x / safe, 0.0)


def scaled_cosine_attention(q, k, v, params, return_weights=False):
    """``softmax(cos(q_i, k_j) / tau + B_ij) @ V`` per head, heads concatenated.

    ``q`` is ``(..., n_q, E)``, ``k`` and ``v`` are ``(..., n_k, E)``; E is
    split evenly across ``params.heads``. Rows with zero norm have cosine 0.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    m = params.heads
    *lead, nq, e = q.shape
    nk = k.shape[-2]
    if k.shape[-1] != e or v.shape[-2] != nk or e % m or v.shape[-1] % m:
        raise ShapeMismatchError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    d = e // m
    dv = v.shape[-1] // m

    def split(x, dim):
        return np.swapaxes(x.reshape(*x.shape[:-1], m, dim), -2, -3)

    qh, kh, vh = _unit_rows(split(q, d)), _unit_rows(split(k, d)), split(v, dv)
    tau = params.tau.astype(q.dtype if q.dtype == DTYPE else np.float64)
    logits = (qh @ np.swapaxes(kh, -1, -2)) / tau[:, None, None]
    if params.bias is not None:
        logits = logits + params.bias.astype(logits.dtype)
    attn = softmax(logits, axis=-1)
    out = attn @ vh
    out = np.swapaxes(out, -2, -3).reshape(*lead, nq, m * dv)
    return (out, attn) if return_weights else out


def dot_product_attention(q, k, v, heads):
    """Standard scaled dot-product multi-head attention (used in the generator)."""
    *lead, n, e = q.shape
    d = e // heads

    def split(x):
        return np.swapaxes(x.reshape(*x.shape[:-1], heads, d), -2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    attn = softmax((qh @ np.swapaxes(kh, -1, -2)) / DTYPE(math.sqrt(d)), axis=-1)
    return np.swapaxes(attn @ vh, -2, -3).reshape(*lead, n, e)


# ---------------------------------------------------------------------------
# building blocks


def patch_embed(t, patch, weight, bias):
    """Tokens from non-overlapping ``patch x patch`` cells of ``t`` (C, H, W).

    Each patch is flattened channel-major, then projected by ``weight``
    (C * patch * patch, E). Returns ``(H/patch * W/patch, E)``.
    """
    t = np.asarray(t)
    c, h, w = t.shape
    if h % patch or w % patch:
        raise ShapeMismatchError(f"patch {patch} does not divide {h}x{w}")
    gh, gw = h // patch, w // patch
    flat = t.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    return flat @ weight + bias


def hafm_inject(cnn_feat, tokens, s_up, weight, bias):
    """CNN branch update: features plus projected, upsampled tokens."""
    c, h, w = cnn_feat.shape
    n, e = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or g * s_up != h or g * s_up != w:
        raise ShapeMismatchError(f"{g}x{g} tokens upsampled by {s_up} do not cover {h}x{w}")
    proj = (tokens @ weight + bias).T.reshape(c, g, g)
    return cnn_feat + upsample_nearest(proj, s_up)


def hafm_extract(cnn_feat, tokens, s_down, weight, bias):
    """Token branch update: tokens plus projected, average-pooled features."""
    c, h, w = cnn_feat.shape
    n, e = tokens.shape
    g = int(round(math.sqrt(n)))
    if h % s_down or h // s_down != g or w // s_down != g:
        raise ShapeMismatchError(f"{h}x{w} features pooled by {s_down} do not give {g}x{g} tokens")
    pooled = avg_pool(cnn_feat, s_down).reshape(c, g * g).T
    return tokens + pooled @ weight + bias


def hafm_fuse(cnn_feat, tokens, s_down, s_up, weights):
    """Bidirectional additive fusion on one feature map.

    ``weights`` maps ``t2c.weight``, ``t2c.bias`` (E -> C) and
    ``c2t.weight``, ``c2t.bias`` (C -> E). Both outputs are computed from the
    inputs, so the result does not depend on evaluation order.
    """
    new_cnn = hafm_inject(cnn_feat, tokens, s_up, weights["t2c.weight"], weights["t2c.bias"])
    new_tok = hafm_extract(cnn_feat, tokens, s_down, weights["c2t.weight"], weights["c2t.bias"])
    return new_cnn, new_tok


def transformer_block(x, w, prefix, heads):
    """Post-norm encoder layer: attention and MLP, each wrapped in residual + LayerNorm."""
    e = x.shape[-1]
    qkv = x @ w[f"{prefix}.qkv.weight"] + w[f"{prefix}.qkv.bias"]
    q, k, v = qkv[..., :e], qkv[..., e : 2 * e], qkv[..., 2 * e :]
    a = dot_product_attention(q, k, v, heads) @ w[f"{prefix}.proj.weight"] + w[f"{prefix}.proj.bias"]
    x = layer_norm(x + a, w[f"{prefix}.ln1.scale"], w[f"{prefix}.ln1.shift"])
    h = gelu(x @ w[f"{prefix}.fc1.weight"] + w[f"{prefix}.fc1.bias"])
    f = h @ w[f"{prefix}.fc2.weight"] + w[f"{prefix}.fc2.bias"]
    return layer_norm(x + f, w[f"{prefix}.ln2.scale"], w[f"{prefix}.ln2.shift"])


# ---------------------------------------------------------------------------
# generator


def _check_store(w, cfg):
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if name not in w.params:
            raise ShapeMismatchError(f"weights lack parameter {name}")
        if tuple(w.params[name].shape) != tuple(shape):
            raise ShapeMismatchError(
                f"parameter {name} has shape {tuple(w.params[name].shape)}, config expects {tuple(shape)}"
            )


def _tunet_stage(x, cfg, w, st, trace):
    pre = f"stage{st}"
    g = cfg.token_grid
    if st == 1:
        spec = cfg.init
        f0 = conv2d(x, w[f"{pre}.init.conv.weight"], w[f"{pre}.init.conv.bias"], spec.stride, spec.padding)
        f0 = relu(channel_affine(f0, w[f"{pre}.init.bn.scale"], w[f"{pre}.init.bn.shift"]))
    else:
        f0 = x
    trace[f"{pre}.init"] = f0
    tokens = patch_embed(f0, cfg.patch_size, w[f"{pre}.embed.weight"], w[f"{pre}.embed.bias"])
    t = 0
    feats = []
    h = f0
    for i, spec in enumerate(cfg.down, 1):
        b = f"{pre}.down{i}"
        if spec.hafm is not None:
            tokens = transformer_block(tokens, w, f"{pre}.trans{t}", cfg.heads)
            t += 1
            h = hafm_inject(h, tokens, spec.hafm[0], w[f"{b}.hafm.t2c.weight"], w[f"{b}.hafm.t2c.bias"])
        y = conv2d(h, w[f"{b}.conv.weight"], w[f"{b}.conv.bias"], spec.stride, spec.padding)
        y = y + conv2d(h, w[f"{b}.skip.weight"], np.zeros(y.shape[0], DTYPE), spec.stride)
        if spec.hafm is not None:
            tokens = hafm_extract(y, tokens, spec.hafm[1], w[f"{b}.hafm.c2t.weight"], w[f"{b}.hafm.c2t.bias"])
        h = relu(channel_affine(y, w[f"{b}.bn.scale"], w[f"{b}.bn.shift"]))
        trace[b] = h
        feats.append(h)
    z = relu(conv2d(h, w[f"{pre}.head_a.conv.weight"], w[f"{pre}.head_a.conv.bias"]))
    a_hat = (z.reshape(-1) @ w[f"{pre}.head_a.fc.weight"] + w[f"{pre}.head_a.fc.bias"]).reshape(2, 3)
    trace[f"{pre}.out_a"] = a_hat
    n = len(cfg.down)
    for j, spec in enumerate(cfg.up):
        b = f"{pre}.up{n - j}"
        if j > 0:
            h = np.concatenate([h, feats[-(j + 1)]], axis=0)
        if spec.hafm is not None:
            tokens = transformer_block(tokens, w, f"{pre}.trans{t}", cfg.heads)
            t += 1
            h = hafm_inject(h, tokens, spec.hafm[0], w[f"{b}.hafm.t2c.weight"], w[f"{b}.hafm.t2c.bias"])
        y = conv_transpose2d(h, w[f"{b}.deconv.weight"], w[f"{b}.deconv.bias"], spec.stride, spec.padding)
        if spec.hafm is not None:
            tokens = hafm_extract(y, tokens, spec.hafm[1], w[f"{b}.hafm.c2t.weight"], w[f"{b}.hafm.c2t.bias"])
        h = relu(channel_affine(y, w[f"{b}.bn.scale"], w[f"{b}.bn.shift"]))
        trace[b] = h
    k = cfg.out_kernel
    w_hat = conv2d(np.concatenate([h, f0], axis=0), w[f"{pre}.head_w.conv.weight"],
                   w[f"{pre}.head_w.conv.bias"], 1, k // 2)
    w_hat = w_hat.transpose(1, 2, 0)
    p = cfg.patch_size
    t_tok = tokens @ w[f"{pre}.head_t.weight"] + w[f"{pre}.head_t.bias"]
    t_hat = t_tok.reshape(g, g, p, p, 2).transpose(0, 2, 1, 3, 4).reshape(g * p, g * p, 2)
    s = cfg.input_size
    a_field = affine_grid(a_hat, s, s).astype(DTYPE)
    trace[f"{pre}.out_w"] = w_hat
    trace[f"{pre}.out_t"] = t_hat
    trace[f"{pre}.grid_a"] = a_field
    out = a_field + w_hat + t_hat
    trace[f"{pre}.field"] = out
    return out, f0


def tunet_forward(window, cfg, w, return_trace=False):
    """Run the generator on a stacked window tensor ``(in_channels, S, S)``.

    Returns the two adjacent warp fields ``(W_t, W_t+1)``, each ``S x S x 2``;
    with ``return_trace`` also a dict of every intermediate activation.
    """
    _check_store(w, cfg)
    x = np.asarray(window, dtype=DTYPE)
    s = cfg.input_size
    if x.shape != (cfg.in_channels, s, s):
        raise ShapeMismatchError(f"window tensor must be {(cfg.in_channels, s, s)}, got {x.shape}")
    trace = {}
    fields = _run_stages(x, cfg, w, cfg.n_stages, trace)
    out = (fields[0], fields[-1])
    return (out, trace) if return_trace else out


def _run_stages(x, cfg, w, upto, trace):
    fields = []
    feat = x
    for st in range(1, upto + 1):
        fld, f0 = _tunet_stage(feat, cfg, w, st, trace)
        fields.append(fld)
        if st < upto:
            # next stage sees the stem features resampled through this stage's field
            warped = sample_bilinear(f0.transpose(1, 2, 0), fld[..., 0], fld[..., 1])
            feat = np.ascontiguousarray(warped.transpose(2, 0, 1), dtype=DTYPE)
    return fields


def build_window_tensor(frames, cfg):
    """Stack a ``2*theta + 1`` frame window into the generator input.

    Channels hold the window ending at the centre frame's sequence, then the
    same window shifted one step later (last frame repeated), each frame as
    three RGB planes in temporal order.
    """
    from .core import resize_frame

    frames = list(frames)
    n = cfg.window_length
    if len(frames) != n:
        raise ShapeMismatchError(f"window must hold {n} frames, got {len(frames)}")
    s = cfg.input_size
    small = [np.asarray(resize_frame(np.asarray(f, dtype=DTYPE), s, s), dtype=DTYPE) for f in frames]
    seq_t = small
    seq_t1 = small[1:] + [small[-1]]
    planes = [f.transpose(2, 0, 1) for f in seq_t + seq_t1]
    return np.concatenate(planes, axis=0)


# ---------------------------------------------------------------------------
# discriminator


def _window_partition(x, win):
    g, _, e = x.shape
    nw = g // win
    return x.reshape(nw, win, nw, win, e).transpose(0, 2, 1, 3, 4).reshape(nw * nw, win * win, e)


def _window_merge(x, win, g):
    nw = g // win
    e = x.shape[-1]
    return x.reshape(nw, nw, win, win, e).transpose(0, 2, 1, 3, 4).reshape(g, g, e)


def _sdm_single(img, cfg, w):
    p, g = cfg.patch_size, cfg.grid
    x = patch_embed(img.transpose(2, 0, 1), p, w["embed.weight"], w["embed.bias"]).reshape(g, g, -1)
    e = cfg.embed_dim
    for b in range(cfg.blocks):
        pre = f"block{b}"
        win = _window_partition(x, cfg.window)
        qkv = win @ w[f"{pre}.qkv.weight"] + w[f"{pre}.qkv.bias"]
        params = AttentionParams(np.maximum(w[f"{pre}.tau"], TAU_FLOOR), w[f"{pre}.rel_bias"], cfg.heads)
        att = scaled_cosine_attention(qkv[..., :e], qkv[..., e : 2 * e], qkv[..., 2 * e :], params)
        att = att.astype(DTYPE) @ w[f"{pre}.proj.weight"] + w[f"{pre}.proj.bias"]
        x = x + layer_norm(_window_merge(att, cfg.window, g), w[f"{pre}.ln1.scale"], w[f"{pre}.ln1.shift"])
        hdn = gelu(x @ w[f"{pre}.fc1.weight"] + w[f"{pre}.fc1.bias"])
        f = hdn @ w[f"{pre}.fc2.weight"] + w[f"{pre}.fc2.bias"]
        x = x + layer_norm(f, w[f"{pre}.ln2.scale"], w[f"{pre}.ln2.shift"])
    return (x @ w["head.weight"] + w["head.bias"])[..., 0]


def sdm_forward(frames, cfg, w):
    """Score map(s) over the patch grid for one frame ``(H, W, 3)`` or a batch ``(B, H, W, 3)``."""
    _check_store(w, cfg)
    x = np.asarray(frames, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ShapeMismatchError(
            f"discriminator expects (B, {cfg.image_size}, {cfg.image_size}, 3), got {np.shape(frames)}"
        )
    out = np.stack([_sdm_single(img, cfg, w) for img in x])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# self checks

HEAD_PREFIXES = {"a": "head_a.fc", "w": "head_w.conv", "t": "head_t"}


def head_additivity_error(x, cfg, w, trace=None):
    """Largest deviation between a stage's field and its heads, each isolated by zeroing the others.

    For every stage the full field is compared with ``grid(A) + W + T``, and
    each head's contribution is re-derived by a forward pass in which the
    other two heads of that stage have all-zero weights.
    """
    if trace is None:
        trace = {}
        _run_stages(np.asarray(x, DTYPE), cfg, w, cfg.n_stages, trace)
    parts_of = {"a": "grid_a", "w": "out_w", "t": "out_t"}
    worst = 0.0
    for st in range(1, cfg.n_stages + 1):
        pre = f"stage{st}"
        parts = {k: trace[f"{pre}.{v}"] for k, v in parts_of.items()}
        worst = max(worst, float(np.abs(trace[f"{pre}.field"] - sum(parts.values())).max()))
        for keep in parts:
            zeroed = w.zeroed([f"{pre}.{HEAD_PREFIXES[o]}" for o in HEAD_PREFIXES if o != keep])
            fz = _run_stages(np.asarray(x, DTYPE), cfg, zeroed, st, {})[st - 1]
            worst = max(worst, float(np.abs(fz - parts[keep]).max()))
    return worst


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def run_network_checks(cfg=None, sdm_cfg=None, seed=0, weights=None, n_attention_cases=20):
    """Invariant checks behind the ``net-check`` command."""
    cfg = cfg or desk_tunet_config()
    sdm_cfg = sdm_cfg or SDMConfig()
    rng = np.random.default_rng(seed)
    results = []

    worst_sum, worst_bound = 0.0, 0.0
    for _ in range(n_attention_cases):
        m = int(rng.integers(1, 5))
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 17))
        q, k, v = (rng.standard_normal((n, m * d)) for _ in range(3))
        tau = rng.uniform(0.05, 1.0, m)
        _, attn = scaled_cosine_attention(q, k, v, AttentionParams(tau, None, m), return_weights=True)
        worst_sum = max(worst_sum, float(np.abs(attn.sum(-1) - 1).max()))
        qn = _unit_rows(np.swapaxes(q.reshape(n, m, d), 0, 1))
        kn = _unit_rows(np.swapaxes(k.reshape(n, m, d), 0, 1))
        logits = qn @ np.swapaxes(kn, -1, -2)
        worst_bound = max(worst_bound, float((np.abs(logits) - 1).max()))
    results.append(CheckResult("attention_rows_normalized", worst_sum <= 1e-6, f"max |row sum - 1| = {worst_sum:.2e}"))
    results.append(CheckResult("cosine_logits_bounded", worst_bound <= 1e-9, f"max excess = {worst_bound:.2e}"))

    try:
        expected = stage_shapes(cfg)
        w = weights if weights is not None else init_weights(cfg, seed)
        x = rng.random((cfg.in_channels, cfg.input_size, cfg.input_size), dtype=DTYPE)
        (f1, f2), trace = tunet_forward(x, cfg, w, return_trace=True)
        bad = []
        for st in range(1, cfg.n_stages + 1):
            for name, shape in expected.items():
                if st > 1 and name == "init":
                    continue
                arr = trace[f"stage{st}.{name}"]
                got = arr.shape if arr.ndim != 3 or name.startswith("out") else (arr.shape[1], arr.shape[2], arr.shape[0])
                if tuple(got) != tuple(shape):
                    bad.append(f"stage{st}.{name}: {got} != {shape}")
        results.append(CheckResult("stage_shapes", not bad, "; ".join(bad) or f"{len(expected)} stages per pass match"))
        finite = bool(np.all(np.isfinite(f1)) and np.all(np.isfinite(f2)))
        results.append(CheckResult("fields_finite", finite, f"field shape {f1.shape}"))
        (g1, g2) = tunet_forward(x, cfg, w)
        results.append(CheckResult("deterministic", np.array_equal(f1, g1) and np.array_equal(f2, g2)))
        worst = head_additivity_error(x, cfg, w, trace)
        results.append(CheckResult("head_additivity", worst <= 1e-5, f"max deviation {worst:.2e}"))
    except (ShapeMismatchError, InvalidInputError, KeyError) as exc:
        results.append(CheckResult("generator_forward", False, str(exc)))

    try:
        sw = init_weights(sdm_cfg, seed)
        imgs = rng.random((2, sdm_cfg.image_size, sdm_cfg.image_size, 3), dtype=DTYPE)
        sc = sdm_forward(imgs, sdm_cfg, sw)
        swapped = sdm_forward(imgs[::-1], sdm_cfg, sw)
        ok = sc.shape == (2, *sdm_cfg.score_shape) and np.array_equal(sc[::-1], swapped)
        results.append(CheckResult("discriminator_batch", ok, f"score map {sc.shape[1:]}"))
    except (ShapeMismatchError, InvalidInputError) as exc:
        results.append(CheckResult("discriminator_batch", False, str(exc)))
    return results
