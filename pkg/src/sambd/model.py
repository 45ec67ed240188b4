"""Slice-aware encoder/decoder segmentation model.

A shared separable-conv encoder (stem + three stride-2 blocks) feeds a
dilated-pyramid context module; the decoder reconstructs one prediction per
central input slice, either through a single widened path or through one
branch per output slice, optionally gated by slice-centric attention blocks
on the low- and high-level paths.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

SINGLE_BRANCH = "single_branch"
MULTI_BRANCH = "multi_branch"

_CKPT_MAGIC = b"SAMBDCK1\n"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``c_in`` adjacent slices enter the network and the central
    ``c_out = c_in - 2`` slices are predicted; no output is produced for the
    top or bottom slice of a stack.
    """

    c_in: int = 5
    base_channels: int = 16
    low_level_channels_reduced: int = 24
    aspp_rates: tuple = (1, 2, 4)
    aspp_image_pooling: bool = True
    decoder_channels: int = 32
    variant: str = MULTI_BRANCH
    use_sab: bool = False
    classes: int = 3
    width_multiplier: int = 1

    @property
    def c_out(self):
        return self.c_in - 2

    def validate(self):
        if self.c_in < 3 or self.c_in % 2 == 0:
            raise ValueError(f"c_in must be an odd integer >= 3, got {self.c_in}")
        if self.variant not in (SINGLE_BRANCH, MULTI_BRANCH):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.use_sab and self.variant != MULTI_BRANCH:
            raise ValueError("slice attention requires the multi-branch decoder")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ValueError(f"dilation rates must all be >= 1, got {self.aspp_rates}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.width_multiplier < 1:
            raise ValueError("width_multiplier must be >= 1")
        if self.use_sab:
            for name, c in (
                ("low_level_channels_reduced", self.low_level_channels_reduced),
                ("decoder_channels", self.decoder_channels),
            ):
                if c % 8 != 0:
                    raise ValueError(f"{name}={c} must be divisible by 8 for attention blocks")

    def to_dict(self):
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["aspp_rates"] = tuple(d.get("aspp_rates", (1, 2, 4)))
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    dtype: np.dtype = np.float32

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class EncoderTaps:
    """Two encoder read-outs: ``low`` at 1/4 input scale, ``high`` at 1/16 after context fusion."""

    low: Tensor
    high: Tensor


# -- construction ----------------------------------------------------------------


def _glorot(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    fan_out = shape[0] * int(np.prod(shape[2:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _add_conv(params, rng, name, cout, cin, k, dtype, affine=True):
    params[f"{name}.w"] = Tensor(_glorot(rng, (cout, cin, k, k), dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    if affine:
        params[f"{name}.gw"] = Tensor(np.ones((cout, 1, 1), dtype=dtype), requires_grad=True)
        params[f"{name}.gb"] = Tensor(np.zeros((cout, 1, 1), dtype=dtype), requires_grad=True)


def _add_separable(params, rng, name, cout, cin, k, dtype):
    params[f"{name}.dw"] = Tensor(_glorot(rng, (cin, 1, k, k), dtype), requires_grad=True)
    params[f"{name}.pw"] = Tensor(_glorot(rng, (cout, cin, 1, 1), dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    params[f"{name}.gw"] = Tensor(np.ones((cout, 1, 1), dtype=dtype), requires_grad=True)
    params[f"{name}.gb"] = Tensor(np.zeros((cout, 1, 1), dtype=dtype), requires_grad=True)


def _add_sab(params, rng, name, channels, c_out, dtype):
    mid = channels // 8
    _add_conv(params, rng, f"{name}.conv", mid, channels, 3, dtype, affine=False)
    for m in range(c_out):
        _add_conv(params, rng, f"{name}.head{m}", 1, mid, 1, dtype, affine=False)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize all parameters from ``seed``.

    Conv kernels draw from a uniform Glorot range, biases start at zero and
    per-channel affine scalings at identity.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dtype = np.dtype(dtype)
    b = config.base_channels
    a = config.decoder_channels
    red = config.low_level_channels_reduced
    params: dict[str, Tensor] = {}

    _add_conv(params, rng, "enc.stem", b, config.c_in, 3, dtype)
    _add_separable(params, rng, "enc.block1", 2 * b, b, 3, dtype)
    _add_separable(params, rng, "enc.block2", 4 * b, 2 * b, 3, dtype)
    _add_separable(params, rng, "enc.block3", 8 * b, 4 * b, 3, dtype)

    for i, rate in enumerate(config.aspp_rates):
        k = 1 if rate == 1 else 3
        _add_conv(params, rng, f"enc.aspp.branch{i}", a, 8 * b, k, dtype)
    if config.aspp_image_pooling:
        _add_conv(params, rng, "enc.aspp.pool", a, 8 * b, 1, dtype)
    n_branches = len(config.aspp_rates) + (1 if config.aspp_image_pooling else 0)
    _add_conv(params, rng, "enc.aspp.fuse", a, n_branches * a, 1, dtype)

    _add_conv(params, rng, "dec.reduce", red, 2 * b, 1, dtype)
    if config.variant == MULTI_BRANCH:
        if config.use_sab:
            _add_sab(params, rng, "dec.sab_low", red, config.c_out, dtype)
            _add_sab(params, rng, "dec.sab_high", a, config.c_out, dtype)
        for m in range(config.c_out):
            _add_conv(params, rng, f"dec.branch{m}.low", a, red, 1, dtype)
            _add_conv(params, rng, f"dec.branch{m}.high", a, a, 1, dtype)
            _add_conv(params, rng, f"dec.branch{m}.fuse", a, 2 * a, 3, dtype)
            _add_conv(params, rng, f"dec.branch{m}.head", config.classes, a, 3, dtype, affine=False)
    else:
        w = config.width_multiplier * a
        _add_conv(params, rng, "dec.single.low", w, red, 1, dtype)
        _add_conv(params, rng, "dec.single.high", w, a, 1, dtype)
        _add_conv(params, rng, "dec.single.fuse", w, 2 * w, 3, dtype)
        _add_conv(params, rng, "dec.single.head", config.c_out * config.classes, w, 3, dtype, affine=False)

    return Model(config=config, params=params, dtype=dtype)


# -- forward passes ---------------------------------------------------------------


def _conv_block(params, name, x, stride=1, dilation=1, padding=0):
    y = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, dilation=dilation, padding=padding)
    y = y * params[f"{name}.gw"] + params[f"{name}.gb"]
    return T.relu(y)


def _separable_block(params, name, x, stride=1):
    y = T.separable_conv2d(x, params[f"{name}.dw"], params[f"{name}.pw"], params[f"{name}.b"], stride=stride, padding=1)
    y = y * params[f"{name}.gw"] + params[f"{name}.gb"]
    return T.relu(y)


def encode(model: Model, stack: Tensor) -> EncoderTaps:
    """Shared encoder: returns the 1/4-scale tap and the fused 1/16-scale context."""
    p = model.params
    n, c, h, w = stack.shape
    if h % 16 != 0 or w % 16 != 0:
        raise ValueError(f"spatial extents must be divisible by 16, got {h}x{w}")
    if c != model.config.c_in:
        raise ValueError(f"expected {model.config.c_in} input slices, got {c}")
    x = _conv_block(p, "enc.stem", stack, stride=2, padding=1)
    low = _separable_block(p, "enc.block1", x, stride=2)
    x = _separable_block(p, "enc.block2", low, stride=2)
    x = _separable_block(p, "enc.block3", x, stride=2)

    branches = []
    for i, rate in enumerate(model.config.aspp_rates):
        if rate == 1:
            branches.append(_conv_block(p, f"enc.aspp.branch{i}", x))
        else:
            branches.append(_conv_block(p, f"enc.aspp.branch{i}", x, dilation=rate, padding=rate))
    if model.config.aspp_image_pooling:
        pooled = x.mean(axis=(-2, -1), keepdims=True)
        pooled = _conv_block(p, "enc.aspp.pool", pooled)
        branches.append(T.broadcast_spatial(pooled, x.shape[-2], x.shape[-1]))
    fused = T.concat(branches, axis=1) if len(branches) > 1 else branches[0]
    high = _conv_block(p, "enc.aspp.fuse", fused)
    return EncoderTaps(low=low, high=high)


def sab(features: Tensor, sab_params: dict, c_out: int) -> list:
    """Slice-centric attention: one sigmoid spatial map per output branch.

    A 3x3 conv squeezes the features to one eighth of their channels, then
    ``c_out`` parallel 1x1 conv + sigmoid heads produce per-branch maps in
    (0, 1), each broadcast-multiplied with the input features.
    """
    channels = features.shape[1]
    if channels % 8 != 0:
        raise ValueError(f"feature channels must be divisible by 8, got {channels}")
    mid = T.relu(T.conv2d(features, sab_params["conv.w"], sab_params["conv.b"], padding=1))
    gated = []
    for m in range(c_out):
        amap = T.sigmoid(T.conv2d(mid, sab_params[f"head{m}.w"], sab_params[f"head{m}.b"]))
        gated.append(features * amap)
    return gated


def _sab_params(model, prefix):
    plen = len(prefix) + 1
    return {name[plen:]: t for name, t in model.params.items() if name.startswith(prefix + ".")}


def attention_maps(model: Model, features: Tensor, which: str) -> list:
    """The raw attention maps of one attention block ("low" or "high")."""
    sp = _sab_params(model, f"dec.sab_{which}")
    mid = T.relu(T.conv2d(features, sp["conv.w"], sp["conv.b"], padding=1))
    return [
        T.sigmoid(T.conv2d(mid, sp[f"head{m}.w"], sp[f"head{m}.b"]))
        for m in range(model.config.c_out)
    ]


def decode_multibranch(model: Model, taps: EncoderTaps) -> Tensor:
    """Per-slice decoder branches -> logits [N, c_out, classes, H, W]."""
    cfg = model.config
    p = model.params
    low_shared = _conv_block(p, "dec.reduce", taps.low)
    if cfg.use_sab:
        low_list = sab(low_shared, _sab_params(model, "dec.sab_low"), cfg.c_out)
        high_list = sab(taps.high, _sab_params(model, "dec.sab_high"), cfg.c_out)
    else:
        low_list = [low_shared] * cfg.c_out
        high_list = [taps.high] * cfg.c_out

    logits = []
    for m in range(cfg.c_out):
        lo = _conv_block(p, f"dec.branch{m}.low", low_list[m])
        hi = _conv_block(p, f"dec.branch{m}.high", high_list[m])
        hi = T.bilinear_upsample(hi, 4)
        fused = _conv_block(p, f"dec.branch{m}.fuse", T.concat([lo, hi], axis=1), padding=1)
        full = T.bilinear_upsample(fused, 4)
        head = T.conv2d(full, p[f"dec.branch{m}.head.w"], p[f"dec.branch{m}.head.b"], padding=1)
        logits.append(head)
    return T.stack(logits, axis=1)


def decode_singlebranch(model: Model, taps: EncoderTaps) -> Tensor:
    """One widened decoder path emitting c_out*classes channels, reshaped per slice."""
    cfg = model.config
    p = model.params
    low_shared = _conv_block(p, "dec.reduce", taps.low)
    lo = _conv_block(p, "dec.single.low", low_shared)
    hi = _conv_block(p, "dec.single.high", taps.high)
    hi = T.bilinear_upsample(hi, 4)
    fused = _conv_block(p, "dec.single.fuse", T.concat([lo, hi], axis=1), padding=1)
    full = T.bilinear_upsample(fused, 4)
    head = T.conv2d(full, p["dec.single.head.w"], p["dec.single.head.b"], padding=1)
    n, _, h, w = head.shape
    return head.reshape((n, cfg.c_out, cfg.classes, h, w))


def decode(model: Model, taps: EncoderTaps) -> Tensor:
    if model.config.variant == MULTI_BRANCH:
        return decode_multibranch(model, taps)
    return decode_singlebranch(model, taps)


def forward_batch(model: Model, stacks) -> Tensor:
    """Forward a batch [N, c_in, H, W] -> probabilities [N, c_out, classes, H, W]."""
    if not isinstance(stacks, Tensor):
        stacks = Tensor(np.asarray(stacks, dtype=model.dtype))
    logits = decode(model, encode(model, stacks))
    return T.softmax_over_classes(logits, axis=-3)


def forward(model: Model, stack) -> Tensor:
    """Forward a single stack -> probabilities [c_out, classes, H, W]."""
    if isinstance(stack, Tensor):
        data = stack.data
    else:
        data = np.asarray(stack, dtype=model.dtype)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise ValueError(f"expected one stack [c_in, H, W] or [1, c_in, H, W], got {data.shape}")
    probs = forward_batch(model, Tensor(data) if not isinstance(stack, Tensor) else stack.reshape(data.shape))
    return probs.reshape(probs.shape[1:])


# -- accounting --------------------------------------------------------------------


def count_params(model: Model) -> int:
    """Exact number of scalar parameters."""
    return sum(int(p.size) for p in model.params.values())


def count_flops(model: Model, height: int, width: int) -> int:
    """Multiply-accumulate count of convolutions and upsamplings for one forward pass.

    Bias additions, affine scalings and the softmax are excluded.
    """
    cfg = model.config
    if height % 16 or width % 16:
        raise ValueError("extents must be divisible by 16")
    b = cfg.base_channels
    a = cfg.decoder_channels
    red = cfg.low_level_channels_reduced

    def conv(cout, cin, k, oh, ow):
        return cout * cin * k * k * oh * ow

    def depthwise(c, k, oh, ow):
        return c * k * k * oh * ow

    def upsample(c, oh, ow):
        # Two-tap interpolation along each image axis: 4 MACs per output value.
        return 4 * c * oh * ow

    h2, w2 = height // 2, width // 2
    h4, w4 = height // 4, width // 4
    h8, w8 = height // 8, width // 8
    h16, w16 = height // 16, width // 16

    total = conv(b, cfg.c_in, 3, h2, w2)
    total += depthwise(b, 3, h4, w4) + conv(2 * b, b, 1, h4, w4)
    total += depthwise(2 * b, 3, h8, w8) + conv(4 * b, 2 * b, 1, h8, w8)
    total += depthwise(4 * b, 3, h16, w16) + conv(8 * b, 4 * b, 1, h16, w16)

    n_branches = 0
    for rate in cfg.aspp_rates:
        total += conv(a, 8 * b, 1 if rate == 1 else 3, h16, w16)
        n_branches += 1
    if cfg.aspp_image_pooling:
        total += conv(a, 8 * b, 1, 1, 1)
        n_branches += 1
    total += conv(a, n_branches * a, 1, h16, w16)

    total += conv(red, 2 * b, 1, h4, w4)
    if cfg.variant == MULTI_BRANCH:
        if cfg.use_sab:
            total += conv(red // 8, red, 3, h4, w4) + cfg.c_out * conv(1, red // 8, 1, h4, w4)
            total += conv(a // 8, a, 3, h16, w16) + cfg.c_out * conv(1, a // 8, 1, h16, w16)
        per_branch = conv(a, red, 1, h4, w4)
        per_branch += conv(a, a, 1, h16, w16) + upsample(a, h4, w4)
        per_branch += conv(a, 2 * a, 3, h4, w4)
        per_branch += upsample(a, height, width)
        per_branch += conv(cfg.classes, a, 3, height, width)
        total += cfg.c_out * per_branch
    else:
        w_ch = cfg.width_multiplier * a
        total += conv(w_ch, red, 1, h4, w4)
        total += conv(w_ch, a, 1, h16, w16) + upsample(w_ch, h4, w4)
        total += conv(w_ch, 2 * w_ch, 3, h4, w4)
        total += upsample(w_ch, height, width)
        total += conv(cfg.c_out * cfg.classes, w_ch, 3, height, width)
    return int(total)


# -- checkpoint io -------------------------------------------------------------------


def save_checkpoint(model: Model, path):
    """Write config header plus named little-endian float32 parameter blobs."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    header = json.dumps({"format_version": 1, "config": model.config.to_dict()}, sort_keys=True)
    buf.write(header.encode("utf-8") + b"\n")
    for name in sorted(model.params):
        data = model.params[name].data.astype("<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=np.float32) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(_CKPT_MAGIC)
    end = raw.index(b"\n", off)
    header = json.loads(raw[off:end].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, seed=0, dtype=dtype)
    off = end + 1
    loaded = {}
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        loaded[name] = data
    if set(loaded) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the stored config")
    for name, data in loaded.items():
        if model.params[name].shape != data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        model.params[name].data = data.astype(dtype)
    return model
