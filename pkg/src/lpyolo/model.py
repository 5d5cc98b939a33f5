"""The detector network: a 16-layer graph (10 quantized convolutions, 6 max
pools) shrinking 416x416x3 RGB input to a 13x13x18 prediction grid.

Owns bit-width configuration (m-bit weights, n-bit activations, with the
first and last convolutions pinned to 8 bits), weight file serialization,
deterministic random initialization for fixtures, and full forward passes
in integer, fake-quant, and pure-float modes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    ConvWeights,
    RequantSpec,
    conv2d_acc,
    conv2d_real,
    maxpool,
    maxpool_grid,
    requantize,
    sigmoid,
)
from .qcore import FloatTensor, QuantParams, QuantTensor

__all__ = [
    "ModelConfig",
    "RunConfig",
    "ConvLayer",
    "PoolLayer",
    "Model",
    "WeightFile",
    "LayerRecord",
    "WeightFileError",
    "BadMagicError",
    "TruncatedFileError",
    "BitWidthError",
    "LayerCountError",
    "CONV_PLAN",
    "POOL_STRIDES",
    "INPUT_SIZE",
    "OUTPUT_GRID",
    "OUTPUT_CHANNELS",
    "PIXEL_SCALE",
    "DEFAULT_ANCHORS",
    "plan_shapes",
    "build_model",
    "build_from_file",
    "random_init",
    "parameter_count",
    "forward",
    "forward_float",
    "save_weights",
    "load_weights",
    "load_run_config",
]

INPUT_SIZE = 416
OUTPUT_GRID = 13
OUTPUT_CHANNELS = 18

# (in_channels, out_channels, kernel) for conv1..conv10. Convs 1..6 are each
# followed by a 2x2 max pool; the sixth pool is stride 1 (shape-preserving),
# the rest stride 2.
CONV_PLAN = (
    (3, 8, 3),
    (8, 8, 3),
    (8, 16, 3),
    (16, 32, 3),
    (32, 56, 3),
    (56, 104, 3),
    (104, 208, 3),
    (208, 56, 1),
    (56, 104, 3),
    (104, 18, 3),
)
POOL_STRIDES = (2, 2, 2, 2, 2, 1)

# One step of the 8-bit unsigned lattice spanning [0, 1]: pixel 255 -> 1.0.
# Kept as an exact float64 expression; the 32-bit copy a weight file stores
# is re-derived back to this value on load.
PIXEL_SCALE = 1.0 / 255.0

DEFAULT_ANCHORS = ((81.0, 82.0), (135.0, 169.0), (344.0, 319.0))

DECODE_MODES = ("direct", "anchor_pow2")


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class BitWidthError(WeightFileError):
    pass


class LayerCountError(WeightFileError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Bit widths and anchor priors. weight_bits/act_bits govern convolutions
    2..9; the first and last convolutions always run at first_last_bits."""

    weight_bits: int
    act_bits: int
    anchors: tuple = DEFAULT_ANCHORS
    first_last_bits: int = 8
    input_size: int = INPUT_SIZE

    def __post_init__(self) -> None:
        if not 2 <= self.weight_bits <= 8:
            raise ValueError(f"weight_bits {self.weight_bits} outside 2..8")
        if not 1 <= self.act_bits <= 8:
            raise ValueError(f"act_bits {self.act_bits} outside 1..8")
        if self.first_last_bits != 8:
            raise ValueError("first/last convolution bit width is fixed at 8")
        if self.input_size != INPUT_SIZE:
            raise ValueError(f"input size is fixed at {INPUT_SIZE}")
        anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        if len(anchors) != 3:
            raise ValueError(f"exactly 3 anchors required, got {len(anchors)}")
        for w, h in anchors:
            if not (0.0 < w <= INPUT_SIZE and 0.0 < h <= INPUT_SIZE):
                raise ValueError(f"anchor ({w}, {h}) outside (0, {INPUT_SIZE}]")
        object.__setattr__(self, "anchors", anchors)


@dataclass(frozen=True)
class RunConfig:
    """Run-file settings: bit widths (None = take from the weight file),
    anchors, and the postprocessing knobs."""

    weight_bits: int | None = None
    act_bits: int | None = None
    anchors: tuple = DEFAULT_ANCHORS
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    decode_mode: str = "anchor_pow2"

    def __post_init__(self) -> None:
        if not 0.0 <= self.conf_threshold:
            raise ValueError(f"conf_threshold {self.conf_threshold} negative")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou {self.nms_iou} outside [0, 1]")
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"unknown decode_mode {self.decode_mode!r}")
        object.__setattr__(
            self, "anchors", tuple((float(w), float(h)) for w, h in self.anchors)
        )

    def model_config(self, file_wbits: int, file_abits: int) -> ModelConfig:
        """Resolve bit widths against a weight file's header; explicit
        settings must agree with the file."""
        wb = self.weight_bits if self.weight_bits is not None else file_wbits
        ab = self.act_bits if self.act_bits is not None else file_abits
        if wb != file_wbits or ab != file_abits:
            raise ValueError(
                f"configured {wb}W{ab}A but weight file declares "
                f"{file_wbits}W{file_abits}A"
            )
        return ModelConfig(weight_bits=wb, act_bits=ab, anchors=self.anchors)


_RUN_CONFIG_KEYS = {
    "weight_bits",
    "act_bits",
    "anchors",
    "conf_threshold",
    "nms_iou",
    "decode_mode",
}


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError("run config must be a JSON object")
    unknown = sorted(set(raw) - _RUN_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown run config keys: {', '.join(unknown)}")
    return RunConfig(**raw)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    weights: ConvWeights
    requant: RequantSpec


@dataclass(frozen=True)
class PoolLayer:
    name: str
    stride: int


@dataclass(frozen=True)
class Model:
    """Immutable built network; safe to share across worker threads."""

    config: ModelConfig
    layers: tuple = field(repr=False)

    def conv_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, ConvLayer)]


def plan_shapes() -> list:
    """Static (name, in_shape, out_shape) chain of the 16-layer graph."""
    rows = []
    h = w = INPUT_SIZE
    c = 3
    for i, (cin, cout, _k) in enumerate(CONV_PLAN, start=1):
        if cin != c:
            raise AssertionError(f"conv{i} plan expects {cin} channels, chain has {c}")
        rows.append((f"conv{i}", (h, w, c), (h, w, cout)))
        c = cout
        if i <= len(POOL_STRIDES):
            stride = POOL_STRIDES[i - 1]
            oh, ow = (h // 2, w // 2) if stride == 2 else (h, w)
            rows.append((f"pool{i}", (h, w, c), (oh, ow, c)))
            h, w = oh, ow
    if (h, w, c) != (OUTPUT_GRID, OUTPUT_GRID, OUTPUT_CHANNELS):
        raise AssertionError(f"chain ends at {(h, w, c)}")
    return rows


def _layer_bits(cfg: ModelConfig, index: int) -> tuple[int, int]:
    """(weight_bits, output act_bits) for conv `index` (1-based)."""
    if index in (1, len(CONV_PLAN)):
        return cfg.first_last_bits, cfg.first_last_bits
    return cfg.weight_bits, cfg.act_bits


def validate_model(model: Model) -> None:
    """Walk the layer list against the static plan; raise naming the first
    offending layer. Covers shapes, kernels, bit widths, activation kinds,
    and exact scale-chain continuity."""
    expected = plan_shapes()
    if len(model.layers) != len(expected):
        raise ValueError(
            f"layer count {len(model.layers)} != {len(expected)}"
        )
    convs = model.conv_layers()
    if len(convs) != len(CONV_PLAN):
        raise ValueError(f"conv count {len(convs)} != {len(CONV_PLAN)}")
    conv_index = 0
    prev_out_scale = None
    for layer, (name, in_shape, out_shape) in zip(model.layers, expected):
        if layer.name != name:
            raise ValueError(f"layer {layer.name} where {name} expected")
        if isinstance(layer, PoolLayer):
            if layer.stride != POOL_STRIDES[int(name[4:]) - 1]:
                raise ValueError(f"{name}: wrong stride {layer.stride}")
            continue
        conv_index += 1
        cin, cout, k = CONV_PLAN[conv_index - 1]
        w = layer.weights
        if (w.in_channels, w.out_channels, w.kernel) != (cin, cout, k):
            raise ValueError(
                f"{name}: weights {w.in_channels}->{w.out_channels} k={w.kernel}, "
                f"plan wants {cin}->{cout} k={k}"
            )
        wbits, abits = _layer_bits(model.config, conv_index)
        if w.w_params.bits != wbits:
            raise ValueError(f"{name}: weight bits {w.w_params.bits} != {wbits}")
        if layer.requant.out_bits != abits:
            raise ValueError(f"{name}: act bits {layer.requant.out_bits} != {abits}")
        want_act = "rescaled_hardtanh" if conv_index == len(CONV_PLAN) else "relu"
        if layer.requant.activation != want_act:
            raise ValueError(f"{name}: activation {layer.requant.activation}")
        if layer.requant.w_scale != w.w_params.scale:
            raise ValueError(f"{name}: weight scale mismatch")
        if conv_index == 1:
            if layer.requant.in_scale != PIXEL_SCALE:
                raise ValueError(f"{name}: input scale must be 1/255 exactly")
        elif layer.requant.in_scale != prev_out_scale:
            raise ValueError(f"{name}: input scale breaks the chain")
        prev_out_scale = layer.requant.out_scale
    if convs[-1].requant.out_scale != PIXEL_SCALE:
        raise ValueError("final output scale must be 1/255 exactly")


# ---------------------------------------------------------------------------
# Weight file format, little-endian:
#   magic "LPYQ" (4B) | version u8=1 | weight_bits u8 | act_bits u8
#   | layer_count u8=10
# then per conv layer:
#   index u8 | kernel u8 | in_ch u16 | out_ch u16
#   | w_scale f32 | in_scale f32 | out_scale f32 | bias_flag u8
#   | weights out*in*k*k signed bytes, [out][in][kh][kw] order
#   | bias out_ch x i32 (only when bias_flag=1)

WEIGHT_MAGIC = b"LPYQ"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<4sBBBB")
_LAYER_HEAD = struct.Struct("<BBHHfffB")


@dataclass(frozen=True)
class LayerRecord:
    index: int
    kernel: int
    in_ch: int
    out_ch: int
    w_scale: float
    in_scale: float
    out_scale: float
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray | None = field(repr=False, default=None)


@dataclass(frozen=True)
class WeightFile:
    weight_bits: int
    act_bits: int
    records: tuple


def save_weights(model: Model, path) -> None:
    cfg = model.config
    out = bytearray()
    out += _HEADER.pack(
        WEIGHT_MAGIC, WEIGHT_VERSION, cfg.weight_bits, cfg.act_bits, len(CONV_PLAN)
    )
    for i, layer in enumerate(model.conv_layers(), start=1):
        w = layer.weights
        rq = layer.requant
        out += _LAYER_HEAD.pack(
            i,
            w.kernel,
            w.in_channels,
            w.out_channels,
            np.float32(rq.w_scale),
            np.float32(rq.in_scale),
            np.float32(rq.out_scale),
            0 if w.bias is None else 1,
        )
        out += w.weights.astype(np.int8).tobytes()
        if w.bias is not None:
            out += w.bias.astype("<i4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"weight file truncated at byte {self.pos} (wanted {n} more)"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_weights(path) -> WeightFile:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic, version, wbits, abits, count = _HEADER.unpack(r.take(_HEADER.size))
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported version {version}")
    if not 2 <= wbits <= 8:
        raise BitWidthError(f"weight bit width {wbits} outside 2..8")
    if not 1 <= abits <= 8:
        raise BitWidthError(f"activation bit width {abits} outside 1..8")
    if count != len(CONV_PLAN):
        raise LayerCountError(f"layer count {count}, expected {len(CONV_PLAN)}")
    records = []
    for n in range(1, count + 1):
        idx, kernel, in_ch, out_ch, ws, ins, outs, bias_flag = _LAYER_HEAD.unpack(
            r.take(_LAYER_HEAD.size)
        )
        if idx != n:
            raise WeightFileError(f"layer index {idx} out of order (expected {n})")
        if kernel not in (1, 3):
            raise WeightFileError(f"layer {n}: kernel {kernel} not 1 or 3")
        if bias_flag not in (0, 1):
            raise WeightFileError(f"layer {n}: bias flag {bias_flag}")
        wn = out_ch * in_ch * kernel * kernel
        weights = (
            np.frombuffer(r.take(wn), dtype=np.int8)
            .reshape(out_ch, in_ch, kernel, kernel)
            .astype(np.int32)
        )
        bias = None
        if bias_flag:
            bias = np.frombuffer(r.take(4 * out_ch), dtype="<i4").astype(np.int32)
        records.append(
            LayerRecord(
                index=idx,
                kernel=kernel,
                in_ch=in_ch,
                out_ch=out_ch,
                w_scale=float(ws),
                in_scale=float(ins),
                out_scale=float(outs),
                weights=weights,
                bias=bias,
            )
        )
    if r.pos != len(blob):
        raise WeightFileError(f"{len(blob) - r.pos} trailing bytes after last layer")
    return WeightFile(weight_bits=wbits, act_bits=abits, records=tuple(records))


def _restore_exact_scale(stored: float, exact: float, what: str) -> float:
    """Weight files hold 32-bit scales; the two boundary scales are defined
    as exact 1/255. Accept the 32-bit rounding of it, hand back the exact
    64-bit value."""
    if stored != float(np.float32(exact)):
        raise ValueError(f"{what}: stored scale {stored!r} is not 1/255")
    return exact


def build_model(cfg: ModelConfig, wf: WeightFile) -> Model:
    """Assemble and fully validate a model from parsed weight records."""
    if (cfg.weight_bits, cfg.act_bits) != (wf.weight_bits, wf.act_bits):
        raise ValueError(
            f"config {cfg.weight_bits}W{cfg.act_bits}A != weight file "
            f"{wf.weight_bits}W{wf.act_bits}A"
        )
    if len(wf.records) != len(CONV_PLAN):
        raise LayerCountError(f"{len(wf.records)} layer records")
    layers = []
    prev_out = None
    for i, rec in enumerate(wf.records, start=1):
        name = f"conv{i}"
        cin, cout, k = CONV_PLAN[i - 1]
        if (rec.in_ch, rec.out_ch, rec.kernel) != (cin, cout, k):
            raise ValueError(
                f"{name}: file has {rec.in_ch}->{rec.out_ch} k={rec.kernel}, "
                f"plan wants {cin}->{cout} k={k}"
            )
        wbits, abits = _layer_bits(cfg, i)
        last = i == len(CONV_PLAN)
        in_scale = rec.in_scale
        out_scale = rec.out_scale
        if i == 1:
            in_scale = _restore_exact_scale(in_scale, PIXEL_SCALE, f"{name} input")
        elif in_scale != prev_out:
            raise ValueError(f"{name}: input scale differs from conv{i-1} output")
        if last:
            out_scale = _restore_exact_scale(out_scale, PIXEL_SCALE, f"{name} output")
        try:
            weights = ConvWeights(
                weights=rec.weights,
                w_params=QuantParams(bits=wbits, signed=True, scale=rec.w_scale),
                bias=rec.bias,
            )
        except ValueError as e:
            raise ValueError(f"{name}: {e}") from e
        requant = RequantSpec(
            in_scale=in_scale,
            w_scale=rec.w_scale,
            out_scale=out_scale,
            out_bits=abits,
            activation="rescaled_hardtanh" if last else "relu",
        )
        layers.append(ConvLayer(name=name, weights=weights, requant=requant))
        if i <= len(POOL_STRIDES):
            layers.append(PoolLayer(name=f"pool{i}", stride=POOL_STRIDES[i - 1]))
        prev_out = out_scale
    model = Model(config=cfg, layers=tuple(layers))
    validate_model(model)
    return model


def build_from_file(path, cfg: ModelConfig | None = None) -> Model:
    wf = load_weights(path)
    if cfg is None:
        cfg = ModelConfig(weight_bits=wf.weight_bits, act_bits=wf.act_bits)
    return build_model(cfg, wf)


def parameter_count(model: Model) -> int:
    return sum(l.weights.weights.size for l in model.conv_layers())


def _f32(x: float) -> float:
    return float(np.float32(x))


def random_init(cfg: ModelConfig, seed: int, with_bias: bool = True) -> Model:
    """Deterministic in-range weights and scales for fixtures and benchmarks.

    Scales are chosen so mid-lattice activation values actually occur (a
    crude variance-preserving heuristic), and are rounded through 32 bits
    up front so a save/load round trip is bit-exact.
    """
    rng = np.random.default_rng(seed)
    records = []
    in_scale = _f32(PIXEL_SCALE)
    for i, (cin, cout, k) in enumerate(CONV_PLAN, start=1):
        wbits, abits = _layer_bits(cfg, i)
        last = i == len(CONV_PLAN)
        wp = QuantParams(bits=wbits, signed=True, scale=1.0)
        n = cin * k * k
        weights = rng.integers(wp.qmin, wp.qmax + 1, size=(cout, cin, k, k))
        jitter = 2.0 ** rng.uniform(-0.5, 0.5)
        w_scale = _f32(jitter / (wp.qmax * np.sqrt(n)))
        in_bits = 8 if i == 1 else _layer_bits(cfg, i - 1)[1]
        in_qmax = (1 << in_bits) - 1
        acc_real_std = np.sqrt(n) * (in_qmax * in_scale / 2.0) * (
            wp.qmax * w_scale / np.sqrt(3.0)
        )
        out_qmax = (1 << abits) - 1
        if last:
            out_scale = _f32(PIXEL_SCALE)
        else:
            out_scale = _f32(max(3.5 * acc_real_std / out_qmax, 1e-12))
        bias = None
        if with_bias:
            acc_std = np.sqrt(n) * (in_qmax / 2.0) * (wp.qmax / np.sqrt(3.0))
            b = max(1, int(acc_std / 4.0))
            bias = rng.integers(-b, b + 1, size=cout).astype(np.int32)
        records.append(
            LayerRecord(
                index=i,
                kernel=k,
                in_ch=cin,
                out_ch=cout,
                w_scale=w_scale,
                in_scale=in_scale,
                out_scale=out_scale,
                weights=weights.astype(np.int32),
                bias=bias,
            )
        )
        in_scale = out_scale
    return build_model(cfg, WeightFile(cfg.weight_bits, cfg.act_bits, tuple(records)))


# ---------------------------------------------------------------------------
# Forward passes


def _check_input_quant(model: Model, x: QuantTensor) -> None:
    size = model.config.input_size
    if x.shape != (size, size, 3):
        raise ValueError(f"input shape {x.shape}, expected {(size, size, 3)}")
    p = x.params
    if p.bits != 8 or p.signed or p.scale != PIXEL_SCALE:
        raise ValueError("input must be 8-bit unsigned at scale 1/255")


def forward(model: Model, x: QuantTensor) -> QuantTensor:
    """Integer inference: conv accumulators + requantize, pools on lattices."""
    _check_input_quant(model, x)
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            acc = conv2d_acc(x, layer.weights)
            x = requantize(acc, layer.requant)
        else:
            x = maxpool(x, layer.stride)
    return x


def forward_float(model: Model, x: FloatTensor, mode: str = "fake_quant") -> FloatTensor:
    """Reference forward passes on real-valued tensors.

    fake_quant mirrors every integer rounding decision: inputs are snapped
    back to their lattice (exact, because lattice points dequantize with
    error far below half a step), convolution runs in float64 over those
    integer values (exact, all partial sums are far below 2^53), and the
    result goes through the very same requantize step as the integer path.

    pure_float is the unquantized baseline: real weights, plain ReLU, and a
    sigmoid on the last layer instead of the hardtanh surrogate.
    """
    size = model.config.input_size
    if x.shape != (size, size, 3):
        raise ValueError(f"input shape {x.shape}, expected {(size, size, 3)}")
    if mode not in ("fake_quant", "pure_float"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = x.grid()
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ValueError("float input must lie in [0, 1]")

    if mode == "pure_float":
        for layer in model.layers:
            if isinstance(layer, PoolLayer):
                grid = maxpool_grid(grid, layer.stride, pad_value=0.0)
                continue
            w = layer.weights
            rq = layer.requant
            wreal = w.weights.astype(np.float64) * rq.w_scale
            breal = None
            if w.bias is not None:
                breal = w.bias.astype(np.float64) * (rq.in_scale * rq.w_scale)
            acc = conv2d_real(grid, wreal, breal)
            if rq.activation == "relu":
                grid = np.maximum(acc, 0.0)
            else:
                grid = sigmoid(acc)
        h, wd, c = grid.shape
        return FloatTensor(shape=(h, wd, c), data=grid.reshape(-1))

    for layer in model.layers:
        if isinstance(layer, PoolLayer):
            grid = maxpool_grid(grid, layer.stride, pad_value=0.0)
            continue
        rq = layer.requant
        # snap the real carrier back onto the input lattice (exact recovery)
        q_in = np.clip(np.rint(grid / rq.in_scale), 0, None)
        acc = conv2d_real(
            q_in,
            layer.weights.weights,
            None if layer.weights.bias is None else layer.weights.bias,
        )
        q_out = requantize(acc, rq)
        grid = q_out.grid().astype(np.float64) * rq.out_scale
    h, wd, c = grid.shape
    return FloatTensor(shape=(h, wd, c), data=grid.reshape(-1))
