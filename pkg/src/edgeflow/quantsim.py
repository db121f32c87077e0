"""8-bit unsigned inference emulation with per-tensor affine quantization.

Activations use asymmetric ``(scale, zero_point)`` pairs fitted to the
min/max seen during calibration; weights use a symmetric grid centred on code
128. Convolutions run on integer codes with int32-range accumulators (checked,
never wrapped) and are requantized to 8 bits after every layer. Resizing and
pyramid accumulation stay in real arithmetic.

Integer convolutions are evaluated as float64 tensor ops over integer values:
every partial sum is an integer below 2**31, hence exact in float64, so the
results do not depend on summation order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import nhwc_to_tensor, tensor_to_nhwc
from .net import (INPUT_CENTER, INPUT_GAIN, SHIFT_CONSTANT, EdgeFlowNet, NetConfig, PyramidOutput,
                  assemble_output)

log = logging.getLogger(__name__)

QMIN, QMAX = 0, 255
WEIGHT_ZERO = 128
WEIGHT_LEVELS = 127
ACC_LIMIT = 2**31 - 1
DEGENERATE_DELTA = 1e-6
QUANT_FORMAT = "edgeflow-uint8-v1"
# the centred network input is exactly code * 4/255 - 128 * 4/255
INPUT_QP_SCALE = INPUT_GAIN / 255.0


def round_half_away(x):
    """Round to nearest, ties away from zero (numpy arrays, scalars or tensors)."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside [{QMIN}, {QMAX}]")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        """Asymmetric parameters covering ``[lo, hi]`` (always including 0)."""
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        if hi - lo <= 0:
            raise ValueError("degenerate range; widen it first")
        scale = (hi - lo) / (QMAX - QMIN)
        zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
        return cls(scale, zp)

    @classmethod
    def symmetric(cls, max_abs: float) -> "QuantParams":
        return cls(float(max_abs) / WEIGHT_LEVELS, WEIGHT_ZERO)

    def representable(self) -> tuple[float, float]:
        return self.scale * (QMIN - self.zero_point), self.scale * (QMAX - self.zero_point)


def quantize(x, qp: QuantParams):
    """``clamp(round(x / s) + z, 0, 255)`` as uint8."""
    if isinstance(x, torch.Tensor):
        return torch.clamp(round_half_away(x.double() / qp.scale) + qp.zero_point, QMIN, QMAX).to(torch.uint8)
    codes = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point, QMIN, QMAX)
    return codes.astype(np.uint8)


def dequantize(code, qp: QuantParams):
    if isinstance(code, torch.Tensor):
        return qp.scale * (code.double() - qp.zero_point)
    return qp.scale * (np.asarray(code, dtype=np.float64) - qp.zero_point)


# ---------------------------------------------------------------------------
# graph walk shared by calibration and integer inference


def run_graph(model: EdgeFlowNet, x: torch.Tensor, ex):
    """Walk the network's layer graph with executor ``ex``.

    Mirrors :meth:`EdgeFlowNet.forward`; the executor decides whether
    tensors are real-valued or quantized.
    """
    cfg = model.config
    h = ex.conv("stem", model.stem, ex.input(x), relu=True)
    feats = []
    for s in range(cfg.stages):
        if s > 0:
            h = ex.conv(f"down.{s}", model.down[s], h, relu=True)
        for b, blk in enumerate(model.enc_blocks[s]):
            h = _res_block(ex, f"enc_blocks.{s}.{b}", blk, h)
        feats.append(h)
    d = feats[-1]
    dec = [None] * cfg.stages
    for s in range(cfg.stages - 2, -1, -1):
        u = ex.conv(f"up.{s}", model.up[s], d, relu=False)
        d = ex.add(f"up.{s}.add", u, feats[s], relu=True)
        d = _res_block(ex, f"dec_blocks.{s}", model.dec_blocks[s], d)
        dec[s] = d
    full = ex.conv("up_full", model.up_full, d, relu=True)
    full = ex.conv("refine_full", model.refine_full, full, relu=True)
    by_res = [full] + dec[: cfg.stages - 1]
    n = cfg.n_levels
    shift = SHIFT_CONSTANT if cfg.output_mode == "shift50" else 0.0
    heads, uncs = [], []
    for i, head in enumerate(model.heads):
        f = by_res[n - 1 - i]
        heads.append(ex.output(ex.conv(f"heads.{i}.flow", head.flow, f, relu=False, bias_shift=shift)))
        if head.unc is not None:
            uncs.append(ex.output(ex.conv(f"heads.{i}.unc", head.unc, f, relu=False)))
    flow_d = [o - shift for o in heads] if shift else heads
    return assemble_output(flow_d, uncs or None, heads)


def _res_block(ex, name, blk, x):
    y = ex.conv(f"{name}.conv1", blk.conv1, x, relu=True)
    y = ex.conv(f"{name}.conv2", blk.conv2, y, relu=False)
    return ex.add(f"{name}.add", x, y, relu=True)


def _conv_op(mod, x, weight, bias):
    if isinstance(mod, nn.ConvTranspose2d):
        return F.conv_transpose2d(x, weight, bias, mod.stride, mod.padding, mod.output_padding, mod.groups, mod.dilation)
    return F.conv2d(x, weight, bias, mod.stride, mod.padding, mod.dilation, mod.groups)


@dataclass
class _Named:
    value: torch.Tensor
    name: str


class _CalibrationExecutor:
    """Real-valued walk that tracks per-tensor min/max and layer wiring."""

    def __init__(self):
        self.ranges: dict[str, list[float]] = {}
        self.sources: dict[str, str] = {}

    def _record(self, name, t):
        lo, hi = float(t.min()), float(t.max())
        r = self.ranges.setdefault(name, [lo, hi])
        r[0], r[1] = min(r[0], lo), max(r[1], hi)
        return _Named(t, name)

    def input(self, x):
        return _Named((x - INPUT_CENTER) * INPUT_GAIN, "input")

    def conv(self, name, mod, x, relu, bias_shift=0.0):
        self.sources[name] = x.name
        y = _conv_op(mod, x.value, mod.weight, mod.bias + bias_shift)
        return self._record(name, F.relu(y) if relu else y)

    def add(self, name, a, b, relu):
        self.sources[name] = f"{a.name}+{b.name}"
        y = a.value + b.value
        return self._record(name, F.relu(y) if relu else y)

    def output(self, t):
        return t.value


@dataclass
class QuantLayer:
    weight_codes: np.ndarray  # uint8
    weight_qp: QuantParams
    bias_codes: np.ndarray  # int32, scale = input scale * weight scale
    input_qp: QuantParams
    output_qp: QuantParams
    multiplier: float  # input scale * weight scale / output scale


@dataclass
class QuantizedWeights:
    config: NetConfig
    layers: dict[str, QuantLayer]
    activations: dict[str, QuantParams]
    warnings: list[str] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(l.weight_codes.size + l.bias_codes.size for l in self.layers.values())


INPUT_QP = QuantParams(INPUT_QP_SCALE, 128)


def _conv_modules(model: EdgeFlowNet) -> dict[str, nn.Module]:
    mods = {"stem": model.stem, "up_full": model.up_full, "refine_full": model.refine_full}
    for s in range(1, model.config.stages):
        mods[f"down.{s}"] = model.down[s]
    for s, seq in enumerate(model.enc_blocks):
        for b, blk in enumerate(seq):
            mods[f"enc_blocks.{s}.{b}.conv1"] = blk.conv1
            mods[f"enc_blocks.{s}.{b}.conv2"] = blk.conv2
    for s in range(model.config.stages - 1):
        mods[f"up.{s}"] = model.up[s]
        mods[f"dec_blocks.{s}.conv1"] = model.dec_blocks[s].conv1
        mods[f"dec_blocks.{s}.conv2"] = model.dec_blocks[s].conv2
    for i, head in enumerate(model.heads):
        mods[f"heads.{i}.flow"] = head.flow
        if head.unc is not None:
            mods[f"heads.{i}.unc"] = head.unc
    return mods


def _as_input_tensor(pairs) -> torch.Tensor:
    arr = np.asarray(pairs)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return nhwc_to_tensor(arr, dtype=torch.float64)


def calibrate(model: EdgeFlowNet, calibration_pairs, batch_size: int = 8) -> QuantizedWeights:
    """Fit activation ranges over the calibration pairs and quantize all weights.

    ``calibration_pairs`` is a channels-last batch (uint8 or [0, 1] floats).
    Degenerate ranges (min == max) are widened by ``1e-6`` and noted in
    ``warnings``.
    """
    pairs = np.asarray(calibration_pairs)
    if pairs.ndim == 3:
        pairs = pairs[None]
    if len(pairs) < 1:
        raise ValueError("calibration needs at least one sample")
    model = model.double().eval()
    ex = _CalibrationExecutor()
    try:
        with torch.no_grad():
            for i in range(0, len(pairs), batch_size):
                run_graph(model, _as_input_tensor(pairs[i:i + batch_size]), ex)
        warnings = []
        acts = {"input": INPUT_QP}
        for name, (lo, hi) in ex.ranges.items():
            lo, hi = min(lo, 0.0), max(hi, 0.0)
            if hi - lo <= 0:
                warnings.append(f"activation {name}: degenerate range [{lo}, {hi}] widened by {DEGENERATE_DELTA}")
                hi = lo + DEGENERATE_DELTA
            acts[name] = QuantParams.from_range(lo, hi)
        shift = SHIFT_CONSTANT if model.config.output_mode == "shift50" else 0.0
        layers = {}
        for name, mod in _conv_modules(model).items():
            w = mod.weight.detach().double().numpy()
            in_qp = acts[ex.sources[name]]
            out_qp = acts[name]
            bias = mod.bias.detach().double().numpy() + (shift if name.endswith(".flow") else 0.0)
            max_abs = float(np.abs(w).max())
            if max_abs == 0:
                # zero codes are exact at any scale; widen until the bias fits half the accumulator
                need = float(np.abs(bias).max(initial=0)) * WEIGHT_LEVELS / (in_qp.scale * (ACC_LIMIT // 2))
                max_abs = max(DEGENERATE_DELTA, need)
                warnings.append(f"weight {name}: all zero, range widened to {max_abs:.3g}")
            wqp = QuantParams.symmetric(max_abs)
            acc_scale = in_qp.scale * wqp.scale
            bias_codes = round_half_away(bias / acc_scale)
            if np.abs(bias_codes).max(initial=0) > ACC_LIMIT:
                raise OverflowError(f"bias of {name} does not fit a 32-bit accumulator")
            layers[name] = QuantLayer(quantize(w, wqp), wqp, bias_codes.astype(np.int32), in_qp, out_qp,
                                      acc_scale / out_qp.scale)
    finally:
        model.float()
    for w in warnings:
        log.warning(w)
    return QuantizedWeights(model.config, layers, acts, warnings)


# ---------------------------------------------------------------------------
# integer inference


@dataclass
class _Q:
    codes: torch.Tensor  # float64 holding integers in [0, 255]
    qp: QuantParams


class _IntegerExecutor:
    def __init__(self, model: EdgeFlowNet, qw: QuantizedWeights):
        self.model = model
        self.qw = qw

    def input(self, x):
        codes = torch.clamp(round_half_away(x * 255.0), QMIN, QMAX)
        return _Q(codes, INPUT_QP)

    def conv(self, name, mod, x: _Q, relu, bias_shift=0.0):
        layer = self.qw.layers[name]
        if x.qp != layer.input_qp:
            raise ValueError(f"{name}: input quantization does not match calibration")
        return _Q(integer_conv(x.codes, mod, layer, relu, name), layer.output_qp)

    def add(self, name, a: _Q, b: _Q, relu):
        oqp = self.qw.activations[name]
        real = (a.qp.scale / oqp.scale) * (a.codes - a.qp.zero_point) + (b.qp.scale / oqp.scale) * (b.codes - b.qp.zero_point)
        return _Q(requantize(real, oqp, relu), oqp)

    def output(self, q: _Q):
        return dequantize(q.codes, q.qp)


def requantize(scaled, qp: QuantParams, relu: bool = False):
    """Round a value already expressed in output-scale units and clamp to 8 bits."""
    codes = round_half_away(scaled) + qp.zero_point
    lo = qp.zero_point if relu else QMIN
    return torch.clamp(codes, lo, QMAX)


def integer_conv(codes: torch.Tensor, mod: nn.Module, layer: QuantLayer, relu: bool = False, name: str = "conv"):
    """One quantized (transposed) convolution: 8-bit codes in, 8-bit codes out.

    The accumulator holds ``sum (x - z_x)(w - z_w) + bias``; any magnitude past
    the int32 limit raises instead of wrapping.
    """
    w = torch.from_numpy(layer.weight_codes.astype(np.float64) - layer.weight_qp.zero_point)
    b = torch.from_numpy(layer.bias_codes.astype(np.float64))
    acc = _conv_op(mod, codes - layer.input_qp.zero_point, w, b)
    peak = float(acc.abs().max())
    if peak > ACC_LIMIT:
        raise OverflowError(f"{name}: accumulator magnitude {peak:.0f} exceeds int32")
    return requantize(acc * layer.multiplier, layer.output_qp, relu)

    def output(self, q: _Q):
        return dequantize(q.codes, q.qp)


def quant_forward(pairs, model: EdgeFlowNet, qw: QuantizedWeights) -> PyramidOutput:
    """Integer-domain forward; outputs are dequantized float64 tensors (NCHW)."""
    x = _as_input_tensor(pairs)
    model.config.check_input(x.shape[2], x.shape[3])
    with torch.no_grad():
        return run_graph(model, x, _IntegerExecutor(model, qw))


def quant_predict(pairs, model: EdgeFlowNet, qw: QuantizedWeights) -> np.ndarray:
    out = tensor_to_nhwc(quant_forward(pairs, model, qw).flow)
    return out[0] if np.asarray(pairs).ndim == 3 else out


def float_graph_forward(pairs, model: EdgeFlowNet) -> PyramidOutput:
    """Real-valued walk of the same graph (float64); matches ``model.forward``."""
    model = model.double()
    try:
        with torch.no_grad():
            return run_graph(model, _as_input_tensor(pairs), _CalibrationExecutor())
    finally:
        model.float()


def activation_coverage(model: EdgeFlowNet, qw: QuantizedWeights, pairs, batch_size: int = 8) -> float:
    """Fraction of activation values that quantize without saturating."""
    ex = _CalibrationExecutor()
    inside = total = 0
    orig_record = ex._record

    def record(name, t):
        nonlocal inside, total
        qp = qw.activations[name]
        lo, hi = qp.representable()
        # within half a step of the grid ends: rounding error only, no saturation
        half = qp.scale / 2 + 1e-12
        inside += int(((t >= lo - half) & (t <= hi + half)).sum())
        total += t.numel()
        return orig_record(name, t)

    ex._record = record
    model = model.double()
    try:
        with torch.no_grad():
            arr = np.asarray(pairs)
            for i in range(0, len(arr), batch_size):
                run_graph(model, _as_input_tensor(arr[i:i + batch_size]), ex)
    finally:
        model.float()
    return inside / max(total, 1)


# ---------------------------------------------------------------------------
# checkpoint


def _qp_list(qp: QuantParams) -> list:
    return [qp.scale, qp.zero_point]


def save_quantized(qw: QuantizedWeights, path) -> None:
    """Single ``.npz``: uint8 weights, int32 biases, per-tensor (s, z) and a JSON header."""
    arrays = {}
    layers_meta = {}
    for name, l in qw.layers.items():
        arrays[f"{name}/w"] = l.weight_codes
        arrays[f"{name}/b"] = l.bias_codes
        layers_meta[name] = {"w": _qp_list(l.weight_qp), "in": _qp_list(l.input_qp),
                             "out": _qp_list(l.output_qp), "m": l.multiplier}
    meta = {
        "format": QUANT_FORMAT,
        "config": qw.config.to_dict(),
        "layers": layers_meta,
        "activations": {k: _qp_list(v) for k, v in qw.activations.items()},
        "warnings": qw.warnings,
    }
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)


def load_quantized(path) -> QuantizedWeights:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != QUANT_FORMAT:
            raise ValueError(f"{path}: unsupported quantized format {meta.get('format')!r}")
        layers = {}
        for name, m in meta["layers"].items():
            layers[name] = QuantLayer(data[f"{name}/w"].copy(), QuantParams(*m["w"]), data[f"{name}/b"].copy(),
                                      QuantParams(*m["in"]), QuantParams(*m["out"]), float(m["m"]))
    acts = {k: QuantParams(*v) for k, v in meta["activations"].items()}
    return QuantizedWeights(NetConfig(**meta["config"]), layers, acts, list(meta["warnings"]))


class QuantizedModel:
    """Callable wrapper: channels-last chunk batch in, channels-last flow out."""

    def __init__(self, model: EdgeFlowNet, qw: QuantizedWeights):
        self.model = model
        self.qw = qw

    def __call__(self, pairs) -> np.ndarray:
        return quant_predict(pairs, self.model, self.qw)
