"""Multi-scale incremental flow network.

The encoder is a strided ResNet-style stack without normalization layers; the
decoder mirrors it with transposed convolutions. In the multiscale modes every
decoder level owns a small head predicting a flow increment (and optionally a
log-uncertainty increment); increments are accumulated coarse to fine by
:func:`accumulate`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import nhwc_to_tensor, resize_bilinear, tensor_to_nhwc

OUTPUT_MODES = ("raw", "shift50", "multiscale", "multiscale_uncertainty")
SHIFT_CONSTANT = 50.0
# fixed affine map of [0, 1] inputs applied before the stem; centring on code
# 128 makes the mapped input an exact uint8 affine tensor (scale 4/255, zero 128)
INPUT_CENTER = 128 / 255
INPUT_GAIN = 4.0
CHECKPOINT_FORMAT = "edgeflow-float-v1"


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_channels: int = 16
    blocks_per_stage: int = 2
    uncertainty_head: bool = True
    output_mode: str = "multiscale_uncertainty"
    in_channels: int = 6
    stages: int = 3

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.stages < 1 or self.levels > self.stages:
            raise ValueError(f"levels ({self.levels}) must not exceed encoder stages ({self.stages})")
        if self.base_channels < 1 or self.blocks_per_stage < 0:
            raise ValueError("base_channels must be >= 1 and blocks_per_stage >= 0")
        if self.uncertainty_head and self.output_mode != "multiscale_uncertainty":
            object.__setattr__(self, "uncertainty_head", False)
        if self.output_mode == "multiscale_uncertainty" and not self.uncertainty_head:
            raise ValueError("multiscale_uncertainty mode requires uncertainty_head")

    @property
    def multiscale(self) -> bool:
        return self.output_mode in ("multiscale", "multiscale_uncertainty")

    @property
    def n_levels(self) -> int:
        """Number of active flow heads."""
        return self.levels if self.multiscale else 1

    @property
    def stride(self) -> int:
        return 2 ** self.stages

    def check_input(self, h: int, w: int) -> None:
        need = max(self.stride, 2 ** (self.levels - 1))
        for name, dim in (("height", h), ("width", w)):
            if dim % need:
                raise ValueError(f"input {name} {dim} is not divisible by {need}")

    def to_dict(self) -> dict:
        return asdict(self)


DESK_CONFIG = NetConfig()
# sized to land near a 2.0M-parameter budget
FULL_CONFIG = NetConfig(base_channels=42)


@dataclass
class PyramidOutput:
    """Per-level increments plus their accumulated estimates (all ``N x C x h x w``)."""

    flow_deltas: list
    unc_deltas: list | None
    flows: list
    uncertainties: list | None
    head_outputs: list = field(default_factory=list)

    @property
    def flow(self) -> torch.Tensor:
        return self.flows[-1]

    @property
    def uncertainty(self) -> torch.Tensor | None:
        return None if self.uncertainties is None else self.uncertainties[-1]


# ---------------------------------------------------------------------------
# accumulation


def accumulate(deltas: Sequence, scale_flow_values: bool = True) -> list:
    """Running estimates ``e_1 = d_1``, ``e_l = resize(e_{l-1} -> level l) + d_l``.

    Works on torch ``N x C x h x w`` tensors or channels-last numpy arrays.
    """
    if len(deltas) == 0:
        raise ValueError("need at least one level")
    out = [deltas[0]]
    for lvl in range(1, len(deltas)):
        d = deltas[lvl]
        prev = out[-1]
        if isinstance(d, torch.Tensor):
            h, w = d.shape[-2:]
            ph, pw = prev.shape[-2:]
        else:
            h, w = d.shape[-3:-1]
            ph, pw = prev.shape[-3:-1]
        if h < ph or w < pw:
            raise ValueError(
                f"level {lvl + 1} dims {h}x{w} are smaller than level {lvl} dims {ph}x{pw}"
            )
        out.append(resize_bilinear(prev, h, w, scale_flow_values=scale_flow_values) + d)
    return out


def accumulate_pyramid(flow_deltas: Sequence, unc_deltas: Sequence | None = None):
    """Full-resolution flow and uncertainty from coarse-to-fine increments."""
    flows = accumulate(flow_deltas, scale_flow_values=True)
    if unc_deltas is None:
        return flows[-1], None
    if len(unc_deltas) != len(flow_deltas):
        raise ValueError("flow and uncertainty pyramids differ in depth")
    return flows[-1], accumulate(unc_deltas, scale_flow_values=False)[-1]


# ---------------------------------------------------------------------------
# layers


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class Head(nn.Module):
    def __init__(self, ch: int, with_uncertainty: bool):
        super().__init__()
        self.flow = nn.Conv2d(ch, 2, 1)
        self.unc = nn.Conv2d(ch, 1, 1) if with_uncertainty else None


class EdgeFlowNet(nn.Module):
    def __init__(self, config: NetConfig = DESK_CONFIG):
        super().__init__()
        self.config = config
        c = config.base_channels
        widths = [c * 2**s for s in range(config.stages)]

        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, stride=2, padding=1)
        self.down = nn.ModuleList(
            [nn.Identity()]
            + [nn.Conv2d(widths[s - 1], widths[s], 3, stride=2, padding=1) for s in range(1, config.stages)]
        )
        self.enc_blocks = nn.ModuleList(
            [nn.Sequential(*[ResBlock(wd) for _ in range(config.blocks_per_stage)]) for wd in widths]
        )
        # decoder: up[s] maps stage s+1 features onto stage s resolution;
        # the last entry brings stage 0 (half res) to full resolution
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(widths[s + 1], widths[s], 4, stride=2, padding=1) for s in range(config.stages - 1)]
        )
        self.dec_blocks = nn.ModuleList([ResBlock(wd) for wd in widths[:-1]])
        self.up_full = nn.ConvTranspose2d(widths[0], widths[0], 4, stride=2, padding=1)
        self.refine_full = nn.Conv2d(widths[0], widths[0], 3, padding=1)

        # decoder resolutions fine to coarse: full, 1/2, 1/4, ...; heads coarse to fine
        head_widths = [widths[0]] + widths[: config.stages - 1]
        n = config.n_levels
        self.heads = nn.ModuleList(
            [Head(head_widths[n - 1 - i], config.uncertainty_head) for i in range(n)]
        )

    def decoder_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Decoder feature maps ordered fine to coarse: full, 1/2, 1/4, ..."""
        feats = []
        h = F.relu(self.stem((x - INPUT_CENTER) * INPUT_GAIN))
        for s in range(self.config.stages):
            if s > 0:
                h = F.relu(self.down[s](h))
            h = self.enc_blocks[s](h)
            feats.append(h)
        dec = [None] * self.config.stages
        d = feats[-1]
        for s in range(self.config.stages - 2, -1, -1):
            d = F.relu(self.up[s](d) + feats[s])
            d = self.dec_blocks[s](d)
            dec[s] = d
        full = F.relu(self.up_full(d))
        full = F.relu(self.refine_full(full))
        return [full] + dec[: self.config.stages - 1]

    def forward(self, x: torch.Tensor) -> PyramidOutput:
        cfg = self.config
        if x.ndim != 4:
            raise ValueError(f"input must be N x C x H x W, got {tuple(x.shape)}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"input channels {x.shape[1]} != {cfg.in_channels}")
        cfg.check_input(x.shape[2], x.shape[3])
        feats = self.decoder_features(x)
        n = cfg.n_levels
        level_feats = [feats[n - 1 - i] for i in range(n)]
        head_out, flow_d, unc_d = [], [], []
        for head, f in zip(self.heads, level_feats):
            out = head.flow(f)
            if cfg.output_mode == "shift50":
                out = out + SHIFT_CONSTANT
            head_out.append(out)
            flow_d.append(out - SHIFT_CONSTANT if cfg.output_mode == "shift50" else out)
            if head.unc is not None:
                unc_d.append(head.unc(f))
        return assemble_output(flow_d, unc_d if cfg.uncertainty_head else None, head_out)


def assemble_output(flow_deltas, unc_deltas, head_outputs=()) -> PyramidOutput:
    flows = accumulate(flow_deltas, scale_flow_values=True)
    uncs = accumulate(unc_deltas, scale_flow_values=False) if unc_deltas else None
    return PyramidOutput(list(flow_deltas), list(unc_deltas) if unc_deltas else None, flows, uncs, list(head_outputs))


# ---------------------------------------------------------------------------
# weights


def _fan_in(p: torch.Tensor, transposed: bool) -> int:
    # Conv2d: out x in x kh x kw; ConvTranspose2d: in x out x kh x kw
    if transposed:
        # each output pixel of a stride-2 transposed conv sees ~ in * (k/2)^2 taps
        return p.shape[0] * max(1, (p.shape[2] * p.shape[3]) // 4)
    return p.shape[1] * p.shape[2] * p.shape[3]


def init_weights(config: NetConfig = DESK_CONFIG, seed: int = 0) -> EdgeFlowNet:
    """Build a network with deterministic fan-in-scaled initialization.

    Every head starts at zero, so a fresh network predicts zero flow and zero
    log-uncertainty. A random first head would inject output noise that an L1
    loss removes by shrinking the whole body, after which training stalls.
    """
    model = EdgeFlowNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    zero_heads = {id(m) for h in model.heads for m in (h.flow, h.unc) if m is not None}
    with torch.no_grad():
        for mod in model.modules():
            if not isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                continue
            mod.bias.zero_()
            if id(mod) in zero_heads:
                mod.weight.zero_()
                continue
            std = math.sqrt(2.0 / _fan_in(mod.weight, isinstance(mod, nn.ConvTranspose2d)))
            if isinstance(mod, nn.Conv2d) and mod.kernel_size == (1, 1):
                std *= 0.1
            mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
        for block in model.modules():
            if isinstance(block, ResBlock):
                block.conv2.weight.mul_(0.5)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: EdgeFlowNet, path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = json.dumps({"format": CHECKPOINT_FORMAT, "config": model.config.to_dict()})
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(meta), **arrays)


def load_checkpoint(path) -> EdgeFlowNet:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model = EdgeFlowNet(NetConfig(**meta["config"]))
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# inference helpers


def forward(pair: np.ndarray, model: EdgeFlowNet) -> PyramidOutput:
    """Run the float network on a channels-last pair (``H x W x 2C`` or batched).

    uint8 input is scaled to [0, 1]; float input is taken as already scaled.
    """
    arr = np.asarray(pair)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    model.eval()
    with torch.no_grad():
        return model(nhwc_to_tensor(arr))


def predict_flow(pair: np.ndarray, model: EdgeFlowNet) -> np.ndarray:
    """Batched channels-last flow prediction; shape follows the input's batch-ness."""
    out = tensor_to_nhwc(forward(pair, model).flow)
    return out[0] if np.asarray(pair).ndim == 3 else out


# ---------------------------------------------------------------------------
# cost model


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, out_h: int, out_w: int) -> int:
    """Flops of a dense convolution, one multiply-accumulate counted as 2."""
    return 2 * c_in * c_out * kh * kw * out_h * out_w


def count_flops(model: nn.Module, input_shape: Sequence[int]) -> int:
    """Analytic conv/transposed-conv flop count for one forward pass on ``input_shape`` (NCHW)."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        n = out.shape[0]
        kh, kw = mod.kernel_size
        if isinstance(mod, nn.ConvTranspose2d):
            # every input pixel scatters c_out x kh x kw products
            _, _, ih, iw = inp[0].shape
            total += n * conv_flops(mod.in_channels // mod.groups, mod.out_channels, kh, kw, ih, iw)
        else:
            total += n * conv_flops(mod.in_channels // mod.groups, mod.out_channels, kh, kw, out.shape[2], out.shape[3])

    hooks = [m.register_forward_hook(conv_hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    try:
        with torch.no_grad():
            model(torch.zeros(tuple(input_shape)))
    finally:
        for h in hooks:
            h.remove()
    return total


def flops_and_params(config: NetConfig = DESK_CONFIG, height: int = 480, width: int = 352) -> tuple[int, int]:
    model = EdgeFlowNet(config)
    return count_flops(model, (1, config.in_channels, height, width)), parameter_count(model)
