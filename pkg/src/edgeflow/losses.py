"""Multi-scale flow losses with learned per-pixel uncertainty, plus ablation variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import resize_bilinear
from .net import SHIFT_CONSTANT, PyramidOutput

LOSS_MODES = ("l1", "l1_shift50", "multiscale", "multiscale_uncertainty")

# network output mode that each loss mode trains
NET_MODE_FOR_LOSS = {
    "l1": "raw",
    "l1_shift50": "shift50",
    "multiscale": "multiscale",
    "multiscale_uncertainty": "multiscale_uncertainty",
}


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-3
    mode: str = "multiscale_uncertainty"
    level_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def weight(self, level: int) -> float:
        return 1.0 if self.level_weights is None else float(self.level_weights[level])


def _check_finite(*tensors):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise FloatingPointError("loss input contains NaN or Inf")


def l1_norm_map(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel L1 norm of the flow residual, ``N x H x W``."""
    return (pred - target).abs().sum(dim=1)


def level_targets(gt: torch.Tensor, shapes: Sequence[tuple[int, int]]) -> list[torch.Tensor]:
    return [resize_bilinear(gt, h, w, scale_flow_values=True) for h, w in shapes]


def multiscale_uncertainty_loss(pyr: PyramidOutput, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Sum over levels of the mean of ``|p_l - R(q)|_1 / softplus(U_l + eps) + softplus(U_l)``.

    ``p_l`` and ``U_l`` are the accumulated flow and log-uncertainty at level
    ``l``; ``gt`` is the full-resolution ground truth (``N x 2 x H x W``).
    """
    if pyr.uncertainties is None:
        raise ValueError("pyramid carries no uncertainty; use mode 'multiscale'")
    _check_finite(gt, *pyr.flows, *pyr.uncertainties)
    targets = level_targets(gt, [f.shape[-2:] for f in pyr.flows])
    total = gt.new_zeros(())
    for lvl, (flow, unc, tgt) in enumerate(zip(pyr.flows, pyr.uncertainties, targets)):
        u = unc[:, 0]
        per_px = l1_norm_map(flow, tgt) / F.softplus(u + cfg.epsilon) + F.softplus(u)
        total = total + cfg.weight(lvl) * per_px.mean()
    return total


def multiscale_l1_loss(pyr: PyramidOutput, gt: torch.Tensor, cfg: LossConfig = LossConfig(mode="multiscale")) -> torch.Tensor:
    _check_finite(gt, *pyr.flows)
    targets = level_targets(gt, [f.shape[-2:] for f in pyr.flows])
    total = gt.new_zeros(())
    for lvl, (flow, tgt) in enumerate(zip(pyr.flows, targets)):
        total = total + cfg.weight(lvl) * l1_norm_map(flow, tgt).mean()
    return total


def loss_variant(prediction, gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Loss for any ablation mode.

    ``prediction`` is a :class:`PyramidOutput` or, for the single-head modes,
    the direct head output tensor. In ``l1_shift50`` the direct output is
    compared against ``gt + 50``.
    """
    if cfg.mode in ("l1", "l1_shift50"):
        if isinstance(prediction, PyramidOutput):
            if len(prediction.flows) != 1:
                raise ValueError(f"mode {cfg.mode} expects a single full-resolution head, got {len(prediction.flows)} levels")
            pred = prediction.head_outputs[0] if prediction.head_outputs else prediction.flows[0]
            if cfg.mode == "l1_shift50" and not prediction.head_outputs:
                pred = pred + SHIFT_CONSTANT
        else:
            pred = prediction
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(gt.shape)}")
        _check_finite(pred, gt)
        target = gt + SHIFT_CONSTANT if cfg.mode == "l1_shift50" else gt
        return l1_norm_map(pred, target).mean()
    if not isinstance(prediction, PyramidOutput):
        raise ValueError(f"mode {cfg.mode} needs a PyramidOutput")
    if cfg.mode == "multiscale":
        return multiscale_l1_loss(prediction, gt, cfg)
    return multiscale_uncertainty_loss(prediction, gt, cfg)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list  # (parameter name, flat index) pairs at non-differentiable points

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def grad_check(fn: Callable[[dict], torch.Tensor], params: dict, step: float = 1e-4,
               kink_tol: float = 1e-3) -> GradCheckResult:
    """Compare autograd gradients of ``fn(params)`` against central differences.

    ``params`` maps names to float64 tensors. A coordinate whose forward and
    backward one-sided slopes disagree by more than ``kink_tol`` (relative)
    sits on a kink, e.g. a zero L1 residual; it is reported in ``excluded``
    rather than compared.
    """
    leaves = {k: v.detach().clone().to(torch.float64).requires_grad_(True) for k, v in params.items()}
    value = fn(leaves)
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    f0 = value.item()
    worst, checked, excluded = 0.0, 0, []
    with torch.no_grad():
        for (name, leaf), g in zip(leaves.items(), grads):
            g = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                fp = fn(leaves).item()
                flat[i] = orig - step
                fm = fn(leaves).item()
                flat[i] = orig
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                scale = max(abs(fwd), abs(bwd), 1e-8)
                # smooth functions: one-sided slopes differ by O(step * f'')
                if abs(fwd - bwd) / scale > kink_tol and abs(fwd - bwd) > 10 * step * (1 + abs(f0)):
                    excluded.append((name, i))
                    continue
                num = (fp - fm) / (2 * step)
                ana = float(g.view(-1)[i])
                denom = max(abs(num), abs(ana), 1e-8)
                worst = max(worst, abs(num - ana) / denom)
                checked += 1
    return GradCheckResult(worst, checked, excluded)
