"""End-to-end studies shared by the CLI and the acceptance suite.

Desk training with an on-disk cache, overlap sweeps, the seam-centred ball
benchmark and the float/quantized evaluation pairs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bench import throughput
from .chunker import chunked_infer, plan_chunks
from .losses import NET_MODE_FOR_LOSS, LossConfig
from .metrics import default_threshold, epe, flow_magnitude_mask, iou
from .net import DESK_CONFIG, EdgeFlowNet, NetConfig, init_weights, load_checkpoint, predict_flow, save_checkpoint
from .synthgen import SceneDistribution, gen_ball_scene, synth_arrays
from .training import TrainConfig, desk_train_config, train

log = logging.getLogger(__name__)

ModelFn = Callable[[np.ndarray], np.ndarray]

DESK_TRAIN_SAMPLES = 2000
DESK_VAL_SAMPLES = 64
TRAIN_MASTER_SEED = 1
# bump when initialization or the training loop changes so cached models are rebuilt
DESK_RECIPE_VERSION = 2
VAL_MASTER_SEED = 2
# 480 x 352 frames for chunking studies; objects scaled with the canvas
WIDE_DIST = SceneDistribution(height=480, width=352, min_size=16.0, max_size=80.0, max_objects=4)


def float_fn(model: EdgeFlowNet) -> ModelFn:
    return lambda pairs: predict_flow(pairs, model)


def quant_fn(model: EdgeFlowNet, qweights) -> ModelFn:
    from .quantsim import QuantizedModel

    return QuantizedModel(model, qweights)


def batched_predict(fn: ModelFn, pairs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return np.concatenate([fn(pairs[i:i + batch_size]) for i in range(0, len(pairs), batch_size)])


def mean_epe(fn: ModelFn, pairs: np.ndarray, flows: np.ndarray, batch_size: int = 8) -> float:
    pred = batched_predict(fn, pairs, batch_size)
    return float(np.mean([epe(p, g) for p, g in zip(pred, flows)]))


def zero_flow_epe(flows: np.ndarray) -> float:
    return float(np.hypot(flows[..., 0], flows[..., 1]).mean())


# ---------------------------------------------------------------------------
# desk training with cache


def _cache_key(**parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_datasets(train_count: int = DESK_TRAIN_SAMPLES, val_count: int = DESK_VAL_SAMPLES,
                  dist: SceneDistribution | None = None, cache_dir=None):
    """``((train_pairs, train_flows), (val_pairs, val_flows))``, cached as npz when asked."""
    dist = dist or SceneDistribution()
    path = None
    if cache_dir is not None:
        key = _cache_key(n=train_count, v=val_count, dist=dist.to_dict(), s=(TRAIN_MASTER_SEED, VAL_MASTER_SEED))
        path = Path(cache_dir) / f"desk_data_{key}.npz"
        if path.exists():
            with np.load(path) as d:
                return (d["tp"], d["tf"]), (d["vp"], d["vf"])
    tr = synth_arrays(train_count, dist, TRAIN_MASTER_SEED)
    va = synth_arrays(val_count, dist, VAL_MASTER_SEED)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, tp=tr[0], tf=tr[1], vp=va[0], vf=va[1])
    return tr, va


def train_desk(loss_mode: str = "multiscale_uncertainty", cfg: TrainConfig | None = None,
               net: NetConfig = DESK_CONFIG, train_count: int = DESK_TRAIN_SAMPLES, cache_dir=None,
               data=None) -> tuple[EdgeFlowNet, list[dict]]:
    """Train (or load from ``cache_dir``) a desk model for one loss mode."""
    from dataclasses import replace

    cfg = cfg or desk_train_config(loss_mode)
    net = replace(net, output_mode=NET_MODE_FOR_LOSS[loss_mode])
    ckpt = hist = None
    if cache_dir is not None:
        key = _cache_key(mode=loss_mode, cfg=asdict(cfg), net=net.to_dict(), n=train_count, v=DESK_RECIPE_VERSION)
        ckpt = Path(cache_dir) / f"desk_{loss_mode}_{key}.npz"
        hist = ckpt.with_suffix(".history.jsonl")
        if ckpt.exists() and hist.exists():
            history = [json.loads(line) for line in hist.read_text().splitlines() if line.strip()]
            return load_checkpoint(ckpt), history
    tr, va = data if data is not None else desk_datasets(train_count, cache_dir=cache_dir)
    model = init_weights(net, cfg.seed)
    if hist is not None and hist.exists():
        hist.unlink()
    model, history = train(model, tr, cfg, LossConfig(mode=loss_mode), va, history_path=hist)
    if ckpt is not None:
        save_checkpoint(model, ckpt)
    return model, history


# ---------------------------------------------------------------------------
# chunking studies


def overlap_sweep(fn: ModelFn, pairs: np.ndarray, flows: np.ndarray, m: int = 2, n: int = 2,
                  overlaps: Sequence[int] = (0, 16, 32, 64), reps: int = 5, warmup: int = 1,
                  check=None, seed: int = 0) -> list[dict]:
    """EPE and host FPS for each overlap; one row per overlap."""
    h, w = pairs.shape[1:3]
    rows = []
    for ov in overlaps:
        plan = plan_chunks(h, w, m, n, ov)
        errs = [epe(chunked_infer(p, plan, fn)[0], g) for p, g in zip(pairs, flows)]
        ch, cw = plan.chunk_shape
        bench = throughput(fn, (plan.count, ch, cw, pairs.shape[3]), warmup, reps, frames_per_call=1,
                           seed=seed, check=check, label=f"overlap {ov}")
        rows.append({**plan.describe(), "epe": float(np.mean(errs)), "fps": bench.fps, "fps_iqr": bench.iqr})
    return rows


def ball_benchmark(fn: ModelFn, radii: Sequence[float], overlaps: Sequence[int] = (0, 64), m: int = 2, n: int = 2,
                   height: int = 480, width: int = 352, speed: float = 4.0, seed: int = 0) -> list[dict]:
    """IoU of the thresholded predicted-flow mask for a ball straddling the chunk seams.

    One row per radius with ``iou_full`` and ``iou_ov{k}`` columns.
    """
    plans = {ov: plan_chunks(height, width, m, n, ov) for ov in overlaps}
    rows = []
    for r in radii:
        pair, gt, mask = gen_ball_scene(r, True, speed, height, width, seed)
        pair8 = np.round(np.clip(pair, 0, 1) * 255).astype(np.uint8)
        thr = default_threshold(gt, mask, speed)
        row = {"radius": float(r), "threshold": thr}
        row["iou_full"] = iou(flow_magnitude_mask(fn(pair8[None])[0], thr), mask)
        for ov, plan in plans.items():
            pred, _ = chunked_infer(pair8, plan, fn)
            row[f"iou_ov{ov}"] = iou(flow_magnitude_mask(pred, thr), mask)
        rows.append(row)
    return rows


def wide_val_set(count: int = 16, seed: int = VAL_MASTER_SEED):
    return synth_arrays(count, WIDE_DIST, seed)


def format_rows(rows: Sequence[dict], columns: Sequence[str] | None = None, floatfmt: str = ".4f") -> str:
    """Tab-delimited table with a header line."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    out = ["\t".join(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c, "")
            cells.append(format(v, floatfmt) if isinstance(v, float) else str(v))
        out.append("\t".join(cells))
    return "\n".join(out)
