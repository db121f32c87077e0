"""Acceptance criteria 1-10, one test each, with a PASS/FAIL line per criterion.

Criteria 5-8 and part of 10 need trained desk models. They are trained on
first use (about 25 minutes per loss mode on one CPU core) and cached under
``$EDGEFLOW_CACHE`` (default ``<repo>/.cache``). Figures and tables go to
``$EDGEFLOW_ACCEPTANCE_OUT`` (default ``<repo>/acceptance_out``).

Run directly for the summary only: ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import json
import math
import os
import sys
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from edgeflow.chunker import chunked_infer, coverage, extract, plan_chunks, reassemble, seam_mask
from edgeflow.datamodel import flo_read, flo_write, resize_bilinear
from edgeflow.latency import (VehicleParams, calibrated_comparison, grid_scan_speed, max_safe_speed,
                              required_observations, speed_curves)
from edgeflow.losses import LossConfig, grad_check, multiscale_uncertainty_loss
from edgeflow.metrics import epe
from edgeflow.net import accumulate, assemble_output
from edgeflow.pipeline import (ball_benchmark, desk_datasets, float_fn, mean_epe, overlap_sweep, quant_fn, train_desk,
                               wide_val_set, zero_flow_epe)
from edgeflow.quantsim import activation_coverage, calibrate, quant_forward
from edgeflow.synthgen import SceneDistribution, ball_radius_sweep, synth_arrays

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("EDGEFLOW_CACHE", REPO / ".cache"))
OUT = Path(os.environ.get("EDGEFLOW_ACCEPTANCE_OUT", REPO / "acceptance_out"))

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "criteria.txt", "w") as f:
        for k in sorted(RESULTS):
            f.write(result_line(k) + "\n")


def result_line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def check(n: int, checks: list[tuple[bool, str]], info: str = "") -> None:
    """Record and assert ``checks``; ``info`` is reported but never affects the outcome."""
    ok = all(c for c, _ in checks)
    detail = "; ".join(f"{'ok' if c else 'FAILED'}: {d}" for c, d in checks)
    record(n, ok, detail + (f" [info: {info}]" if info else ""))
    assert ok, RESULTS[n][1]


# ---------------------------------------------------------------------------
# shared trained artefacts


@lru_cache(maxsize=None)
def datasets():
    return desk_datasets(cache_dir=CACHE)


@lru_cache(maxsize=None)
def desk(mode: str):
    return train_desk(mode, cache_dir=CACHE, data=datasets())


@lru_cache(maxsize=None)
def calibration_pairs():
    return synth_arrays(64, SceneDistribution(), 3)[0]


@lru_cache(maxsize=None)
def quantized(mode: str):
    return calibrate(desk(mode)[0], calibration_pairs())


def box_net(radius: int):
    """Stand-in network with receptive radius ``radius``: repeated 3x3 box filters."""
    def fn(batch):
        x = torch.from_numpy(np.asarray(batch, np.float64)).permute(0, 3, 1, 2)
        k = torch.full((x.shape[1], 1, 3, 3), 1 / 9, dtype=torch.float64)
        for _ in range(radius):
            x = F.conv2d(x, k, padding=1, groups=x.shape[1])
        return x.permute(0, 2, 3, 1).numpy()[..., :2]
    return fn


def one_inversion_ok(values, tol_abs=None, tol_rel=None) -> bool:
    """Non-increasing sequence, allowing at most one small increase."""
    ups = []
    for a, b in zip(values, values[1:]):
        if b > a:
            ups.append((a, b))
    if not ups:
        return True
    if len(ups) > 1:
        return False
    a, b = ups[0]
    if tol_abs is not None:
        return b - a <= tol_abs
    return (b - a) / a <= tol_rel


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_chunk_partition():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    bad_cov = bad_id = 0
    for _ in range(200):
        m, n = int(r.integers(1, 5)), int(r.integers(1, 5))
        bh, bw = int(r.integers(4, 40)), int(r.integers(4, 40))
        lim = min(bh if m > 1 else bw, bw if n > 1 else bh)
        ov = 2 * int(r.integers(0, (lim - 1) // 2 + 1))
        plan = plan_chunks(m * bh, n * bw, m, n, ov)
        bad_cov += int(not (coverage(plan) == 1).all())
        img = r.random((plan.height, plan.width, 2)).astype(np.float32)
        # per-pixel network: any pointwise map
        net = lambda b: np.tanh(b) * 3.0 - b  # noqa: E731
        chunked = reassemble(net(extract(img, plan)), plan)
        bad_id += int(chunked.tobytes() != net(img).tobytes())
    secs = time.perf_counter() - t0
    check(1, [(bad_cov == 0, f"coverage==1 on 200 plans ({bad_cov} bad)"),
              (bad_id == 0, f"pointwise net bit-equal ({bad_id} bad)"),
              (secs < 60, f"runtime {secs:.1f}s < 60s")])


def test_criterion_02_receptive_field_locality():
    r = np.random.default_rng(7)
    img = r.random((64, 96, 6))
    radius = 4
    fn = box_net(radius)
    full = fn(img[None])[0]
    errs = {}
    for ov in (4, 8):
        out, _ = chunked_infer(img, plan_chunks(64, 96, 2, 2, ov), fn)
        errs[ov] = float(np.abs(out - full).max())
    plan0 = plan_chunks(64, 96, 2, 2, 0)
    out0, _ = chunked_infer(img, plan0, fn)
    seam_diff = float(np.abs(out0 - full)[seam_mask(plan0, radius)].max())
    check(2, [(max(errs.values()) <= 1e-6, f"overlap>=r max err {max(errs.values()):.2e}"),
              (seam_diff > 1e-6, f"overlap 0 seam band differs by {seam_diff:.3e}")])


def _recurrence(deltas):
    est = np.array(deltas[0], dtype=np.float64)
    for d in deltas[1:]:
        h, w = d.shape[:2]
        ph, pw = est.shape[:2]
        est = resize_bilinear(est, h, w) * [w / pw, h / ph] + d
    return est


def test_criterion_03_accumulation():
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        levels = int(r.integers(1, 5))
        h, w = int(r.integers(2, 8)), int(r.integers(2, 8))
        deltas = [r.normal(size=(h * 2**k, w * 2**k, 2)) * 3 for k in range(levels)]
        worst = max(worst, float(np.abs(accumulate(deltas)[-1] - _recurrence(deltas)).max()))
    base = r.normal(size=(6, 8, 2))
    zeros = [base, np.zeros((12, 16, 2)), np.zeros((24, 32, 2))]
    expect = resize_bilinear(resize_bilinear(base, 12, 16, True), 24, 32, True)
    exact = np.array_equal(accumulate(zeros)[-1], expect)
    check(3, [(worst <= 1e-6, f"oracle agreement max err {worst:.2e} over 100 pyramids"),
              (exact, "zero increments collapse to resized base exactly")])


def test_criterion_04_loss():
    t0 = time.perf_counter()
    r = np.random.default_rng(4)

    def t(a):
        return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)[None]))

    gt = r.normal(size=(16, 16, 2))
    sizes = [(4, 4), (8, 8), (16, 16)]
    tg = [resize_bilinear(gt, h, w) * [w / 16, h / 16] for h, w in sizes]
    fds = [tg[0]] + [tg[i] - resize_bilinear(tg[i - 1], *sizes[i]) * 2 for i in range(1, 3)]
    pyr = assemble_output([t(d) for d in fds], [t(np.zeros((h, w, 1))) for h, w in sizes])
    spot = float(multiscale_uncertainty_loss(pyr, t(gt), LossConfig(epsilon=0.0)))

    gsmall = t(r.normal(size=(4, 4, 2)))
    params = {"f0": t(r.normal(size=(2, 2, 2))), "f1": t(r.normal(size=(4, 4, 2))),
              "u0": t(r.normal(size=(2, 2, 1))), "u1": t(r.normal(size=(4, 4, 1)))}
    res = grad_check(lambda p: multiscale_uncertainty_loss(
        assemble_output([p["f0"], p["f1"]], [p["u0"], p["u1"]]), gsmall), params)
    secs = time.perf_counter() - t0
    check(4, [(abs(spot - 3 * math.log(2)) < 1e-9, f"perfect/U=0/eps=0 loss {spot:.10f} vs 3ln2"),
              (res.max_rel_error < 1e-3, f"grad check rel err {res.max_rel_error:.2e} ({res.checked} coords, "
                                         f"{len(res.excluded)} kinks excluded)"),
              (secs < 60, f"runtime {secs:.1f}s")])


@pytest.mark.slow
def test_criterion_05_trainability():
    t0 = time.perf_counter()
    model, history = desk("multiscale_uncertainty")
    (_, _), (vp, vf) = datasets()
    val = mean_epe(float_fn(model), vp, vf)
    zero = zero_flow_epe(vf)
    OUT.mkdir(parents=True, exist_ok=True)
    from edgeflow.plotting import plot_history

    plot_history(history, OUT / "history_multiscale_uncertainty.png")
    check(5, [(len(history) == 30, f"{len(history)} epochs on 2000 samples"),
              (val <= 0.25 * zero, f"val EPE {val:.4f} <= 0.25 x zero-flow {zero:.4f} = {0.25 * zero:.4f} "
                                   f"(ratio {val / zero:.3f}); wall {time.perf_counter() - t0:.0f}s incl. cache")])


@pytest.mark.slow
def test_criterion_06_quantization_regime():
    (_, _), (vp, vf) = datasets()
    rows = {}
    for mode in ("multiscale_uncertainty", "multiscale", "l1"):
        model, _ = desk(mode)
        fe = mean_epe(float_fn(model), vp, vf)
        qe = mean_epe(quant_fn(model, quantized(mode)), vp, vf)
        rows[mode] = (fe, qe, qe / fe)
    with open(OUT / "quant_modes.tsv", "w") as f:
        f.write("mode\tfloat_epe\tquant_epe\tratio\n")
        for k, (fe, qe, ra) in rows.items():
            f.write(f"{k}\t{fe:.4f}\t{qe:.4f}\t{ra:.4f}\n")
    msu, ms, l1 = rows["multiscale_uncertainty"], rows["multiscale"], rows["l1"]
    desc = ", ".join(f"{k} {v[0]:.3f}->{v[1]:.3f} (x{v[2]:.3f})" for k, v in rows.items())
    check(6, [(msu[2] <= 1.30, f"multiscale_uncertainty quant/float {msu[2]:.3f} <= 1.30"),
              (l1[2] > ms[2] and l1[2] > msu[2], f"l1 degrades most: {desc}")])


@pytest.mark.slow
def test_criterion_07_overlap_trend():
    model, _ = desk("multiscale_uncertainty")
    pairs, flows = wide_val_set(8)
    rows = overlap_sweep(float_fn(model), pairs, flows, 2, 2, (0, 16, 32, 64), reps=5,
                         check=model.config.check_input)
    full = mean_epe(float_fn(model), pairs, flows, batch_size=1)
    with open(OUT / "overlap_sweep.tsv", "w") as f:
        f.write("overlap_px\tbatch_shape\tepe\tfps\n")
        for r in rows:
            f.write(f"{r['overlap_px']}\t{r['batch_shape']}\t{r['epe']:.4f}\t{r['fps']:.3f}\n")
        f.write(f"full\t1 x 480 x 352\t{full:.4f}\t\n")
    from edgeflow.plotting import plot_overlap_sweep

    plot_overlap_sweep(rows, OUT / "overlap_sweep.png")
    epes = [r["epe"] for r in rows]
    fps = [r["fps"] for r in rows]
    check(7, [(one_inversion_ok(epes, tol_abs=0.05), "EPE " + " -> ".join(f"{e:.4f}" for e in epes)
               + f" (full frame {full:.4f})"),
              (one_inversion_ok(fps, tol_rel=0.10), "FPS " + " -> ".join(f"{v:.2f}" for v in fps))])


@pytest.mark.slow
def test_criterion_08_seam_iou():
    model, _ = desk("multiscale_uncertainty")
    radii = ball_radius_sweep(6, 32.0, 4.0)
    rows = ball_benchmark(float_fn(model), radii, (0, 16, 32, 64))
    with open(OUT / "ball_iou.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    from edgeflow.plotting import plot_iou_sweep

    plot_iou_sweep(radii, {"full frame": [r["iou_full"] for r in rows],
                           **{f"2x2 overlap {o}": [r[f"iou_ov{o}"] for r in rows] for o in (0, 16, 32, 64)}},
                   OUT / "ball_iou.png")
    m0 = float(np.mean([r["iou_ov0"] for r in rows]))
    m64 = float(np.mean([r["iou_ov64"] for r in rows]))
    mf = float(np.mean([r["iou_full"] for r in rows]))
    gaps = [r["iou_full"] - r["iou_ov0"] for r in rows]
    rho = float(spearmanr(radii, gaps).statistic)
    # informational: the same correlation over radii the full-frame model resolves
    resolved = [(r["radius"], g) for r, g in zip(rows, gaps) if r["iou_full"] >= 0.5]
    info = f"full-frame IoU by radius {[round(r['iou_full'], 3) for r in rows]}"
    if len(resolved) >= 3:
        rho_res = float(spearmanr(*zip(*resolved)).statistic)
        info += f"; Spearman over {len(resolved)} radii with full IoU >= 0.5: {rho_res:.3f}"
    check(8, [(len(radii) >= 5, f"{len(radii)} radii {radii}"),
              (m0 < m64, f"mean IoU no-overlap {m0:.4f} < overlap64 {m64:.4f}"),
              (m64 <= mf + 0.05, f"overlap64 {m64:.4f} <= full {mf:.4f} + 0.05"),
              (rho < 0, f"Spearman(radius, gap) = {rho:.3f} < 0, gaps {[round(g, 3) for g in gaps]}")], info)


def test_criterion_09_latency():
    t0 = time.perf_counter()
    table_ok = (required_observations(0.9, 0.99) == 2 and required_observations(0.99, 0.9) == 1
                and required_observations(0.7, 0.99) == 4)
    r = np.random.default_rng(9)
    worst = 0.0
    draws = []
    for _ in range(1000):
        p = VehicleParams(z=r.uniform(1, 8), a_max=r.uniform(5, 30), obstacle_radius=r.uniform(0.05, 0.5),
                          robot_radius=r.uniform(0.05, 0.3), margin=r.uniform(0, 0.2),
                          inertia=r.uniform(1e-3, 1e-2), m_max=r.uniform(0.1, 1.0), length=r.uniform(0.1, 0.5),
                          tau_p=r.uniform(0.002, 0.1), dr=r.uniform(0.5, 0.99), dr_s=r.uniform(0.5, 0.999))
        v = max_safe_speed(p).speed
        worst = max(worst, abs(grid_scan_speed(p, v_max=v * 1.01, step=v * 2e-5) - v) / v)
        draws.append(p)
    h = 1e-4
    signs = {"tau_p<0": True, "Z>0": True, "R_b<0": True, "L<0": True, "DR>0": True}
    for p in draws[:200]:
        v = max_safe_speed(p).speed
        signs["tau_p<0"] &= max_safe_speed(replace(p, tau_p=p.tau_p + h)).speed < v
        signs["Z>0"] &= max_safe_speed(replace(p, z=p.z + h)).speed > v
        signs["R_b<0"] &= max_safe_speed(replace(p, margin=p.margin + h)).speed < v
        signs["L<0"] &= max_safe_speed(replace(p, length=p.length + h)).speed < v
        signs["DR>0"] &= max_safe_speed(replace(p, dr=0.999, dr_s=0.99)).speed > max_safe_speed(
            replace(p, dr=0.5, dr_s=0.99)).speed
    comp = calibrated_comparison()
    rows = speed_curves([0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1], [0.7, 0.9], [0.1, 0.21, 0.4], [2.0, 3.5, 5.0])
    from edgeflow.plotting import plot_speed_curves

    OUT.mkdir(parents=True, exist_ok=True)
    plot_speed_curves(rows, OUT / "speed_curves.png")
    secs = time.perf_counter() - t0
    check(9, [(table_ok, "N table (0.9,0.99)->2, (0.99,0.9)->1, (0.7,0.99)->4"),
              (worst < 1e-3, f"closed form vs grid scan worst rel {worst:.2e} over 1000 draws"),
              (all(signs.values()), "monotonicity " + ", ".join(f"{k}:{'ok' if v else 'no'}" for k, v in signs.items())),
              (comp.improvement >= 0.70, f"anchor {comp.slow.speed:.2f} m/s -> {comp.fast.speed:.2f} m/s "
                                         f"(+{100 * comp.improvement:.1f}%)"),
              (secs < 60, f"runtime {secs:.1f}s")])


@pytest.mark.slow
def test_criterion_10_bit_exactness(tmp_path):
    r = np.random.default_rng(10)
    f = r.normal(size=(37, 53, 2)).astype(np.float32) * 20
    flo_write(f, tmp_path / "x.flo")
    flo_ok = flo_read(tmp_path / "x.flo").tobytes() == f.tobytes()
    model, _ = desk("multiscale_uncertainty")
    qw = quantized("multiscale_uncertainty")
    (_, _), (vp, _) = datasets()
    a = quant_forward(vp[:8], model, qw)
    b = quant_forward(vp[:8], model, qw)
    stable = torch.equal(a.flow, b.flow) and torch.equal(a.uncertainty, b.uncertainty)
    check(10, [(flo_ok, ".flo round trip bitwise"), (stable, "quantized forward bit-stable across two runs")])


@pytest.mark.slow
def test_desk_calibration_coverage():
    """Supporting check: calibrated ranges cover a fresh probe set."""
    model, _ = desk("multiscale_uncertainty")
    probe = synth_arrays(64, SceneDistribution(), 4)[0]
    cov = activation_coverage(model, quantized("multiscale_uncertainty"), probe)
    assert cov >= 0.999, cov



# ---------------------------------------------------------------------------
# supporting properties of the trained desk models (not numbered criteria)


@pytest.mark.slow
def test_trained_increments_small():
    model, _ = desk("multiscale_uncertainty")
    (_, _), (vp, _) = datasets()
    with torch.no_grad():
        out = model(torch.from_numpy(vp[:16]).permute(0, 3, 1, 2).float() / 255.0)
    acc = float(out.flow.abs().quantile(0.95))
    for d in out.flow_deltas[1:]:
        assert float(d.abs().quantile(0.95)) < acc


@pytest.mark.slow
def test_trained_shift_equivariance():
    model, _ = desk("multiscale_uncertainty")
    (_, _), (vp, _) = datasets()
    fn = float_fn(model)
    dy, dx = 8, 16
    base = fn(vp[:16])
    moved = fn(np.roll(vp[:16], (dy, dx), axis=(1, 2)))
    b = 24
    inner = (slice(None), slice(b, -b - dy), slice(b, -b - dx))
    shifted = moved[:, b + dy:-b, b + dx:-b]
    assert float(np.abs(shifted - base[inner]).mean()) < 0.5


@pytest.mark.slow
def test_ball_iou_monotone_in_overlap():
    model, _ = desk("multiscale_uncertainty")
    overlaps = (0, 16, 32, 64)
    rows = ball_benchmark(float_fn(model), ball_radius_sweep(6, 32.0, 4.0), overlaps)
    means = [float(np.mean([r[f"iou_ov{o}"] for r in rows])) for o in overlaps]
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    assert len(drops) <= 1 and all(d <= 0.02 for d in drops), means


@pytest.mark.slow
def test_chunked_no_overlap_not_better_than_full():
    model, _ = desk("multiscale_uncertainty")
    pairs, flows = wide_val_set(8)
    fn = float_fn(model)
    full = mean_epe(fn, pairs, flows, batch_size=1)
    plan = plan_chunks(480, 352, 2, 2, 0)
    chunked = float(np.mean([epe(chunked_infer(p, plan, fn)[0], g) for p, g in zip(pairs, flows)]))
    assert chunked >= full


@pytest.mark.slow
def test_quantized_ablation_ordering():
    """l1 degrades more under quantization than l1_shift50 and the multiscale modes."""
    (_, _), (vp, vf) = datasets()
    zero = zero_flow_epe(vf)
    ratio, flt = {}, {}
    for mode in ("l1", "l1_shift50", "multiscale", "multiscale_uncertainty"):
        model, _ = desk(mode)
        flt[mode] = mean_epe(float_fn(model), vp, vf)
        ratio[mode] = mean_epe(quant_fn(model, quantized(mode)), vp, vf) / flt[mode]
    # a stalled arm predicts a constant and quantizes trivially; the ordering needs trained arms
    stalled = [m for m, e in flt.items() if e > 0.9 * zero]
    assert not stalled, f"arms stuck at the zero-flow baseline {zero:.4f}: {stalled} (float EPE {flt})"
    assert all(ratio["l1"] > ratio[m] for m in ratio if m != "l1"), ratio


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
