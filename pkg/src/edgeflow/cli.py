"""Command-line front end: ``edgeflow <subcommand> [options]``.

Tables go to standard output tab-delimited; figures and record files are
written next to the paths given by ``--report`` / ``--plot``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datamodel import FloFormatError
from .config import ConfigError, apply_config, explicit_dests, load_config

log = logging.getLogger("edgeflow")


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; section named after the subcommand, plus [common]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeflow", description="Desk-scale multi-scale optical flow toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic flow dataset")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-flow", type=float, default=8.0)

    p = sub.add_parser("train", help="train a desk model")
    _common(p)
    p.add_argument("--data", required=True, help="training manifest (or dataset directory)")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--out", required=True, help="output directory for checkpoints and history")
    p.add_argument("--mode", default="multiscale_uncertainty",
                   choices=["l1", "l1_shift50", "multiscale", "multiscale_uncertainty"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="EPE / IoU / DR report on a dataset")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--quant", help="quantized checkpoint; evaluates the integer path")
    p.add_argument("--threshold", type=float, help="obstacle mask threshold in px (default: per-sample rule)")
    p.add_argument("--report", help="line-delimited record file")

    p = sub.add_parser("infer", help="flow for one image pair")
    _common(p)
    p.add_argument("--pair", nargs=2, required=True, metavar=("IMG1", "IMG2"))
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help=".flo output path")
    p.add_argument("--png", help="optional colour-wheel rendering")
    p.add_argument("--quant")
    p.add_argument("--chunks", type=_int_list, default=[1, 1], help="M,N")
    p.add_argument("--overlap", type=int, default=0)

    p = sub.add_parser("chunk-sweep", help="EPE and FPS against chunk overlap")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", help="manifest of 480x352-style frames; synthesized when omitted")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--chunks", type=_int_list, default=[2, 2], help="M,N")
    p.add_argument("--overlaps", type=_int_list, default=[0, 16, 32, 64])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--quant")
    p.add_argument("--report")
    p.add_argument("--plot")

    p = sub.add_parser("quantize", help="calibrate and write an 8-bit checkpoint")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", help="calibration manifest; synthesized when omitted")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="host throughput for equal-pixel chunk shapes")
    _common(p)
    p.add_argument("--weights", help="float checkpoint (default: freshly initialised desk model)")
    p.add_argument("--quant")
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--width", type=int, default=352)
    p.add_argument("--factors", type=_int_list, default=[1, 2, 4])
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--report")
    p.add_argument("--plot")

    p = sub.add_parser("maxspeed", help="maximum safe speed from perception latency")
    _common(p)
    p.add_argument("--dr", type=float, default=0.9)
    p.add_argument("--drs", type=float, default=0.99)
    p.add_argument("--tau-p", type=float, default=1 / 30)
    p.add_argument("--tau-a", type=float, help="override the attitude-dynamics estimate")
    p.add_argument("--z", type=float, default=3.5)
    p.add_argument("--a-max", type=float, default=2 * 9.81)
    p.add_argument("--rb", type=float, help="bloated radius (overrides the three radii)")
    p.add_argument("--length", type=float, default=0.21)
    p.add_argument("--grid", action="store_true", help="also emit speed curves over latency")
    p.add_argument("--tau-ps", type=_float_list, default=[0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1])
    p.add_argument("--dr-list", type=_float_list, default=[0.7, 0.9])
    p.add_argument("--lengths", type=_float_list, default=[0.1, 0.21, 0.4])
    p.add_argument("--depths", type=_float_list, default=[2.0, 3.5, 5.0])
    p.add_argument("--report")
    p.add_argument("--plot")

    p = sub.add_parser("ballbench", help="IoU of a seam-centred ball against radius")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--quant")
    p.add_argument("--radii", type=int, default=6, help="number of radii")
    p.add_argument("--r-max", type=float, default=32.0)
    p.add_argument("--r-min", type=float, default=4.0)
    p.add_argument("--overlaps", type=_int_list, default=[0, 16, 32, 64])
    p.add_argument("--report")
    p.add_argument("--plot")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _model_fn(args):
    from .net import load_checkpoint
    from .pipeline import float_fn, quant_fn
    from .quantsim import load_quantized

    model = load_checkpoint(args.weights)
    if getattr(args, "quant", None):
        return model, quant_fn(model, load_quantized(args.quant))
    return model, float_fn(model)


def _load(path):
    from .synthgen import load_dataset

    return load_dataset(path)


def _write_rows(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synthgen import SceneDistribution, gen_dataset

    dist = SceneDistribution(height=args.height, width=args.width, max_flow=args.max_flow,
                             max_background_flow=min(4.0, args.max_flow))
    manifest = gen_dataset(args.count, args.out, dist, args.seed)
    print(f"wrote {args.count} samples\t{manifest}")
    return 0


def cmd_train(args) -> int:
    from .losses import NET_MODE_FOR_LOSS, LossConfig
    from .net import DESK_CONFIG, init_weights, save_checkpoint
    from .plotting import plot_history
    from .training import TrainConfig, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = replace(DESK_CONFIG, base_channels=args.base_channels, output_mode=NET_MODE_FOR_LOSS[args.mode])
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    model = init_weights(net, args.seed)
    hist_path = out / "history.jsonl"
    if hist_path.exists():
        hist_path.unlink()
    model, history = train(model, _load(args.data), cfg, LossConfig(mode=args.mode),
                           _load(args.val) if args.val else None, out / "checkpoints", hist_path, args.max_steps)
    save_checkpoint(model, out / "final.npz")
    print("epoch\ttrain_loss\tval_epe")
    for h in history:
        print(f"{h['epoch']}\t{h['train_loss']:.5f}\t{h['val_epe'] if h['val_epe'] is None else format(h['val_epe'], '.4f')}")
    if history:
        plot_history(history, out / "history.png")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .pipeline import batched_predict
    from .synthgen import load_masks

    _, fn = _model_fn(args)
    pairs, flows = _load(args.data)
    preds = batched_predict(fn, pairs)
    masks = load_masks(args.data)
    report = evaluate(list(preds), list(flows), masks, args.threshold,
                      {"weights": args.weights, "quant": args.quant, "data": args.data, "seed": args.seed})
    if args.report:
        report.write(args.report)
    print(report.summary_table())
    return 0


def cmd_infer(args) -> int:
    from .chunker import chunked_infer, plan_chunks
    from .datamodel import flo_write, read_image, stack_pair, to_uint8

    _, fn = _model_fn(args)
    pair = to_uint8(stack_pair(read_image(args.pair[0]), read_image(args.pair[1])))
    if len(args.chunks) != 2:
        raise argparse.ArgumentTypeError("--chunks takes M,N")
    plan = plan_chunks(pair.shape[0], pair.shape[1], args.chunks[0], args.chunks[1], args.overlap)
    flow, secs = chunked_infer(pair, plan, fn)
    flo_write(flow.astype(np.float32), args.out)
    if args.png:
        from .plotting import save_flow_png

        save_flow_png(flow, args.png)
    print(f"flow\t{args.out}\t{flow.shape[0]}x{flow.shape[1]}\t{secs * 1e3:.1f} ms")
    return 0


def cmd_chunk_sweep(args) -> int:
    from .pipeline import format_rows, overlap_sweep, wide_val_set

    model, fn = _model_fn(args)
    pairs, flows = _load(args.data) if args.data else wide_val_set(args.count, args.seed)
    rows = overlap_sweep(fn, pairs, flows, args.chunks[0], args.chunks[1], args.overlaps, args.reps,
                         check=model.config.check_input, seed=args.seed)
    print(format_rows(rows, ["overlap_px", "batch_shape", "chunk_h", "chunk_w", "epe", "fps"]))
    if args.report:
        _write_rows(args.report, rows)
    if args.plot:
        from .plotting import plot_overlap_sweep

        plot_overlap_sweep(rows, args.plot)
    return 0


def cmd_quantize(args) -> int:
    from .net import load_checkpoint
    from .pipeline import wide_val_set
    from .quantsim import activation_coverage, calibrate, save_quantized
    from .synthgen import SceneDistribution, synth_arrays

    model = load_checkpoint(args.weights)
    if args.data:
        pairs = _load(args.data)[0][: args.count]
    else:
        pairs = synth_arrays(args.count, SceneDistribution(), args.seed)[0]
    qw = calibrate(model, pairs)
    save_quantized(qw, args.out)
    probe = synth_arrays(min(args.count, 16), SceneDistribution(), args.seed + 1)[0]
    cov = activation_coverage(model, qw, probe)
    print(f"quantized\t{args.out}\tlayers={len(qw.layers)}\tcoverage={cov:.5f}\twarnings={len(qw.warnings)}")
    for w in qw.warnings:
        print(f"warning\t{w}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    from .bench import chunk_shape_sweep, format_table, sweep
    from .net import DESK_CONFIG, init_weights
    from .pipeline import float_fn, quant_fn
    from .quantsim import load_quantized

    if args.weights:
        model, fn = _model_fn(args)
    else:
        model = init_weights(DESK_CONFIG, args.seed)
        fn = quant_fn(model, load_quantized(args.quant)) if args.quant else float_fn(model)
    shapes = chunk_shape_sweep(args.height, args.width, 2 * 3, args.factors)
    results = sweep(fn, shapes, args.warmup, args.reps, check=model.config.check_input, seed=args.seed)
    print(format_table(results))
    if args.report:
        _write_rows(args.report, [r.record() for r in results])
    if args.plot:
        from .plotting import plot_bench

        plot_bench(results, args.plot)
    return 0


def cmd_maxspeed(args) -> int:
    from .latency import VehicleParams, max_safe_speed, speed_curves

    kw = dict(z=args.z, a_max=args.a_max, length=args.length, tau_p=args.tau_p, dr=args.dr, dr_s=args.drs,
              tau_a=args.tau_a)
    if args.rb is not None:
        kw.update(obstacle_radius=args.rb / 3, robot_radius=args.rb / 3, margin=args.rb / 3)
    p = VehicleParams(**kw)
    r = max_safe_speed(p)
    print("N\ttau_p\ttau_a\tlatency\tV\tfeasible")
    print(f"N={r.observations}\t{p.tau_p:.5f}\t{r.tau_a:.5f}\t{r.latency:.5f}\tV={r.speed:.4f}\t{r.feasible}")
    if args.grid or args.plot or args.report:
        rows = speed_curves(args.tau_ps, args.dr_list, args.lengths, args.depths, replace(p, tau_a=args.tau_a))
        print()
        print("family\tvalue\tdr\ttau_p\tn\tspeed")
        for row in rows:
            print(f"{row['family']}\t{row[row['family']]}\t{row['dr']}\t{row['tau_p']:.4f}\t{row['n']}\t{row['speed']:.4f}")
        if args.report:
            _write_rows(args.report, rows)
        if args.plot:
            from .plotting import plot_speed_curves

            plot_speed_curves(rows, args.plot)
    return 0


def cmd_ballbench(args) -> int:
    from .pipeline import ball_benchmark, format_rows
    from .synthgen import ball_radius_sweep

    _, fn = _model_fn(args)
    radii = ball_radius_sweep(args.radii, args.r_max, args.r_min)
    rows = ball_benchmark(fn, radii, args.overlaps, seed=args.seed)
    cols = ["radius", "iou_full"] + [f"iou_ov{o}" for o in args.overlaps]
    print(format_rows(rows, cols))
    if args.report:
        _write_rows(args.report, rows)
    if args.plot:
        from .plotting import plot_iou_sweep

        curves = {"full frame": [r["iou_full"] for r in rows]}
        curves.update({f"2x2, overlap {o}": [r[f"iou_ov{o}"] for r in rows] for o in args.overlaps})
        plot_iou_sweep(radii, curves, args.plot)
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "chunk-sweep": cmd_chunk_sweep, "quantize": cmd_quantize, "bench": cmd_bench,
    "maxspeed": cmd_maxspeed, "ballbench": cmd_ballbench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        try:
            apply_config(args, sub, load_config(args.config), args.command, explicit_dests(sub, argv))
        except ConfigError as exc:
            print(f"edgeflow {args.command}: config error: {exc}", file=sys.stderr)
            return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FloFormatError as exc:
        print(f"edgeflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (argparse.ArgumentTypeError, ValueError) as exc:
        # invalid values (rates out of range, indivisible shapes, ...) are argument errors
        print(f"edgeflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"edgeflow {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
