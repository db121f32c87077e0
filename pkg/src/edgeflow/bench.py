"""Host throughput harness: fixed seeded input, warmup excluded, median of reps."""
from __future__ import annotations

import json
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

MIN_REPS = 5


def host_descriptor() -> str:
    return (f"{platform.node()} | {platform.system()} {platform.release()} | {platform.machine()} | "
            f"{platform.processor() or 'cpu'} | {os.cpu_count()} cpus | python {platform.python_version()} | "
            f"torch {torch.__version__}")


@contextmanager
def single_worker():
    """Pin torch to one intra-op thread for the duration of a timing section."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


@dataclass
class BenchResult:
    shape: tuple[int, int, int, int]  # B, h, w, 2C
    warmup: int
    reps: int
    times: list[float]
    frames_per_call: float
    host: str = field(default_factory=host_descriptor)
    label: str = ""

    def __post_init__(self):
        if self.reps < MIN_REPS:
            raise ValueError(f"need at least {MIN_REPS} repetitions, got {self.reps}")
        if len(self.times) != self.reps:
            raise ValueError("one timing record per repetition expected")

    @property
    def median_time(self) -> float:
        return float(np.median(self.times))

    @property
    def fps(self) -> float:
        return self.frames_per_call / self.median_time

    @property
    def iqr(self) -> float:
        """Interquartile range of per-call FPS."""
        rates = self.frames_per_call / np.asarray(self.times)
        q1, q3 = np.percentile(rates, [25, 75])
        return float(q3 - q1)

    @property
    def total_pixels(self) -> int:
        b, h, w, _ = self.shape
        return b * h * w

    def record(self) -> dict:
        d = asdict(self)
        d.update(fps=self.fps, iqr=self.iqr, median_time=self.median_time, total_pixels=self.total_pixels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.record())


def throughput(model_fn: Callable[[np.ndarray], object], shape: Sequence[int], warmup: int = 2, reps: int = MIN_REPS,
               frames_per_call: float | None = None, seed: int = 0, check: Callable[[int, int], None] | None = None,
               label: str = "") -> BenchResult:
    """Time ``model_fn`` on a seeded uint8 batch of ``shape`` (B, h, w, 2C).

    ``frames_per_call`` defaults to B (each batch item is one frame); pass 1
    when the batch holds the chunks of a single frame. ``check`` validates
    ``(h, w)`` before anything runs, e.g. ``NetConfig.check_input``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError(f"shape must be (B, h, w, 2C), got {shape}")
    if check is not None:
        check(shape[1], shape[2])
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    x = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
    times = []
    with single_worker():
        for _ in range(warmup):
            model_fn(x)
        for _ in range(reps):
            t0 = time.perf_counter()
            model_fn(x)
            times.append(time.perf_counter() - t0)
    fpc = float(shape[0] if frames_per_call is None else frames_per_call)
    return BenchResult(shape, warmup, reps, times, fpc, label=label)


def chunk_shape_sweep(height: int, width: int, channels: int = 6, factors: Sequence[int] = (1, 2, 4)) -> list[tuple]:
    """Equal-total-pixel shapes ``(k*k, H/k, W/k, 2C)`` for each factor k."""
    out = []
    for k in factors:
        if height % k or width % k:
            raise ValueError(f"{height}x{width} is not divisible by {k}")
        out.append((k * k, height // k, width // k, channels))
    return out


def sweep(model_fn, shapes, warmup: int = 2, reps: int = MIN_REPS, check=None, seed: int = 0) -> list[BenchResult]:
    """Throughput per shape, counting each call as one frame (chunks of one image)."""
    return [throughput(model_fn, s, warmup, reps, frames_per_call=1, seed=seed, check=check,
                       label=f"{s[0]}x{s[1]}x{s[2]}x{s[3]}") for s in shapes]


def format_table(results: Sequence[BenchResult]) -> str:
    """Tab-delimited table with a host header and total-pixel annotation."""
    lines = [f"# host: {results[0].host}" if results else "# host: n/a",
             "shape\ttotal_pixels\tmedian_ms\tfps\tiqr"]
    for r in results:
        lines.append(f"{r.label or r.shape}\t{r.total_pixels}\t{1e3 * r.median_time:.2f}\t{r.fps:.2f}\t{r.iqr:.2f}")
    pix = {r.total_pixels for r in results}
    if len(pix) == 1 and len(results) > 1:
        lines.append(f"# equal total pixels per call: {pix.pop()}")
    return "\n".join(lines)
