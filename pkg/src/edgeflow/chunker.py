"""Split frames into an M x N grid of equal chunks stacked along the batch axis.

Each chunk's source window is its base tile grown by ``overlap`` pixels on
every interior side. All chunks must share one shape, so a chunk with fewer
interior sides than the widest one is widened further inward. Reassembly
crops every output back to its base tile and places it; nothing is blended.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Window:
    top: int
    left: int
    height: int
    width: int

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.height)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.width)


@dataclass(frozen=True)
class ChunkPlan:
    height: int
    width: int
    m: int
    n: int
    overlap: int
    sources: tuple[Window, ...]  # in image coordinates, batch order k = row * n + col
    crops: tuple[Window, ...]  # in chunk coordinates

    @property
    def count(self) -> int:
        return self.m * self.n

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return self.sources[0].height, self.sources[0].width

    def destination(self, k: int) -> Window:
        """Image-space window filled by chunk ``k``."""
        s, c = self.sources[k], self.crops[k]
        return Window(s.top + c.top, s.left + c.left, c.height, c.width)

    def describe(self) -> dict:
        h, w = self.chunk_shape
        return {
            "H": self.height, "W": self.width, "M": self.m, "N": self.n,
            "overlap_px": self.overlap, "chunk_h": h, "chunk_w": w,
            "batch_shape": f"{self.count} x {h} x {w}",
        }

    def to_record(self) -> str:
        return json.dumps(self.describe(), sort_keys=True)


def _axis_windows(size: int, parts: int, overlap: int) -> tuple[list[tuple[int, int]], list[int]]:
    """(start, length) of each source span and the crop offset of its base tile."""
    base = size // parts
    grow = overlap * min(parts - 1, 2)
    length = base + grow
    spans, offsets = [], []
    for i in range(parts):
        lo = i * base
        start = lo - (overlap if i > 0 else 0)
        # shift inward so every span has the common length and stays inside
        start = min(max(start, 0), size - length)
        spans.append((start, length))
        offsets.append(lo - start)
    return spans, offsets


def plan_chunks(height: int, width: int, m: int, n: int, overlap: int = 0) -> ChunkPlan:
    if m < 1 or n < 1:
        raise ValueError(f"chunk factors must be >= 1, got M={m}, N={n}")
    if height % m:
        raise ValueError(f"height {height} is not divisible by M={m}")
    if width % n:
        raise ValueError(f"width {width} is not divisible by N={n}")
    if overlap < 0 or overlap % 2:
        raise ValueError(f"overlap must be a non-negative even integer, got {overlap}")
    bh, bw = height // m, width // n
    if (m > 1 or n > 1) and overlap >= min(bh if m > 1 else bw, bw if n > 1 else bh):
        raise ValueError(f"overlap {overlap} must be smaller than the chunk size {bh}x{bw}")
    if m == 1 and n == 1:
        overlap_eff = 0
    else:
        overlap_eff = overlap
    rspans, roffs = _axis_windows(height, m, overlap_eff if m > 1 else 0)
    cspans, coffs = _axis_windows(width, n, overlap_eff if n > 1 else 0)
    sources, crops = [], []
    for i in range(m):
        for j in range(n):
            sources.append(Window(rspans[i][0], cspans[j][0], rspans[i][1], cspans[j][1]))
            crops.append(Window(roffs[i], coffs[j], bh, bw))
    return ChunkPlan(height, width, m, n, overlap, tuple(sources), tuple(crops))


def extract(pair: np.ndarray, plan: ChunkPlan) -> np.ndarray:
    """Stack chunk windows of an ``H x W x C`` array into ``MN x h x w x C`` (copied)."""
    if pair.shape[:2] != (plan.height, plan.width):
        raise ValueError(f"array is {pair.shape[0]}x{pair.shape[1]} but plan expects {plan.height}x{plan.width}")
    return np.stack([pair[s.rows, s.cols].copy() for s in plan.sources])


def reassemble(outputs: np.ndarray, plan: ChunkPlan) -> np.ndarray:
    """Crop each chunk output to its base tile and place it into an ``H x W x C`` array."""
    if len(outputs) != plan.count:
        raise ValueError(f"expected {plan.count} chunk outputs, got {len(outputs)}")
    if tuple(outputs.shape[1:3]) != plan.chunk_shape:
        raise ValueError(f"chunk outputs are {outputs.shape[1:3]} but plan expects {plan.chunk_shape}")
    full = np.empty((plan.height, plan.width) + outputs.shape[3:], dtype=outputs.dtype)
    for k, crop in enumerate(plan.crops):
        dst = plan.destination(k)
        full[dst.rows, dst.cols] = outputs[k, crop.rows, crop.cols]
    return full


def coverage(plan: ChunkPlan) -> np.ndarray:
    """How many chunks write each output pixel (1 everywhere for a valid plan)."""
    counts = np.zeros((plan.height, plan.width), dtype=np.int32)
    for k in range(plan.count):
        dst = plan.destination(k)
        counts[dst.rows, dst.cols] += 1
    return counts


def seam_mask(plan: ChunkPlan, band: int) -> np.ndarray:
    """Pixels within ``band`` of an internal chunk boundary."""
    mask = np.zeros((plan.height, plan.width), dtype=bool)
    bh, bw = plan.height // plan.m, plan.width // plan.n
    for i in range(1, plan.m):
        mask[max(0, i * bh - band):i * bh + band] = True
    for j in range(1, plan.n):
        mask[:, max(0, j * bw - band):j * bw + band] = True
    return mask


def chunked_infer(pair: np.ndarray, plan: ChunkPlan, model_fn: Callable[[np.ndarray], np.ndarray]):
    """extract -> ``model_fn`` on the chunk batch -> reassemble.

    ``model_fn`` maps a channels-last batch to a channels-last batch of the
    same spatial size. Returns ``(flow, seconds)`` where seconds covers the
    whole call.
    """
    t0 = time.perf_counter()
    chunks = extract(pair, plan)
    out = np.asarray(model_fn(chunks))
    flow = reassemble(out, plan)
    return flow, time.perf_counter() - t0
