"""Core array conventions, flow/image file I/O and the bilinear resize operator.

In-memory layout is channels-last numpy:

* image       ``H x W x C`` float, values in [0, 1], C in {1, 3}
* image pair  ``H x W x 2C`` (frame 1 channels followed by frame 2 channels)
* flow field  ``H x W x 2`` float, (u, v) in pixels/frame
* uncertainty ``H x W x 1`` float, log-uncertainty
* mask        ``H x W`` bool

Batched variants prepend a batch axis. Torch tensors inside the network use
``N x C x H x W``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

FLO_MAGIC = b"PIEH"
MIN_SIDE = 8


class FloFormatError(ValueError):
    """Malformed ``.flo`` file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# validation helpers


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3:
        raise ValueError(f"image must be H x W x C, got shape {img.shape}")
    h, w, c = img.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if c not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def check_flow(flow: np.ndarray) -> np.ndarray:
    if flow.ndim < 3 or flow.shape[-1] != 2:
        raise ValueError(f"flow must be ... x H x W x 2, got shape {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


def stack_pair(frame1: np.ndarray, frame2: np.ndarray) -> np.ndarray:
    """Concatenate two frames along channels into an ``H x W x 2C`` pair."""
    check_image(frame1)
    check_image(frame2)
    if frame1.shape != frame2.shape:
        raise ValueError(f"frames differ in shape: {frame1.shape} vs {frame2.shape}")
    return np.concatenate([frame1, frame2], axis=-1)


def split_pair(pair: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pair.shape[-1] // 2
    return pair[..., :c], pair[..., c:]


# ---------------------------------------------------------------------------
# .flo files


def flo_write(flow: np.ndarray, path: str | os.PathLike) -> None:
    flow = check_flow(np.asarray(flow))
    if flow.ndim != 3:
        raise ValueError(f"flo_write expects a single H x W x 2 field, got {flow.shape}")
    h, w, _ = flow.shape
    payload = np.ascontiguousarray(flow, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(payload.tobytes())


def flo_read(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FloFormatError("truncated magic", len(data))
    if data[:4] != FLO_MAGIC:
        raise FloFormatError(f"bad magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise FloFormatError("truncated header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if w <= 0 or h <= 0:
        raise FloFormatError(f"invalid dimensions {w}x{h}", 4)
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FloFormatError(f"truncated payload, expected {expected} bytes", len(data))
    if len(data) > expected:
        raise FloFormatError("trailing bytes after payload", expected)
    flow = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12)
    return flow.reshape(h, w, 2).astype(np.float32)


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] image as 8-bit PNG or binary PPM/PGM (chosen by suffix)."""
    arr = to_uint8(check_image(np.asarray(img)))
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path)


def read_image(path: str | os.PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# resize


def _resize_nchw(x: torch.Tensor, out_h: int, out_w: int, scale_flow_values: bool) -> torch.Tensor:
    in_h, in_w = x.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return x
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=True)
    if scale_flow_values:
        if y.shape[1] != 2:
            raise ValueError("flow-value scaling needs a 2-channel field")
        factors = torch.tensor([out_w / in_w, out_h / in_h], dtype=y.dtype, device=y.device)
        y = y * factors.view(1, 2, 1, 1)
    return y


def resize_bilinear(x, out_h: int, out_w: int, scale_flow_values: bool = False):
    """Corner-aligned bilinear resize.

    Accepts a torch tensor in ``N x C x H x W`` (differentiable, returned as a
    tensor) or a channels-last numpy array ``H x W x C`` / ``B x H x W x C``.
    With ``scale_flow_values`` the u channel is multiplied by ``out_w / in_w``
    and v by ``out_h / in_h``.
    """
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    out_h, out_w = int(out_h), int(out_w)
    if isinstance(x, torch.Tensor):
        if x.ndim != 4:
            raise ValueError(f"tensor input must be N x C x H x W, got {tuple(x.shape)}")
        return _resize_nchw(x, out_h, out_w, scale_flow_values)

    arr = np.asarray(x)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"array input must be H x W x C or B x H x W x C, got {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).permute(0, 3, 1, 2)
    out = _resize_nchw(t, out_h, out_w, scale_flow_values).permute(0, 2, 3, 1).numpy()
    out = out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# layout conversion


def nhwc_to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(0, 3, 1, 2).contiguous()


def tensor_to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()
