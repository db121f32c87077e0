"""Synthetic image pairs with exact translational ground-truth flow.

Every layer (background and objects) carries its own smooth texture that is
sampled at ``x - t * velocity`` for frame ``t`` in {0, 1}. The flow of a pixel
is the velocity of the topmost layer covering it in frame 1, so occluded
background pixels inherit the occluder's motion.

Per-frame noise is uniform in ``[-noise/2, noise/2]``, which bounds the
difference between warped frames by ``noise``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import flo_write, read_image, flo_read, stack_pair, to_uint8, write_image

log = logging.getLogger(__name__)

SHAPES = ("disc", "rectangle")


class SceneError(ValueError):
    pass


@dataclass
class SceneObject:
    shape: str
    size: float  # disc radius / rectangle half-height, px
    position: tuple[float, float]  # (row, col) of the centre in frame 1
    velocity: tuple[float, float]  # (u, v) px/frame
    aspect: float = 1.0  # rectangle half-width / half-height
    texture_seed: int = 0

    def half_extent(self) -> tuple[float, float]:
        if self.shape == "disc":
            return self.size, self.size
        return self.size, self.size * self.aspect

    def footprint(self, rows: np.ndarray, cols: np.ndarray, t: float = 0.0) -> np.ndarray:
        cy = self.position[0] + t * self.velocity[1]
        cx = self.position[1] + t * self.velocity[0]
        dy, dx = rows - cy, cols - cx
        if self.shape == "disc":
            return dy * dy + dx * dx <= self.size * self.size
        hh, hw = self.half_extent()
        return (np.abs(dy) <= hh) & (np.abs(dx) <= hw)


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 128
    background_seed: int = 0
    objects: list[SceneObject] = field(default_factory=list)
    background_velocity: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.0
    max_flow: float = 8.0
    channels: int = 3

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise SceneError(f"canvas {self.height}x{self.width} is smaller than 8x8")
        speeds = [np.hypot(*self.background_velocity)] + [np.hypot(*o.velocity) for o in self.objects]
        for i, s in enumerate(speeds):
            if s > self.max_flow + 1e-9:
                what = "background" if i == 0 else f"object {i - 1}"
                raise SceneError(f"{what} speed {s:.3f} exceeds max flow {self.max_flow}")
        for i, o in enumerate(self.objects):
            if o.shape not in SHAPES:
                raise SceneError(f"object {i}: unknown shape {o.shape!r}")
            if o.size <= 0:
                raise SceneError(f"object {i}: size must be positive")
            hh, hw = o.half_extent()
            for t in (0.0, 1.0):
                cy = o.position[0] + t * o.velocity[1]
                cx = o.position[1] + t * o.velocity[0]
                if cy - hh < 0 or cy + hh > self.height - 1 or cx - hw < 0 or cx + hw > self.width - 1:
                    raise SceneError(f"object {i} leaves the canvas in frame {int(t) + 1}")


# ---------------------------------------------------------------------------
# textures

# bilinear resampling error is bounded by max|f_xx + f_yy| / 8; this budget on
# sum(a * |k|^2) keeps it under ~1.8/255 so warped frames agree to 2/255
CURVATURE_BUDGET = 8 * 1.8 / 255
AMPLITUDE_CAP = 0.42


@dataclass
class Texture:
    """Sum of random plane waves per channel, evaluated at continuous positions."""

    freqs: np.ndarray  # channels x modes x 2, rad/px in (row, col)
    phases: np.ndarray  # channels x modes
    amps: np.ndarray  # channels x modes
    tint: np.ndarray  # channels

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int = 3, modes: int = 24,
               k_min: float = 0.15, k_max: float = 0.8, tint=None) -> "Texture":
        k = rng.uniform(k_min, k_max, (channels, modes))
        ang = rng.uniform(0, 2 * np.pi, (channels, modes))
        freqs = np.stack([k * np.sin(ang), k * np.cos(ang)], -1)
        phases = rng.uniform(0, 2 * np.pi, (channels, modes))
        amps = rng.uniform(0.5, 1.5, (channels, modes)) / k**2
        scale = np.minimum(CURVATURE_BUDGET / (amps * k**2).sum(1), AMPLITUDE_CAP / amps.sum(1))
        amps = amps * scale[:, None]
        tint = np.full(channels, 0.5) if tint is None else np.asarray(tint, dtype=float)
        return cls(freqs, phases, amps, tint)

    def __call__(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        out = np.empty(rows.shape + (len(self.tint),))
        for c in range(len(self.tint)):
            arg = rows[..., None] * self.freqs[c, :, 0] + cols[..., None] * self.freqs[c, :, 1] + self.phases[c]
            out[..., c] = self.tint[c] + (self.amps[c] * np.cos(arg)).sum(-1)
        return np.clip(out, 0.0, 1.0)


def _render(spec: SceneSpec, textures, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Render frame ``t``; returns (image, layer index map with -1 for background)."""
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = spec.background_velocity
    img = textures[0](rows - t * v, cols - t * u)
    layer = np.full((h, w), -1, dtype=np.int32)
    for k, obj in enumerate(spec.objects):
        fp = obj.footprint(rows, cols, t)
        if not fp.any():
            continue
        r = rows[fp] - (obj.position[0] + t * obj.velocity[1])
        c = cols[fp] - (obj.position[1] + t * obj.velocity[0])
        img[fp] = textures[k + 1](r, c)
        layer[fp] = k
    return img, layer


def _textures(spec: SceneSpec, rng: np.random.Generator) -> list[Texture]:
    out = [Texture.random(np.random.default_rng([spec.background_seed, int(rng.integers(2**31))]), spec.channels)]
    for obj in spec.objects:
        orng = np.random.default_rng([obj.texture_seed, int(rng.integers(2**31))])
        tint = orng.uniform(0.25, 0.75, spec.channels)
        out.append(Texture.random(orng, spec.channels, tint=tint))
    return out


def layer_flow(spec: SceneSpec, layer: np.ndarray) -> np.ndarray:
    flow = np.empty(layer.shape + (2,), dtype=np.float32)
    flow[...] = spec.background_velocity
    for k, obj in enumerate(spec.objects):
        flow[layer == k] = obj.velocity
    return flow


def gen_translation_sample(seed: int, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a pair (``H x W x 2C`` in [0, 1]) and its exact flow (``H x W x 2``)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    textures = _textures(spec, rng)
    f1, layer = _render(spec, textures, 0.0)
    f2, _ = _render(spec, textures, 1.0)
    if spec.noise > 0:
        half = spec.noise / 2
        f1 = np.clip(f1 + rng.uniform(-half, half, f1.shape), 0, 1)
        f2 = np.clip(f2 + rng.uniform(-half, half, f2.shape), 0, 1)
    return stack_pair(f1.astype(np.float32), f2.astype(np.float32)), layer_flow(spec, layer)


def foreground_mask(spec: SceneSpec) -> np.ndarray:
    rows, cols = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for obj in spec.objects:
        mask |= obj.footprint(rows, cols, 0.0)
    return mask


# ---------------------------------------------------------------------------
# ball-at-the-seam scenario


def ball_spec(radius_px: float, center_on_seam: bool = True, ball_speed_px: float = 4.0,
              height: int = 480, width: int = 352, seed: int = 0) -> SceneSpec:
    if radius_px < 2:
        raise SceneError(f"ball radius must be >= 2 px, got {radius_px}")
    if center_on_seam:
        # pixel i covers [i, i+1); this centre lies exactly on the 2x2 seams
        centre = (height / 2 - 0.5, width / 2 - 0.5)
    else:
        centre = (height / 4 - 0.5, width / 4 - 0.5)
    ball = SceneObject("disc", float(radius_px), centre, (float(ball_speed_px), 0.0), texture_seed=seed)
    spec = SceneSpec(height, width, seed, [ball], (0.0, 0.0), 0.0, max(8.0, float(ball_speed_px)))
    try:
        spec.validate()
    except SceneError as exc:
        raise SceneError(f"ball of radius {radius_px} does not fit a {height}x{width} canvas: {exc}") from None
    return spec


def gen_ball_scene(radius_px: float, center_on_seam: bool = True, ball_speed_px: float = 4.0,
                   height: int = 480, width: int = 352, seed: int = 0):
    """Stationary textured background with one textured disc moving right.

    Returns ``(pair, flow, mask)`` where mask is the disc footprint in frame 1.
    """
    spec = ball_spec(radius_px, center_on_seam, ball_speed_px, height, width, seed)
    pair, flow = gen_translation_sample(seed, spec)
    return pair, flow, foreground_mask(spec)


def ball_radius_sweep(count: int = 6, r_max: float = 32.0, r_min: float = 4.0) -> list[float]:
    """Strictly decreasing radii, geometric spacing (ball receding from the camera)."""
    if count < 1:
        return []
    if count == 1:
        return [float(r_max)]
    return [float(r) for r in np.round(np.geomspace(r_max, r_min, count), 2)]


# ---------------------------------------------------------------------------
# random scenes and datasets


@dataclass
class SceneDistribution:
    height: int = 96
    width: int = 128
    max_flow: float = 8.0
    max_background_flow: float = 4.0
    static_background_prob: float = 0.3
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 5.0
    max_size: float = 24.0
    noise: float = 0.01
    channels: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


def _velocity(rng: np.random.Generator, vmax: float) -> tuple[float, float]:
    r = vmax * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return float(r * np.cos(a)), float(r * np.sin(a))


def sample_scene(rng: np.random.Generator, dist: SceneDistribution) -> SceneSpec:
    bg = (0.0, 0.0) if rng.uniform() < dist.static_background_prob else _velocity(rng, dist.max_background_flow)
    objects = []
    n = int(rng.integers(dist.min_objects, dist.max_objects + 1))
    for _ in range(n):
        for _attempt in range(50):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            size = float(rng.uniform(dist.min_size, dist.max_size))
            aspect = float(rng.uniform(0.5, 2.0)) if shape == "rectangle" else 1.0
            vel = _velocity(rng, dist.max_flow)
            hh, hw = (size, size) if shape == "disc" else (size, size * aspect)
            lo_y = hh + max(0.0, -vel[1])
            hi_y = dist.height - 1 - hh - max(0.0, vel[1])
            lo_x = hw + max(0.0, -vel[0])
            hi_x = dist.width - 1 - hw - max(0.0, vel[0])
            if lo_y < hi_y and lo_x < hi_x:
                pos = (float(rng.uniform(lo_y, hi_y)), float(rng.uniform(lo_x, hi_x)))
                objects.append(SceneObject(shape, size, pos, vel, aspect, int(rng.integers(2**31))))
                break
    return SceneSpec(dist.height, dist.width, int(rng.integers(2**31)), objects, bg,
                     dist.noise, dist.max_flow, dist.channels)


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def random_sample(seed: int, dist: SceneDistribution):
    """One random scene from ``dist``: ``(pair, flow, mask)``."""
    rng = np.random.default_rng(seed)
    spec = sample_scene(rng, dist)
    pair, flow = gen_translation_sample(int(rng.integers(2**31)), spec)
    return pair, flow, foreground_mask(spec)


def synth_arrays(count: int, dist: SceneDistribution | None = None, master_seed: int = 0):
    """In-memory dataset: uint8 pairs ``count x H x W x 2C`` and float32 flows.

    Frames go through the same 8-bit rounding as files written by
    :func:`gen_dataset`, so both paths yield identical training data.
    """
    dist = dist or SceneDistribution()
    pairs = np.empty((count, dist.height, dist.width, 2 * dist.channels), dtype=np.uint8)
    flows = np.empty((count, dist.height, dist.width, 2), dtype=np.float32)
    for i in range(count):
        pair, flow, _ = random_sample(sample_seed(master_seed, i), dist)
        pairs[i] = to_uint8(pair)
        flows[i] = flow
    return pairs, flows


MANIFEST_NAME = "manifest.txt"


def gen_dataset(count: int, out_dir, dist: SceneDistribution | None = None, master_seed: int = 0) -> Path:
    """Write PNG pairs, ``.flo`` ground truth, masks and a manifest; returns the manifest path."""
    dist = dist or SceneDistribution()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    lines = [
        f"# master_seed={int(master_seed)}",
        f"# distribution={json.dumps(dist.to_dict(), sort_keys=True)}",
        "# index, seed, img1, img2, flo, mask",
    ]
    for i in range(count):
        seed = sample_seed(master_seed, i)
        pair, flow, mask = random_sample(seed, dist)
        names = [f"{i:06d}_img1.png", f"{i:06d}_img2.png", f"{i:06d}_flow.flo", f"{i:06d}_mask.png"]
        c = dist.channels
        try:
            write_image(pair[..., :c], out / names[0])
            write_image(pair[..., c:], out / names[1])
            flo_write(flow, out / names[2])
            write_image(mask[..., None].astype(np.float32), out / names[3])
        except OSError as exc:
            raise OSError(f"failed writing sample {i} under {out}: {exc}") from exc
        lines.append(", ".join([str(i), str(seed)] + names))
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    log.info("wrote %d samples to %s", count, out)
    return manifest


@dataclass
class ManifestRecord:
    index: int
    seed: int
    img1: str
    img2: str
    flo: str
    mask: str | None = None


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def read_manifest(path) -> tuple[dict, list[ManifestRecord]]:
    path = _manifest_path(path)
    header: dict = {}
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = val.strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (5, 6):
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        records.append(ManifestRecord(int(parts[0]), int(parts[1]), *parts[2:]))
    return header, records


def regenerate(manifest_path, out_dir) -> Path:
    """Rebuild a dataset from the header of an existing manifest."""
    header, records = read_manifest(manifest_path)
    dist = SceneDistribution(**json.loads(header["distribution"]))
    return gen_dataset(len(records), out_dir, dist, int(header["master_seed"]))


def load_dataset(manifest_path) -> tuple[np.ndarray, np.ndarray]:
    """Load a manifest's samples (or a dataset directory) as uint8 pairs and float32 flows."""
    manifest_path = _manifest_path(manifest_path)
    root = manifest_path.parent
    _, records = read_manifest(manifest_path)
    pairs, flows = [], []
    for r in records:
        f1 = read_image(root / r.img1)
        f2 = read_image(root / r.img2)
        pairs.append(to_uint8(np.concatenate([f1, f2], -1)))
        flows.append(flo_read(root / r.flo))
    if not records:
        return np.empty((0,), np.uint8), np.empty((0,), np.float32)
    return np.stack(pairs), np.stack(flows)


def load_masks(manifest_path) -> list[np.ndarray] | None:
    """Boolean obstacle masks listed in a manifest, or None when it has none."""
    manifest_path = _manifest_path(manifest_path)
    _, records = read_manifest(manifest_path)
    if not records or any(r.mask is None for r in records):
        return None
    return [read_image(manifest_path.parent / r.mask)[..., 0] > 0.5 for r in records]
