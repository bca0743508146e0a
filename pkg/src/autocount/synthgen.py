"""Synthetic field scenes with known organ instances.

Blobs (discs, ellipses, rings, clumps of touching discs, or bridged disc
pairs) are scattered over a textured background, rendered with anti-aliased
edges by sub-pixel supersampling, then perturbed with Gaussian noise.  The
ground truth is an instance label map in which each pixel belongs to the
blob that covers at least half of it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .types import Image, save_image, save_label_map

SHAPES = ("disc", "ellipse", "ring", "clump", "dumbbell")
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    width: int = 160
    height: int = 160
    count_min: int = 20
    count_max: int = 60
    shape: str = "disc"
    radius_mean: float = 5.0
    radius_sd: float = 0.6
    # pale tan organs on a green-brown canopy
    fg_color: tuple = (0.85, 0.75, 0.55)
    bg_color: tuple = (0.25, 0.35, 0.15)
    color_jitter: float = 0.04
    bg_texture: float = 0.05
    noise_sd: float = 0.02
    min_gap: float = 2.0  # minimum background gap between neighbouring blobs
    ring_inner: float = 0.55  # inner/outer radius ratio for rings
    clump_size: int = 3
    bridge_width: float = 2.0  # dumbbell connector thickness
    pair_fraction: float = 0.15  # share of dumbbell-scene blobs that are bridged pairs (at least one)
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown blob shape {self.shape!r}; expected one of {SHAPES}")
        if self.radius_mean <= 0 or self.radius_sd < 0:
            raise ValueError("radius distribution must have positive mean and non-negative sd")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError("blob count range must satisfy 0 <= min <= max")
        object.__setattr__(self, "fg_color", tuple(float(c) for c in self.fg_color))
        object.__setattr__(self, "bg_color", tuple(float(c) for c in self.bg_color))

    def replace(self, **changes) -> "SceneSpec":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SceneSpec(**values)


@dataclass
class Scene:
    image: Image
    truth: np.ndarray  # instance labels, 0 = background
    count: int
    radii: list = field(default_factory=list)


def _sample_radius(spec, rng):
    for _ in range(1000):
        r = rng.normal(spec.radius_mean, spec.radius_sd)
        if r > 0.5:
            return float(r)
    return float(spec.radius_mean)


def _parts(spec, rng, r, paired=False):
    """Sub-discs/primitives making up one blob, relative to its centre.

    Each part is (kind, dy, dx, params); returns the parts and the blob's
    bounding radius.
    """
    if spec.shape == "disc":
        return [("disc", 0.0, 0.0, (r,))], r
    if spec.shape == "ring":
        return [("ring", 0.0, 0.0, (r, r * spec.ring_inner))], r
    if spec.shape == "ellipse":
        ratio = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, math.pi)
        a = r / math.sqrt(ratio)
        return [("ellipse", 0.0, 0.0, (a, a * ratio, theta))], a
    if spec.shape == "clump":
        k = spec.clump_size
        phase = rng.uniform(0, 2 * math.pi)
        spread = r * 1.1 if k > 1 else 0.0
        parts = []
        for i in range(k):
            ang = phase + 2 * math.pi * i / k
            parts.append(("disc", spread * math.sin(ang), spread * math.cos(ang), (r,)))
        return parts, spread + r
    # dumbbell: two discs, centres 2r + gap apart, joined by a bridge
    if not paired:
        return [("disc", 0.0, 0.0, (r,))], r
    theta = rng.uniform(0, math.pi)
    half = r + max(spec.min_gap, 1.0) / 2 + 1.0
    dy, dx = half * math.sin(theta), half * math.cos(theta)
    return [("disc", dy, dx, (r,)), ("disc", -dy, -dx, (r,)),
            ("bridge", 0.0, 0.0, (dy, dx, spec.bridge_width / 2))], half + r


def _coverage(kind, params, yy, xx):
    if kind == "disc":
        return yy ** 2 + xx ** 2 <= params[0] ** 2
    if kind == "ring":
        d2 = yy ** 2 + xx ** 2
        return (d2 <= params[0] ** 2) & (d2 >= params[1] ** 2)
    if kind == "ellipse":
        a, b, t = params
        u = xx * math.cos(t) + yy * math.sin(t)
        v = -xx * math.sin(t) + yy * math.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # bridge: segment from -(dy, dx) to (dy, dx) with half-thickness params[2]
    dy, dx, hw = params
    length = math.hypot(dy, dx)
    uy, ux = dy / length, dx / length
    along = yy * uy + xx * ux
    across = np.abs(-yy * ux + xx * uy)
    return (np.abs(along) <= length) & (across <= hw)


def _render_blob(parts, cy, cx, extent, h, w):
    """Return (slice, per-part coverage fractions) over the blob's bounding box."""
    y0, y1 = max(int(math.floor(cy - extent)) - 1, 0), min(int(math.ceil(cy + extent)) + 2, h)
    x0, x1 = max(int(math.floor(cx - extent)) - 1, 0), min(int(math.ceil(cx + extent)) + 2, w)
    n = _SUPERSAMPLE
    offs = (np.arange(n) + 0.5) / n - 0.5
    sy = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    sx = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    covs = []
    for kind, dy, dx, params in parts:
        yy = (sy - cy - dy)[:, None]
        xx = (sx - cx - dx)[None, :]
        inside = _coverage(kind, params, yy, xx).astype(np.float64)
        cov = inside.reshape(y1 - y0, n, x1 - x0, n).mean(axis=(1, 3))
        covs.append(cov)
    return (slice(y0, y1), slice(x0, x1)), covs


def _place(spec, rng, count):
    h, w = spec.height, spec.width
    placed = []
    n_pairs = 0
    if spec.shape == "dumbbell" and count:
        n_pairs = min(count, max(1, int(round(spec.pair_fraction * count))))
    for i in range(count):
        # size and shape are drawn once; only the position is retried, so
        # crowding does not bias the size distribution toward small blobs
        r = _sample_radius(spec, rng)
        parts, extent = _parts(spec, rng, r, paired=i < n_pairs)
        margin = min(extent, min(h, w) / 2)
        for _attempt in range(2000):
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            if all(math.hypot(cy - py, cx - px) >= extent + pe + spec.min_gap
                   for py, px, pe, _, _ in placed):
                placed.append((cy, cx, extent, parts, r))
                break
        else:
            return None
    return placed


def generate(spec: SceneSpec) -> Scene:
    """Render one scene; deterministic for a given ``spec`` (including seed)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    placed = _place(spec, rng, count)
    if placed is None:
        raise ValueError(
            f"cannot place {count} {spec.shape} blobs in a {w}x{h} scene with "
            f"gap {spec.min_gap}; enlarge the scene or reduce the count/radius"
        )

    bg = np.asarray(spec.bg_color)[:, None, None] * np.ones((3, h, w))
    texture = ndi.gaussian_filter(rng.normal(0, 1, (h, w)), 3.0)
    texture /= max(texture.std(), 1e-12)
    bg = bg + spec.bg_texture * texture[None]

    alpha = np.zeros((h, w))
    fg = np.zeros((3, h, w))
    truth = np.zeros((h, w), dtype=np.int32)
    best_cov = np.zeros((h, w))
    next_id = 1
    radii = []
    for cy, cx, extent, parts, r in placed:
        sl, covs = _render_blob(parts, cy, cx, extent, h, w)
        colour = np.asarray(spec.fg_color) + rng.normal(0, spec.color_jitter, 3)
        union = np.clip(np.sum(covs, axis=0), 0, 1) if len(covs) > 1 else covs[0]
        a = alpha[sl]
        alpha[sl] = np.maximum(a, union)
        fg[(slice(None),) + sl] += colour[:, None, None] * union[None]
        # one instance per disc; bridges go to the nearer disc
        instance_parts = [c for (kind, *_), c in zip(parts, covs) if kind != "bridge"]
        bridge = [c for (kind, *_), c in zip(parts, covs) if kind == "bridge"]
        ids = []
        for cov in instance_parts:
            ids.append(next_id)
            radii.append(r)
            next_id += 1
        stack = np.stack(instance_parts)
        owner = np.argmax(stack, axis=0)
        own_cov = np.max(stack, axis=0)
        if bridge:
            total = np.clip(own_cov + bridge[0], 0, 1)
            # nearest disc centre owns the connector pixels
            yy, xx = np.mgrid[sl]
            d = [np.hypot(yy - cy - dy, xx - cx - dx) for kind, dy, dx, _ in parts if kind != "bridge"]
            owner = np.where(own_cov > 0, owner, np.argmin(np.stack(d), axis=0))
            own_cov = total
        sub_truth = truth[sl]
        sub_best = best_cov[sl]
        claim = (own_cov >= 0.5) & (own_cov > sub_best)
        sub_truth[claim] = np.asarray(ids)[owner[claim]]
        sub_best[claim] = own_cov[claim]

    colour_fg = np.where(alpha[None] > 0, fg / np.maximum(alpha, 1e-12)[None], 0.0)
    img = bg * (1 - alpha[None]) + colour_fg * alpha[None]
    img = img + rng.normal(0, spec.noise_sd, img.shape)
    img = np.clip(img, 0.0, 1.0)
    n_regions = int(np.count_nonzero(np.unique(truth)))
    return Scene(Image(img.astype(np.float32)), truth, n_regions, radii)


def write_dataset(spec: SceneSpec, out_dir, n_images: int) -> list:
    """Generate ``n_images`` scenes with seeds ``spec.seed + i``.

    Writes ``img_XXXX.png``, ``truth/img_XXXX.png`` and ``truth.csv``
    (filename,count) under ``out_dir``; returns the (filename, count) rows.
    """
    out = Path(out_dir)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_images):
        scene = generate(spec.replace(seed=spec.seed + i))
        name = f"img_{i:04d}.png"
        save_image(scene.image, out / name)
        save_label_map(scene.truth, out / "truth" / name)
        rows.append((name, scene.count))
    with open(out / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "count"])
        writer.writerows(rows)
    return rows
