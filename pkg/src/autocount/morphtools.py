"""Binary-image primitives: blur, disc morphology, components, EDT, markers, watershed.

Everything here takes and returns plain 2-D numpy arrays (typed rasters from
:mod:`autocount.types` are accepted too).  Connectivity is 8 throughout.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage as ndi
from skimage.segmentation import watershed as _sk_watershed

EIGHT = np.ones((3, 3), dtype=bool)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_blur(values, sigma: float) -> np.ndarray:
    """Separable Gaussian with radius ``ceil(3*sigma)`` and reflected edges."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    w = gaussian_kernel1d(sigma)
    out = ndi.correlate1d(arr, w, axis=0, mode="reflect")
    return ndi.correlate1d(out, w, axis=1, mode="reflect")


def disc_offsets(diameter: int) -> np.ndarray:
    """(dy, dx) offsets of an odd-diameter disc: dy**2 + dx**2 <= ((diameter - 1) / 2)**2."""
    if diameter < 1 or diameter % 2 == 0:
        raise ValueError(f"disc diameter must be odd and >= 1, got {diameter}")
    r = (diameter - 1) // 2
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def disc(diameter: int) -> np.ndarray:
    """Boolean footprint of :func:`disc_offsets`."""
    off = disc_offsets(diameter)
    r = (diameter - 1) // 2
    fp = np.zeros((diameter, diameter), dtype=bool)
    fp[off[:, 0] + r, off[:, 1] + r] = True
    return fp


def dilate(mask, diameter: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if diameter == 1:
        return m.copy()
    return ndi.binary_dilation(m, structure=disc(diameter))


def erode(mask, diameter: int) -> np.ndarray:
    # border_value=0: pixels outside the image count as background
    m = np.asarray(mask, dtype=bool)
    if diameter == 1:
        return m.copy()
    return ndi.binary_erosion(m, structure=disc(diameter), border_value=0)


def connected_components(mask) -> tuple[np.ndarray, np.ndarray]:
    """Label 8-connected foreground regions 1..R; return (labels, areas)."""
    labels, n = ndi.label(np.asarray(mask, dtype=bool), structure=EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels.astype(np.int32), sizes.astype(np.int64)


def remove_small(labels, sizes, min_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Drop components with area strictly below ``min_size``; relabel the rest 1..R'."""
    if min_size < 0:
        raise ValueError("min_size must be >= 0")
    labels = np.asarray(labels)
    sizes = np.asarray(sizes)
    keep = sizes >= min_size
    remap = np.zeros(sizes.size + 1, dtype=np.int32)
    remap[1:][keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    new = remap[labels]
    return new > 0, new


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel.

    Background pixels are 0.  If the mask has no background at all the
    image border is treated as background.
    """
    m = np.asarray(mask, dtype=bool)
    if m.all():
        padded = np.pad(m, 1, constant_values=False)
        return ndi.distance_transform_edt(padded)[1:-1, 1:-1]
    return ndi.distance_transform_edt(m)


def local_maxima(dist, min_distance: float) -> np.ndarray:
    """Watershed markers: plateau-collapsed 8-neighbour maxima, greedily thinned.

    Candidates are foreground pixels no smaller than any of their 8
    neighbours, nor than any pixel closer than ``min_distance``; the window
    test drops the shallow ridge maxima that form along thin connectors.  Each connected plateau of candidates is represented by its
    lexicographically smallest (row, col).  Candidates are then visited in
    descending value (ties in row-major order) and discarded if they lie
    closer than ``min_distance`` to an already accepted marker.

    Returns
    -------
    ndarray of shape (K, 2), integer (row, col) coordinates.
    """
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    d = np.asarray(dist, dtype=np.float64)
    fg = d > 0
    if not fg.any():
        return np.zeros((0, 2), dtype=np.int64)
    nbr_max = ndi.maximum_filter(d, footprint=EIGHT, mode="constant", cval=0.0)
    cand = fg & (d >= nbr_max)
    cand[cand] = _dominant(d, np.argwhere(cand), min_distance)
    plateaus, n = ndi.label(cand, structure=EIGHT)
    flat = plateaus.ravel()
    idx = np.flatnonzero(flat)
    # first occurrence in row-major order is the lexicographic minimum
    _, first = np.unique(flat[idx], return_index=True)
    reps = idx[first]
    vals = d.ravel()[reps]
    order = np.lexsort((reps, -vals))
    reps = reps[order]
    rows, cols = np.divmod(reps, d.shape[1])
    pts = np.stack([rows, cols], axis=1).astype(np.int64)

    accepted = []
    min_d2 = float(min_distance) ** 2
    acc = np.empty((len(pts), 2), dtype=np.float64)
    for p in pts:
        k = len(accepted)
        if k:
            diff = acc[:k] - p
            if np.min(diff[:, 0] ** 2 + diff[:, 1] ** 2) < min_d2:
                continue
        acc[k] = p
        accepted.append(p)
    if not accepted:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(accepted, dtype=np.int64)


def _dominant(d, pts, radius):
    """For each point, whether no pixel closer than ``radius`` has a larger value."""
    reach = int(math.ceil(radius)) - 1
    yy, xx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    keep = yy ** 2 + xx ** 2 < float(radius) ** 2
    off = np.stack([yy[keep], xx[keep]], axis=1)
    h, w = d.shape
    out = np.empty(len(pts), dtype=bool)
    for start in range(0, len(pts), 256):
        p = pts[start:start + 256]
        y = p[:, None, 0] + off[None, :, 0]
        x = p[:, None, 1] + off[None, :, 1]
        inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
        vals = np.where(inside, d[np.clip(y, 0, h - 1), np.clip(x, 0, w - 1)], 0.0)
        out[start:start + 256] = d[p[:, 0], p[:, 1]] >= vals.max(axis=1)
    return out


def watershed(dist, markers, mask) -> np.ndarray:
    """Marker-seeded priority flood on ``-dist`` restricted to ``mask``.

    Equal elevations are processed first-in first-out.  Regions are returned
    relabelled 1..R in marker order with starved markers dropped.
    """
    d = np.asarray(dist, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    pts = np.asarray(markers, dtype=np.int64).reshape(-1, 2)
    seeds = np.zeros(m.shape, dtype=np.int32)
    if len(pts):
        if not m[pts[:, 0], pts[:, 1]].all():
            bad = pts[~m[pts[:, 0], pts[:, 1]]][0]
            raise ValueError(f"marker at {tuple(int(v) for v in bad)} lies on background")
        seeds[pts[:, 0], pts[:, 1]] = np.arange(1, len(pts) + 1, dtype=np.int32)
    else:
        return np.zeros(m.shape, dtype=np.int32)
    flooded = _sk_watershed(-d, markers=seeds, mask=m, connectivity=2)
    present = np.zeros(len(pts) + 1, dtype=bool)
    present[np.unique(flooded)] = True
    present[0] = False
    remap = np.zeros(len(pts) + 1, dtype=np.int32)
    remap[present] = np.arange(1, int(present.sum()) + 1, dtype=np.int32)
    return remap[flooded]


def instance_segment(mask, min_size: int, min_distance: float) -> np.ndarray:
    """Small-object removal, distance transform, markers and watershed in one call."""
    labels, sizes = connected_components(mask)
    kept, _ = remove_small(labels, sizes, min_size)
    dist = distance_transform(kept)
    markers = local_maxima(dist, min_distance)
    return watershed(dist, markers, kept)


def region_sizes(instance_labels) -> np.ndarray:
    lab = np.asarray(instance_labels)
    return np.bincount(lab.ravel())[1:].astype(np.int64)
