"""SLIC superpixels: localized k-means in joint CIELAB + image-plane space."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from skimage.color import rgb2lab
from skimage.measure import label as label_regions

log = logging.getLogger(__name__)

FOUR = ndi.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 1000
    compactness: float = 10.0
    max_iterations: int = 10
    enforce_connectivity: bool = True

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _initial_centers(lab, step):
    h, w = lab.shape[:2]
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    cy, cx = (a.ravel() for a in np.meshgrid(ys, xs, indexing="ij"))

    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    grad = (
        ((padded[2:, 1:-1] - padded[:-2, 1:-1]) ** 2).sum(-1)
        + ((padded[1:-1, 2:] - padded[1:-1, :-2]) ** 2).sum(-1)
    )
    for i in range(cy.size):
        ry, rx = int(round(cy[i])), int(round(cx[i]))
        y0, y1 = max(ry - 1, 0), min(ry + 2, h)
        x0, x1 = max(rx - 1, 0), min(rx + 2, w)
        win = grad[y0:y1, x0:x1]
        j = np.unravel_index(np.argmin(win), win.shape)
        # move only on a strict improvement so flat images keep the regular grid
        if win[j] < grad[ry, rx]:
            cy[i], cx[i] = y0 + j[0], x0 + j[1]
    colour = lab[np.clip(np.rint(cy).astype(int), 0, h - 1), np.clip(np.rint(cx).astype(int), 0, w - 1)]
    return np.column_stack([cy, cx, colour])


def _assign(lab, centers, step, compactness):
    h, w = lab.shape[:2]
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    spatial = (compactness / step) ** 2
    reach = int(math.ceil(step))
    for k, (cy, cx, l, a, b) in enumerate(centers):
        y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
        x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        yy = (np.arange(y0, y1) - cy) ** 2
        xx = (np.arange(x0, x1) - cx) ** 2
        patch = lab[y0:y1, x0:x1]
        d = ((patch - (l, a, b)) ** 2).sum(-1) + spatial * (yy[:, None] + xx[None, :])
        sub = best[y0:y1, x0:x1]
        closer = d < sub
        sub[closer] = d[closer]
        labels[y0:y1, x0:x1][closer] = k
    orphan = labels < 0
    if orphan.any():
        oy, ox = np.nonzero(orphan)
        d2 = (oy[:, None] - centers[None, :, 0]) ** 2 + (ox[:, None] - centers[None, :, 1]) ** 2
        labels[oy, ox] = np.argmin(d2, axis=1)
    return labels


def _update(lab, labels, centers):
    h, w = labels.shape
    k = len(centers)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    feats = [yy.ravel(), xx.ravel(), lab[..., 0].ravel(), lab[..., 1].ravel(), lab[..., 2].ravel()]
    new = centers.copy()
    nz = counts > 0
    for j, f in enumerate(feats):
        s = np.bincount(flat, weights=f.astype(np.float64), minlength=k)
        new[nz, j] = s[nz] / counts[nz]
    return new


def _enforce_connectivity(labels, min_size):
    """Merge 4-connected fragments smaller than ``min_size`` into their largest neighbour."""
    comp = label_regions(labels + 1, connectivity=1, background=0)
    sizes = np.bincount(comp.ravel())
    slices = ndi.find_objects(comp)
    h, w = comp.shape
    for cid in np.flatnonzero((sizes < min_size) & (sizes > 0)):
        if cid == 0:
            continue
        sl = slices[cid - 1]
        if sl is None:
            continue
        ys = slice(max(sl[0].start - 1, 0), min(sl[0].stop + 1, h))
        xs = slice(max(sl[1].start - 1, 0), min(sl[1].stop + 1, w))
        region = comp[ys, xs]
        own = region == cid
        if not own.any():
            continue
        ring = ndi.binary_dilation(own, structure=FOUR) & ~own
        nbrs = np.unique(region[ring])
        if nbrs.size == 0:
            continue
        target = nbrs[np.argmax(sizes[nbrs])]
        region[own] = target
        sizes[target] += sizes[cid]
        sizes[cid] = 0
    return comp


def _relabel_first_seen(labels):
    _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(labels.shape).astype(np.int32)


def slic_segment(image, params: SlicParams = SlicParams(), seed: int = 0, return_residuals: bool = False):
    """Superpixel label map (labels 0..K-1) for a 3-channel image.

    The algorithm is deterministic; ``seed`` is accepted for interface
    symmetry with the other pipeline stages and does not change the result.

    With ``return_residuals`` the per-iteration total centre displacement
    (pixels) is returned alongside the labels.
    """
    data = np.asarray(image, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"SLIC needs a 3-channel planar image, got shape {data.shape}")
    h, w = data.shape[1:]
    step = math.sqrt(h * w / params.n_segments)
    if step < 1.0:
        raise ValueError(
            f"image of {w}x{h} pixels is smaller than the initial grid for "
            f"n_segments={params.n_segments}; use a smaller n_segments"
        )
    lab = rgb2lab(np.moveaxis(data, 0, -1))
    centers = _initial_centers(lab, step)
    residuals = []
    labels = None
    for _ in range(params.max_iterations):
        labels = _assign(lab, centers, step, params.compactness)
        new = _update(lab, labels, centers)
        residuals.append(float(np.hypot(new[:, 0] - centers[:, 0], new[:, 1] - centers[:, 1]).sum()))
        centers = new
        if residuals[-1] == 0.0:
            break
    if params.enforce_connectivity:
        labels = _enforce_connectivity(labels, step * step / 4.0)
    labels = _relabel_first_seen(labels)
    log.debug("slic: %d superpixels for n_segments=%d", labels.max() + 1, params.n_segments)
    if return_residuals:
        return labels, residuals
    return labels
