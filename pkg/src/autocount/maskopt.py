"""Per-image binary segmentation of an organ probability map.

A masking function blurs the map, thresholds it and applies a morphological
closing (dilation then erosion with disc kernels).  Its four parameters are
chosen on a discrete grid by a (1+1) evolution strategy that draws each
mutation from a small portfolio of discrete operators, minimising

    -log(S / sum(k)) - log(S / n)

where ``S`` is the sum of the *original* probabilities inside the mask and
``n`` the number of selected pixels.  The blur only shapes the selection; the
loss always reads the unblurred map.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import morphtools

log = logging.getLogger(__name__)

EMPTY_MASK_PENALTY = 1e9
MAX_PROPOSALS_PER_EVAL = 50  # stop if the search keeps revisiting evaluated points


@dataclass(frozen=True)
class MaskParams:
    sigma: float  # Gaussian blur standard deviation, pixels
    threshold: float
    erosion: int  # disc diameters, odd pixels
    dilation: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        for d in (self.erosion, self.dilation):
            if d < 1 or d % 2 == 0:
                raise ValueError(f"kernel diameters must be odd and >= 1, got {d}")


@dataclass(frozen=True)
class ParamGrid:
    sigma: tuple = (0.0, 1.0, 2.0, 4.0)
    threshold: tuple = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    erosion: tuple = (1, 3, 5, 7)
    dilation: tuple = (1, 3, 5, 7)

    def __post_init__(self):
        for name in ("sigma", "threshold", "erosion", "dilation"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"parameter grid {name!r} is empty")
            object.__setattr__(self, name, values)
        # every grid point must be a valid parameter set
        MaskParams(min(self.sigma), min(self.threshold), min(self.erosion), min(self.dilation))
        MaskParams(max(self.sigma), max(self.threshold), max(self.erosion), max(self.dilation))
        for d in self.erosion + self.dilation:
            if d % 2 == 0:
                raise ValueError(f"kernel diameters must be odd and >= 1, got {d}")

    @property
    def axes(self) -> tuple:
        return (self.sigma, self.threshold, self.erosion, self.dilation)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def params(self, index) -> MaskParams:
        return MaskParams(*(axis[i] for axis, i in zip(self.axes, index)))


def apply_mask(k, params: MaskParams):
    """Return ``(mask, masked_sum, selected_count)`` for one probability map."""
    k = np.asarray(k, dtype=np.float64)
    sel = morphtools.gaussian_blur(k, params.sigma) >= params.threshold
    sel = morphtools.dilate(sel, params.dilation)
    sel = morphtools.erode(sel, params.erosion)
    return sel, float(k[sel].sum()), int(sel.sum())


def mask_loss(total: float, masked_sum: float, count: int) -> float:
    if count == 0 or masked_sum <= 0.0:
        return EMPTY_MASK_PENALTY
    return -math.log(masked_sum / total) - math.log(masked_sum / count)


def detection_loss(k, params: MaskParams) -> float:
    k = np.asarray(k, dtype=np.float64)
    total = float(k.sum())
    if total <= 0.0:
        raise ValueError("probability map sums to zero; detection loss is undefined")
    _, masked_sum, count = apply_mask(k, params)
    return mask_loss(total, masked_sum, count)


@dataclass
class MaskResult:
    params: MaskParams
    mask: np.ndarray
    loss: float
    index: tuple
    history: list = field(default_factory=list)  # loss after every accepted step


def _mutate(index, shape, rng):
    index = list(index)
    op = rng.integers(3)
    if op == 0:
        # single coordinate, one grid cell up or down
        movable = [d for d in range(4) if shape[d] > 1]
        if not movable:
            return tuple(index)
        d = movable[rng.integers(len(movable))]
        step = 1 if rng.integers(2) else -1
        if not 0 <= index[d] + step < shape[d]:
            step = -step
        index[d] += step
    elif op == 1:
        d = int(rng.integers(4))
        index[d] = int(rng.integers(shape[d]))
    else:
        index = [int(rng.integers(n)) for n in shape]
    return tuple(index)


def optimize_mask(k, grid: ParamGrid | None = None, budget: int = 200, seed: int = 0) -> MaskResult:
    """Discrete (1+1) search over ``grid`` using at most ``budget`` loss evaluations.

    Parameters
    ----------
    k : array_like
        Organ probability map.
    grid : ParamGrid, optional
        Candidate values per parameter; defaults to :class:`ParamGrid`.
    budget : int
        Number of distinct grid points whose loss may be computed, including
        the random starting point.  Proposals of points already evaluated do
        not count.
    seed : int
        Seed of the generator that draws the start point and mutations.

    Returns
    -------
    MaskResult
        Best parameters, their mask and loss, and the loss after every
        accepted step.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = grid or ParamGrid()
    k = np.asarray(k, dtype=np.float64)
    total = float(k.sum())
    if total <= 0.0:
        raise ValueError("probability map sums to zero; detection loss is undefined")
    rng = np.random.default_rng(seed)
    shape = grid.shape
    cache = {}

    def evaluate(index):
        if index not in cache:
            _, masked_sum, count = apply_mask(k, grid.params(index))
            cache[index] = mask_loss(total, masked_sum, count)
        return cache[index]

    best = tuple(int(rng.integers(n)) for n in shape)
    best_loss = evaluate(best)
    history = [best_loss]
    # the budget counts distinct loss evaluations; re-proposing a cached point is free
    budget = min(budget, math.prod(shape))
    proposals = 0
    while len(cache) < budget and proposals < MAX_PROPOSALS_PER_EVAL * budget:
        proposals += 1
        child = _mutate(best, shape, rng)
        loss = evaluate(child)
        if loss < best_loss:
            best, best_loss = child, loss
            history.append(loss)
    params = grid.params(best)
    mask, _, _ = apply_mask(k, params)
    log.debug("mask search: %s loss=%.5f (%d distinct evaluations)", params, best_loss, len(cache))
    return MaskResult(params, mask, best_loss, best, history)
