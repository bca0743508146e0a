"""Object-size distributions and the dataset-level watershed parameter search.

Sizes are pixel areas.  Distances between distributions are 1-Wasserstein;
between an empirical sample and a parametric fit (or two fits) they are
computed on a fixed grid of quantile levels ``(j - 0.5) / M``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from . import morphtools

log = logging.getLogger(__name__)

DEFAULT_QUANTILES = 512
DEGENERATE_PENALTY = 1e6
DEFAULT_A_GRID = (0, 10, 20, 40, 80, 160, 320)
DEFAULT_B_GRID = (3, 5, 7, 9, 12, 15, 20, 30)


class DegenerateDistribution(ValueError):
    """Raised when a size sample cannot support a normal or gamma fit."""


@dataclass(frozen=True)
class NormalFit:
    mu: float
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.mu) or not self.sigma >= 0:
            raise ValueError(f"invalid normal fit mu={self.mu}, sigma={self.sigma}")

    def quantile(self, q):
        return self.mu + self.sigma * special.ndtri(q)


@dataclass(frozen=True)
class GammaFit:
    """Gamma distribution in shape-scale form (mean = alpha * beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0) or not np.isfinite(self.alpha * self.beta):
            raise ValueError(f"invalid gamma fit alpha={self.alpha}, beta={self.beta}")

    def cdf(self, x):
        return special.gammainc(self.alpha, np.maximum(np.asarray(x, dtype=np.float64), 0.0) / self.beta)

    def quantile(self, q, tol: float = 1e-8):
        """Invert the regularized lower incomplete gamma by bisection."""
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        mean = self.alpha * self.beta
        sd = np.sqrt(self.alpha) * self.beta
        lo = np.zeros_like(q)
        hi = np.full_like(q, mean + 10.0 * sd + 10.0 * self.beta)
        while np.any(self.cdf(hi) < q):
            grow = self.cdf(hi) < q
            hi[grow] *= 2.0
        while True:
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol * np.maximum(1.0, hi)):
                return 0.5 * (lo + hi)


def _as_sizes(s) -> np.ndarray:
    return np.asarray(s, dtype=np.float64).ravel()


def fit_normal(s) -> NormalFit:
    s = _as_sizes(s)
    if s.size < 2:
        raise DegenerateDistribution(f"need at least 2 samples for a normal fit, got {s.size}")
    return NormalFit(float(s.mean()), float(s.std()))


def fit_gamma(s) -> GammaFit:
    """Method-of-moments gamma fit: alpha = mu^2 / var, beta = var / mu."""
    s = _as_sizes(s)
    if s.size < 2:
        raise DegenerateDistribution(f"need at least 2 samples for a gamma fit, got {s.size}")
    mu = float(s.mean())
    var = float(s.var())
    if var <= 0 or mu <= 0:
        raise DegenerateDistribution("gamma fit needs positive mean and variance")
    return GammaFit(mu * mu / var, var / mu)


def quantile_levels(m: int = DEFAULT_QUANTILES) -> np.ndarray:
    return (np.arange(1, m + 1, dtype=np.float64) - 0.5) / m


def empirical_quantile(s, q) -> np.ndarray:
    """Generalised inverse of the empirical CDF: the ``ceil(n*q)``-th smallest sample."""
    xs = np.sort(_as_sizes(s))
    k = np.ceil(np.asarray(q, dtype=np.float64) * xs.size).astype(np.int64) - 1
    return xs[np.clip(k, 0, xs.size - 1)]


def wasserstein_empirical(s1, s2) -> float:
    """1-Wasserstein distance: the area between the two empirical CDFs."""
    a = np.sort(_as_sizes(s1))
    b = np.sort(_as_sizes(s2))
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_empirical needs two non-empty samples")
    knots = np.concatenate([a, b])
    knots.sort(kind="mergesort")
    widths = np.diff(knots)
    fa = np.searchsorted(a, knots[:-1], side="right") / a.size
    fb = np.searchsorted(b, knots[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def _quantiles(dist, q) -> np.ndarray:
    if isinstance(dist, (NormalFit, GammaFit)):
        return np.asarray(dist.quantile(q), dtype=np.float64)
    raise TypeError(f"expected NormalFit or GammaFit, got {type(dist).__name__}")


def wasserstein_vs_parametric(s, fit, m: int = DEFAULT_QUANTILES) -> float:
    q = quantile_levels(m)
    return float(np.mean(np.abs(empirical_quantile(s, q) - _quantiles(fit, q))))


def wasserstein_parametric(f1, f2, m: int = DEFAULT_QUANTILES) -> float:
    q = quantile_levels(m)
    return float(np.mean(np.abs(_quantiles(f1, q) - _quantiles(f2, q))))


def bracket_terms(before, after, m: int = DEFAULT_QUANTILES) -> tuple[float, float, float]:
    """The three distances summed per image: W(s, s_hat), W(s_hat, N), W(Gamma, N).

    Raises DegenerateDistribution if ``after`` cannot be fitted.
    """
    after = _as_sizes(after)
    normal = fit_normal(after)
    gamma = fit_gamma(after)
    return (
        wasserstein_empirical(before, after),
        wasserstein_vs_parametric(after, normal, m),
        wasserstein_parametric(gamma, normal, m),
    )


def image_term(before, after, m: int = DEFAULT_QUANTILES) -> float:
    """Squared bracket for one image, or the degenerate penalty."""
    try:
        return float(sum(bracket_terms(before, after, m))) ** 2
    except DegenerateDistribution:
        return DEGENERATE_PENALTY


def segmentation_loss(pairs: Sequence[tuple], m: int = DEFAULT_QUANTILES) -> float:
    """Mean over images of the squared distribution-matching bracket.

    ``pairs`` holds one ``(sizes_before, sizes_after)`` tuple per image.
    """
    if len(pairs) == 0:
        raise ValueError("segmentation_loss needs at least one image")
    return float(np.mean([image_term(b, a, m) for b, a in pairs]))


@dataclass(frozen=True)
class WatershedParams:
    min_size: int
    min_distance: float

    def __post_init__(self):
        if self.min_size < 0 or self.min_distance < 1:
            raise ValueError(f"invalid watershed params a={self.min_size}, b={self.min_distance}")


@dataclass
class WatershedSearchResult:
    params: WatershedParams
    loss: float
    instances: list
    losses: dict  # (a, b) -> loss, every grid point


def search_watershed_params(masks, a_grid=DEFAULT_A_GRID, b_grid=DEFAULT_B_GRID,
                            m: int = DEFAULT_QUANTILES) -> WatershedSearchResult:
    """Exhaustive search of (min object size, min marker distance) over a dataset.

    Ties are broken toward smaller ``a`` and then smaller ``b``.
    """
    a_grid = sorted(set(int(a) for a in a_grid))
    b_grid = sorted(set(float(b) for b in b_grid))
    if not a_grid or not b_grid:
        raise ValueError("parameter grids must be non-empty")
    masks = [np.asarray(mk, dtype=bool) for mk in masks]
    if not masks:
        raise ValueError("need at least one mask")

    comps = [morphtools.connected_components(mk) for mk in masks]
    before = [sizes for _, sizes in comps]

    best = None
    losses = {}
    for a in a_grid:
        dists = []
        for (labels, sizes) in comps:
            kept, _ = morphtools.remove_small(labels, sizes, a)
            dists.append((kept, morphtools.distance_transform(kept)))
        for b in b_grid:
            instances = []
            pairs = []
            for (kept, dist), s in zip(dists, before):
                inst = morphtools.watershed(dist, morphtools.local_maxima(dist, b), kept)
                instances.append(inst)
                pairs.append((s, morphtools.region_sizes(inst)))
            loss = segmentation_loss(pairs, m)
            losses[(a, b)] = loss
            if best is None or loss < best[0]:
                best = (loss, a, b, instances)
    loss, a, b, instances = best
    log.debug("watershed search: a=%s b=%s loss=%.6g", a, b, loss)
    return WatershedSearchResult(WatershedParams(a, b), loss, instances, losses)


@dataclass
class ChannelSelection:
    channel: int
    candidates: list
    losses: dict  # channel -> dataset loss of its best (a, b)
    sample: list  # indices of the images used for ranking


def candidate_channels(prob_stacks, min_fraction: float = 0.01) -> list:
    """Channels that win the per-pixel argmax on at least ``min_fraction`` of pixels."""
    counts = None
    total = 0
    for probs in prob_stacks:
        am = np.argmax(probs, axis=0)
        c = np.bincount(am.ravel(), minlength=probs.shape[0])
        counts = c if counts is None else counts + c
        total += am.size
    return [int(c) for c in np.flatnonzero(counts >= min_fraction * total)]


def select_organ_channel(net, images, grid=None, budget: int = 200, a_grid=DEFAULT_A_GRID,
                         b_grid=DEFAULT_B_GRID, min_fraction: float = 0.01, sample_images: int = 8,
                         seed: int = 0, m: int = DEFAULT_QUANTILES, fixed=None,
                         mapper=map) -> ChannelSelection:
    """Pick the output channel whose full downstream result scores lowest.

    For every candidate channel the mask optimisation is run on a sample of
    the images and the watershed search is run on those masks; the channel
    with the smallest dataset loss wins (ties go to the lower index).  A
    fixed channel bypasses the search entirely.
    """
    from . import maskopt, unsupseg

    if fixed is not None:
        return ChannelSelection(int(fixed), [int(fixed)], {}, [])
    n = len(images)
    if n == 0:
        raise ValueError("need at least one image to select a channel")
    k = min(sample_images, n)
    sample = sorted(set(int(round(x)) for x in np.linspace(0, n - 1, k)))
    stacks = [unsupseg.channel_probabilities(net, images[i]) for i in sample]
    candidates = candidate_channels(stacks, min_fraction)
    if not candidates:
        raise ValueError("no output channel reaches the candidate threshold")
    if len(candidates) == 1:
        return ChannelSelection(candidates[0], candidates, {}, sample)

    losses = {}
    for c in candidates:
        jobs = [(stack[c], grid, budget, seed + i) for stack, i in zip(stacks, sample)]
        masks = list(mapper(_mask_job, jobs))
        losses[c] = search_watershed_params(masks, a_grid, b_grid, m).loss
        log.info("channel %d: loss %.6g", c, losses[c])
    best = min(candidates, key=lambda c: (losses[c], c))
    return ChannelSelection(best, candidates, losses, sample)


def _mask_job(args):
    from .maskopt import optimize_mask

    k, grid, budget, seed = args
    return optimize_mask(k, grid, budget, seed).mask
