"""Unsupervised segmentation network trained across a whole image set.

A small fully convolutional net (conv + batchnorm blocks, stride 1) predicts
per-pixel class logits.  Each training step takes one image (round-robin),
replaces every pixel's argmax label by the majority label of its superpixel,
and takes one SGD step on the cross-entropy against those refined labels.
The batchnorm on the final layer normalises each class response per image,
which keeps the labelling from collapsing to a single class.  Training stops
once images have at most ``min_unique_labels`` distinct labels, or
after ``max_iterations`` steps.  By default the label-count condition must
hold for the most recent step on every image of the set, so the shared net
is never stopped by one easy image before it has seen the rest.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tinynet
from .types import ProbabilityMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegNetConfig:
    output_channels: int = 32
    min_unique_labels: int = 8
    max_iterations: int = 1000
    n_blocks: int = 3
    lr: float = 0.1
    momentum: float = 0.9
    relu: bool = True
    # "all": stop once every image's latest label count is <= min_unique_labels;
    # "current": stop as soon as the image just stepped on satisfies it
    stop_rule: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 1 <= self.min_unique_labels <= self.output_channels:
            raise ValueError("min_unique_labels must lie in [1, output_channels]")
        if self.stop_rule not in ("all", "current"):
            raise ValueError(f"stop_rule must be 'all' or 'current', got {self.stop_rule!r}")
        if self.n_blocks < 2:
            raise ValueError("the network needs at least 2 blocks")


def build_net(cfg: SegNetConfig, in_channels: int = 3) -> tinynet.Sequential:
    """3x3 conv blocks followed by a final 1x1 conv + batchnorm (no ReLU)."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.output_channels
    layers = []
    ch = in_channels
    for _ in range(cfg.n_blocks - 1):
        layers += [tinynet.ConvLayer.init(ch, c, 3, rng), tinynet.BatchNormLayer.init(c)]
        if cfg.relu:
            layers.append(tinynet.ReLU())
        ch = c
    layers += [tinynet.ConvLayer.init(ch, c, 1, rng), tinynet.BatchNormLayer.init(c)]
    return tinynet.Sequential(layers)


def refine_labels(pred, superpixels) -> np.ndarray:
    """Give every pixel the most frequent predicted label of its superpixel.

    Ties go to the smallest label value.
    """
    pred = np.asarray(pred)
    sp = np.asarray(superpixels)
    if pred.shape != sp.shape:
        raise ValueError(f"prediction {pred.shape} and superpixel map {sp.shape} differ in shape")
    values, lab = np.unique(pred.ravel(), return_inverse=True)
    _, seg = np.unique(sp.ravel(), return_inverse=True)
    n_lab = values.size
    hist = np.bincount(seg * n_lab + lab, minlength=(seg.max() + 1) * n_lab).reshape(-1, n_lab)
    modal = values[np.argmax(hist, axis=1)]
    return modal[seg].reshape(pred.shape)


def _tensor(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float32)[None]


@dataclass
class TrainResult:
    net: tinynet.Sequential
    steps: int
    stopped_early: bool
    n_labels: list = field(default_factory=list)  # distinct argmax labels seen at each step
    losses: list = field(default_factory=list)


def train_unsupervised(images, superpixels, cfg: SegNetConfig = SegNetConfig()) -> TrainResult:
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(superpixels):
        raise ValueError(f"{len(images)} images but {len(superpixels)} superpixel maps")
    tensors = [_tensor(im) for im in images]
    sps = [np.asarray(s) for s in superpixels]
    for t, s in zip(tensors, sps):
        if t.shape[2:] != s.shape:
            raise ValueError(f"superpixel map {s.shape} does not match image {t.shape[2:]}")

    net = build_net(cfg, tensors[0].shape[1])
    opt = tinynet.SGD(cfg.lr, cfg.momentum)
    history, losses = [], []
    stopped = False
    step = 0
    latest = [None] * len(tensors)
    while step < cfg.max_iterations:
        i = step % len(tensors)
        logits = net.forward(tensors[i], training=True)
        pred = np.argmax(logits[0], axis=0)
        n_labels = int(np.unique(pred).size)
        target = refine_labels(pred, sps[i])
        loss, grad = tinynet.cross_entropy_loss(logits, target)
        opt.step(net.params(), net.backward(grad))
        history.append(n_labels)
        losses.append(loss)
        step += 1
        if step % 50 == 0:
            log.info("step %d: image %d, %d labels, loss %.4f", step, i, n_labels, loss)
        latest[i] = n_labels
        if cfg.stop_rule == "current":
            done = n_labels <= cfg.min_unique_labels
        else:
            done = all(n is not None and n <= cfg.min_unique_labels for n in latest)
        if done:
            stopped = True
            break
    log.info("training finished after %d steps (%d labels)", step, history[-1])
    return TrainResult(net, step, stopped, history, losses)


def channel_probabilities(net: tinynet.Sequential, image) -> np.ndarray:
    """Softmax over the output channels, shape (C, H, W).

    Batchnorm uses the image's own statistics, exactly as during training;
    the running estimates are left untouched.
    """
    logits = net.forward(_tensor(image), training=True, update_stats=False)
    return tinynet.softmax_channels(logits.astype(np.float64))[0]


def infer_probability_map(net: tinynet.Sequential, image, channel: int) -> ProbabilityMap:
    probs = channel_probabilities(net, image)
    if not 0 <= channel < probs.shape[0]:
        raise ValueError(f"channel {channel} out of range for a {probs.shape[0]}-channel network")
    return ProbabilityMap(np.clip(probs[channel], 0.0, 1.0))
