"""Pipeline configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated.  Unknown keys are an error.  Every key and its default:

    seed = 0
    jobs = 1
    channel = auto                      # or an integer channel index
    channel.min_fraction = 0.01         # argmax share needed to be a candidate
    channel.sample_images = 8           # images used to rank candidates
    slic.n_segments = 1000
    slic.compactness = 10
    slic.max_iterations = 10
    slic.enforce_connectivity = true
    net.output_channels = 32
    net.min_unique_labels = 8
    net.max_iterations = 1000
    net.blocks = 3
    net.lr = 0.1
    net.momentum = 0.9
    net.relu = true
    net.stop_rule = all                 # all | current
    mask.budget = 200
    mask.sigma = 0, 1, 2, 4
    mask.threshold = 0.3, 0.4, 0.5, 0.6, 0.7, 0.8
    mask.erosion = 1, 3, 5, 7
    mask.dilation = 1, 3, 5, 7
    watershed.a = 0, 10, 20, 40, 80, 160, 320
    watershed.b = 3, 5, 7, 9, 12, 15, 20, 30
    quantiles = 512
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .distfit import DEFAULT_A_GRID, DEFAULT_B_GRID, DEFAULT_QUANTILES
from .maskopt import ParamGrid
from .slic import SlicParams
from .unsupseg import SegNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    slic: SlicParams = field(default_factory=SlicParams)
    net: SegNetConfig = field(default_factory=SegNetConfig)
    mask_grid: ParamGrid = field(default_factory=ParamGrid)
    mask_budget: int = 200
    a_grid: tuple = DEFAULT_A_GRID
    b_grid: tuple = DEFAULT_B_GRID
    quantiles: int = DEFAULT_QUANTILES
    channel: object = "auto"  # "auto" or int
    channel_min_fraction: float = 0.01
    channel_sample_images: int = 8
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.a_grid or not self.b_grid:
            raise ConfigError("watershed grids must be non-empty")
        if self.mask_budget < 1:
            raise ConfigError("mask.budget must be >= 1")
        if self.channel != "auto":
            if not isinstance(self.channel, int) or not 0 <= self.channel < self.net.output_channels:
                raise ConfigError(f"channel must be 'auto' or an index below {self.net.output_channels}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.channel_sample_images < 1:
            raise ConfigError("channel.sample_images must be >= 1")

    def with_overrides(self, channel=None, seed=None, jobs=None) -> "PipelineConfig":
        cfg = self
        if channel is not None:
            cfg = replace(cfg, channel=channel)
        if seed is not None:
            cfg = replace(cfg, seed=seed, net=replace(cfg.net, seed=seed))
        if jobs is not None:
            cfg = replace(cfg, jobs=jobs)
        return cfg

    def snapshot(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _channel(v: str):
    v = v.strip().lower()
    return "auto" if v == "auto" else int(v)


# key -> (section, field, parser); section None means a top-level field
_KEYS = {
    "seed": (None, "seed", int),
    "jobs": (None, "jobs", int),
    "channel": (None, "channel", _channel),
    "channel.min_fraction": (None, "channel_min_fraction", float),
    "channel.sample_images": (None, "channel_sample_images", int),
    "slic.n_segments": ("slic", "n_segments", int),
    "slic.compactness": ("slic", "compactness", float),
    "slic.max_iterations": ("slic", "max_iterations", int),
    "slic.enforce_connectivity": ("slic", "enforce_connectivity", _bool),
    "net.output_channels": ("net", "output_channels", int),
    "net.min_unique_labels": ("net", "min_unique_labels", int),
    "net.max_iterations": ("net", "max_iterations", int),
    "net.blocks": ("net", "n_blocks", int),
    "net.lr": ("net", "lr", float),
    "net.momentum": ("net", "momentum", float),
    "net.relu": ("net", "relu", _bool),
    "net.stop_rule": ("net", "stop_rule", str.strip),
    "mask.budget": (None, "mask_budget", int),
    "mask.sigma": ("mask_grid", "sigma", _floats),
    "mask.threshold": ("mask_grid", "threshold", _floats),
    "mask.erosion": ("mask_grid", "erosion", _ints),
    "mask.dilation": ("mask_grid", "dilation", _ints),
    "watershed.a": (None, "a_grid", _ints),
    "watershed.b": (None, "b_grid", _floats),
    "quantiles": (None, "quantiles", int),
}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    top, sections = {}, {"slic": {}, "net": {}, "mask_grid": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        (top if section is None else sections[section])[name] = parsed
    try:
        seed = top.get("seed", 0)
        net_fields = {"seed": seed, **sections["net"]}
        return PipelineConfig(
            slic=SlicParams(**sections["slic"]),
            net=SegNetConfig(**net_fields),
            mask_grid=ParamGrid(**sections["mask_grid"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(p)!r}: {exc}") from exc
    return parse_config(text, str(p))
