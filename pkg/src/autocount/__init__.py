"""Unsupervised segmentation and counting of plant organs in field images."""
from .config import PipelineConfig, load_config, parse_config
from .pipeline import run_pipeline

__version__ = "0.1.0"
