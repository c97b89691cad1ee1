"""Reasoning-activated recommendation with a tiny decoder LM, LoRA experts and collaborative features."""

from .config import PipelineConfig, load_config, synthetic_preset
from .metrics import MetricReport

__version__ = "0.1.0"
