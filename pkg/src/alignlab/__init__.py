"""alignlab: alignment-level-aware multimodal pretraining at desk scale."""

__version__ = "0.1.0"

from . import aligncore, bucketing, checkpoint, config, harness, model, simscore, synthdata, trainer

__all__ = [
    "aligncore",
    "bucketing",
    "checkpoint",
    "config",
    "harness",
    "model",
    "simscore",
    "synthdata",
    "trainer",
]
