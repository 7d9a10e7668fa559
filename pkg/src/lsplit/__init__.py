"""Learning to split: find train/test splits that predictors cannot generalize across."""

__version__ = "0.1.0"

from .datagen import Dataset, GroundTruth, SpuriousSpec, gen_blobs, gen_spurious, inject_label_noise
from .engine import LsConfig, SplitState, run_ls

__all__ = ["Dataset", "GroundTruth", "LsConfig", "SplitState", "SpuriousSpec", "gen_blobs",
           "gen_spurious", "inject_label_noise", "run_ls"]
