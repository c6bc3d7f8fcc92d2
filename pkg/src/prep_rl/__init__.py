"""Reinforcement-learned image preprocessing for classifiers, in numpy.

An agent looks at an image, applies flips and rotations, and finally stops
with a class label. The same network can then be fine-tuned as a plain
classifier on the images the agent chose to stop at.
"""
from .environment import EnvConfig, Stop, Transform, reset, step
from .pipeline import ExperimentConfig, run_experiment
from .transforms import COARSE, STANDARD, TransformId, apply_chain

__version__ = "0.1.0"

__all__ = ["COARSE", "STANDARD", "EnvConfig", "ExperimentConfig", "Stop", "Transform", "TransformId",
           "apply_chain", "reset", "run_experiment", "step"]
