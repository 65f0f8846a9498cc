"""Sharp image restoration from noisy/blurry burst pairs.

Two fusion generators (sequential DeblurRNN, parallel DeblurMerger) are
trained adversarially on synthesized triples of noisy, blurry, and sharp
images.  Submodules: imgproc (shared image math), datagen (triple
synthesis), nets (network definitions), losses (training objectives),
train (optimization loop and checkpoints), cli (command line front end).
"""

from .datagen import BurstSequence, ImageTriple, SynthParams
from .losses import LossBreakdown, LossWeights
from .nets import DeblurMerger, DeblurRNN, Discriminator, NetConfig, RecurrentState
from .train import TrainConfig, TrainState

__all__ = [
    "BurstSequence",
    "DeblurMerger",
    "DeblurRNN",
    "Discriminator",
    "ImageTriple",
    "LossBreakdown",
    "LossWeights",
    "NetConfig",
    "RecurrentState",
    "SynthParams",
    "TrainConfig",
    "TrainState",
]

__version__ = "0.1.0"
