from .checkpoint import load_checkpoint, save_checkpoint
from .layers import BatchNorm2D, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU, softmax, softmax_cross_entropy
from .models import ARCHITECTURES, Network, build_architecture

__all__ = [
    "ARCHITECTURES",
    "BatchNorm2D",
    "Conv2D",
    "Dense",
    "Dropout",
    "Flatten",
    "MaxPool2D",
    "Network",
    "ReLU",
    "build_architecture",
    "load_checkpoint",
    "save_checkpoint",
    "softmax",
    "softmax_cross_entropy",
]
