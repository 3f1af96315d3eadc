"""Parameter-frugal fully-convolutional CNNs for real-time face classification,
implemented from scratch on numpy: layer kernels, two reference architectures,
ADAM training, guided back-propagation saliency and a stacked gender/emotion
pipeline.
"""

from .graph import (EMOTION_CLASSES, GENDER_CLASSES, Model, backward, build, build_mini_xception,
                    build_sequential_fully_cnn, count_parameters, forward)
from .weights import load_weights, save_weights

__all__ = [
    "EMOTION_CLASSES", "GENDER_CLASSES", "Model", "backward", "build", "build_mini_xception",
    "build_sequential_fully_cnn", "count_parameters", "forward", "load_weights", "save_weights",
]
__version__ = "0.1.0"
