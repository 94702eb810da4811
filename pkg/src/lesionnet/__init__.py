"""lesionnet: EfficientNet-3D and Multiscale-EfficientNet lesion classifiers on a
small numpy reverse-mode autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, no_grad  # noqa: E402
from .models import (EfficientNet, MultiscaleEfficientNet, ScaledVariant, B0, B7,  # noqa: E402
                     build_efficientnet, build_multiscale_efficientnet, param_count,
                     save_weights, load_weights)
from .metrics import auc, auc_wmw, auc_trapezoid, ScoredDataset  # noqa: E402

__all__ = [
    "Tensor", "Tape", "backward", "no_grad",
    "EfficientNet", "MultiscaleEfficientNet", "ScaledVariant", "B0", "B7",
    "build_efficientnet", "build_multiscale_efficientnet", "param_count",
    "save_weights", "load_weights",
    "auc", "auc_wmw", "auc_trapezoid", "ScoredDataset",
]
