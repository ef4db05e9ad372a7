"""Edge-aware, affinity-guided salient object detection on a small numpy autograd,
with the standard saliency evaluation metrics and a command-line toolkit."""
from .tensor import GradTape, ShapeError, TapeError, Tensor, backward
from .layers import ParamStore
from .network import (ABLATIONS, NetworkConfig, ablation_config, forward, init_params,
                      predict, toy_config, train)
from .metrics import MetricReport, aggregate, evaluate_pair
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "GradTape", "ShapeError", "TapeError", "Tensor", "backward", "ParamStore",
    "ABLATIONS", "NetworkConfig", "ablation_config", "forward", "init_params",
    "predict", "toy_config", "train", "MetricReport", "aggregate", "evaluate_pair",
    "load_weights", "save_weights", "__version__",
]
