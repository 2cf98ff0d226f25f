"""qviton: hybrid quantum-classical vision transformer for binary
flood-tile classification, implemented from scratch on numpy.

The quantum branch evaluates a 4-qubit parameterized circuit per image
patch (exact statevector simulation, parameter-shift gradients); the
classical branch is a configurable ViT. Both feed a fused MLP classifier
trained end-to-end with the package's own reverse-mode autodiff.
"""

__version__ = "0.1.0"

from .model import HybridModel, ModelConfig
from .quantum import CircuitSpec, StateVector
from .tensor import ParamStore, Tensor, no_grad
from .train import ConfusionMatrix, TrainConfig, metrics
from .vit import ViTConfig

__all__ = [
    "HybridModel",
    "ModelConfig",
    "CircuitSpec",
    "StateVector",
    "ParamStore",
    "Tensor",
    "no_grad",
    "ConfusionMatrix",
    "TrainConfig",
    "metrics",
    "ViTConfig",
    "__version__",
]
