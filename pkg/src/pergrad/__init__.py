"""Per-example gradients for convolutional networks, three ways, plus DP clipping."""

from .dp_clip import aggregate, clip, dp_sgd_step, per_example_norm
from .layers import (
    Conv,
    Dense,
    Flatten,
    ForwardCache,
    MaxPool,
    Network,
    ReLU,
    aggregate_backward,
    conv_per_example_grad,
    dense_per_example_grad,
    forward,
    per_example_backward,
    per_example_loss,
)
from .strategies import StrategyKind, per_example_grads, verify_equivalence
from .tensor_core import ConvGeometry, InvalidGeometryError, conv_nd, conv_output_extent

__version__ = "0.1.0"
