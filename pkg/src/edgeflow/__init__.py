"""Interactive image segmentation from user clicks, with edge-guided
feature alignment, a synthetic-shapes training pipeline, click-simulation
evaluation, and an HTTP annotation service."""

__version__ = "0.1.0"

from .clicks import Click, ClickOutOfBounds, InteractionState, encode_clicks  # noqa: F401
from .model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint  # noqa: F401
from .tensor import ShapeError, Tape, Tensor  # noqa: F401
