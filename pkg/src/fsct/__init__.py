"""Few-shot cosine transformer: learnable prototypes and cosine cross-attention."""
from .tensor import Tape, Tensor, backward
from .model import FewShotCosineTransformer, ModelConfig, ModelState, predict
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"
