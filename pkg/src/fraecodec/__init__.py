"""Neural sequence-compression codec for spectrogram frames.

Recurrent autoencoder schemes with a feedback-recurrent flagship, learned
scalar quantization, latent prior models, rate-distortion training on a
built-in reverse-mode differentiation engine, and bit-exact fixed-rate or
arithmetic-coded latent bitstreams.
"""

from .autodiff import Tape, Tensor
from .nn import ModelParams
from .prior import PriorKind, PriorModel
from .schemes import CodecModel, CodecState, SchemeId

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "ModelParams",
    "PriorKind",
    "PriorModel",
    "CodecModel",
    "CodecState",
    "SchemeId",
    "__version__",
]
