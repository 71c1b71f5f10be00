"""groundseg: text-grounded nuclei segmentation at desk scale.

A tiny multimodal language model emits answers containing seg tokens whose
hidden states condition a pixel-level mask decoder; training combines a
class-penalized mask loss, a neighbor-consistency loss and a text loss.
"""

from .config import ModelDims, RunConfig
from .losses import LossConfig

__all__ = ["ModelDims", "RunConfig", "LossConfig"]
__version__ = "0.1.0"
