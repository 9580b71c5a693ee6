"""imlkit: webly-supervised image manipulation localization toolkit.

Subpackages cover the full stack: pair synthesis and routing (`pairs`),
difference-aware segmentation (`dass`), correlation localization over
frozen features (`corrdino`), annotation quality filtering (`qes`), object
jitter artifact synthesis (`jitter`), the Web-IML model (`webiml`),
evaluation metrics (`metrics`), the backbone plugin boundary (`backbone`),
and dataset-construction/training orchestration (`pipeline`).
"""

__version__ = "0.1.0"

from .images import ImageTensor

__all__ = ["ImageTensor", "__version__"]
