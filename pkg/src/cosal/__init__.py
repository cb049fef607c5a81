"""Co-saliency detection pipeline: group transformers over a conv pyramid,
trained and evaluated end to end on deterministic synthetic shape groups."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_check  # noqa: F401
