"""CGAP2: context/gap aware future-pose prediction and anticipatory
gesture classification, on a self-contained autodiff tensor core."""

from .tensor import Parameter, ShapeError, Tensor, UsageError, no_grad
from .sampler import SamplerConfig, WindowSample, enumerate_windows, sample_window
from .metrics import EvalReport, accuracy, mpjpe, mpjpe_per_class

__all__ = [
    "Parameter", "ShapeError", "Tensor", "UsageError", "no_grad",
    "SamplerConfig", "WindowSample", "enumerate_windows", "sample_window",
    "EvalReport", "accuracy", "mpjpe", "mpjpe_per_class",
]

__version__ = "0.1.0"
