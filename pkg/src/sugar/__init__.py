"""Subject-driven video customization on procedural sprite videos.

A desk-scale system: a float64 tensor engine with tape autodiff, a
noise-prediction diffusion transformer with selective attention over
identity/text/video token groups, dual-scale classifier-free guidance with
a timestep-gated embedding drop, dataset-mixing/layer-freezing training
strategies, a filtered synthetic-triplet pipeline over deterministic toy
embedders, and an evaluation metric suite — all reproducible from a seed.
"""

__version__ = "0.1.0"

from .masks import SelectiveMask, TokenLayout, build_mask
from .model import ModelConfig, SugarModel
from .rng import Rng
from .sampler import GuidanceConfig, SampleRequest, guided_eps, sample
from .schedule import NoiseSchedule, make_linear_schedule
from .tensor import Tensor

__all__ = [
    "Rng", "Tensor", "NoiseSchedule", "make_linear_schedule",
    "TokenLayout", "SelectiveMask", "build_mask",
    "ModelConfig", "SugarModel",
    "GuidanceConfig", "SampleRequest", "guided_eps", "sample",
    "__version__",
]
