"""
diffcodec - A conditional-diffusion image codec with learned block bit allocation
"""

from .allocator import PPOConfig, adapt_per_image
from .codec import Bitstream, EncoderNet, StepLadder, deserialize, serialize
from .config import RunConfig, load_config, parse_config
from .diffusion import DenoiserNet, SamplerConfig, VarianceSchedule, reconstruct
from .entropy import EntropyModel
from .imaging import ImagePlane, load_image, save_image
from .metrics import MetricWeights, evaluate

__version__ = "0.1.0"
__all__ = [
    "Bitstream", "EncoderNet", "StepLadder", "serialize", "deserialize",
    "RunConfig", "load_config", "parse_config",
    "DenoiserNet", "SamplerConfig", "VarianceSchedule", "reconstruct",
    "EntropyModel", "ImagePlane", "load_image", "save_image",
    "MetricWeights", "evaluate", "PPOConfig", "adapt_per_image",
]
