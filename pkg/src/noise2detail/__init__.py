"""Single-image, dataset-free denoising with a three-convolution network."""

from .model import DenoiserNet, init_net, param_count
from .noise import NoiseSpec, add_gaussian, add_poisson, phantom, psnr
from .pipeline import PipelineConfig, StageOutputs, denoise
from .sampling import pair_downsample, pd_down, pd_up

__all__ = [
    "DenoiserNet",
    "NoiseSpec",
    "PipelineConfig",
    "StageOutputs",
    "add_gaussian",
    "add_poisson",
    "denoise",
    "init_net",
    "pair_downsample",
    "param_count",
    "pd_down",
    "pd_up",
    "phantom",
    "psnr",
]

__version__ = "0.1.0"
