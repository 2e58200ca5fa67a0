"""Training-free layout control for a toy attention denoiser."""
from .bounded import MaskMode, SubjectMasks, coarse_masks
from .denoiser.model import Checkpoint, Denoiser, DenoiserConfig
from .guidance import GuidanceConfig
from .refinement import RefinementConfig
from .sampler import SamplerConfig, reference_sample, sample
from .scene import SceneSpec, SubjectSpec, TokenSpec, load_scene, save_scene

__all__ = [
    "Checkpoint", "Denoiser", "DenoiserConfig", "GuidanceConfig", "MaskMode", "RefinementConfig",
    "SamplerConfig", "SceneSpec", "SubjectMasks", "SubjectSpec", "TokenSpec", "coarse_masks", "load_scene",
    "reference_sample", "sample", "save_scene",
]
