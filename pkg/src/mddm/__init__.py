"""Joint image-report masked discrete diffusion at desk scale.

One absorbing-state diffusion process over a shared token vocabulary models
paired image and report sequences, with conditional and joint generation in
both directions.
"""

from .backbone import BackboneConfig, Denoiser, build_denoiser, init_params
from .gridworld import Codebook, GridWorldConfig, PairedSample, enumerate_joint
from .runconfig import RunConfig
from .sampler import (
    GenerationMode,
    SamplerConfig,
    ancestral_decode,
    init_canvas,
    maskgit_decode,
    torch_denoise_fn,
)
from .schedule import NoiseSchedule, corrupt, cumulative_matrix, transition_matrix
from .training import TrainConfig, TrainState, lr_at, nelbo_loss, train_step
from .vocab import (
    JointVocabulary,
    SequenceLayout,
    TokenSequence,
    modality_positions,
    pack,
    unpack,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Codebook",
    "Denoiser",
    "GenerationMode",
    "GridWorldConfig",
    "JointVocabulary",
    "NoiseSchedule",
    "PairedSample",
    "RunConfig",
    "SamplerConfig",
    "SequenceLayout",
    "TokenSequence",
    "TrainConfig",
    "TrainState",
    "ancestral_decode",
    "build_denoiser",
    "corrupt",
    "cumulative_matrix",
    "enumerate_joint",
    "init_canvas",
    "init_params",
    "lr_at",
    "maskgit_decode",
    "modality_positions",
    "nelbo_loss",
    "pack",
    "torch_denoise_fn",
    "train_step",
    "transition_matrix",
    "unpack",
]
