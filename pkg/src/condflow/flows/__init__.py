from .blocks import (
    ActNorm,
    AffineCoupling,
    ConditionEmbedding,
    FixedPermutation,
    NonFiniteActivation,
    SplineCoupling,
    VolumePreservingCoupling,
    make_subnet,
)
from .latents import (
    PowerScaledNormal,
    StandardNormal,
    UniformTruncatedNormalMix,
    latent_from_descriptor,
)
from .model import (
    ArchitectureMismatch,
    Flow,
    build_flow,
    load_checkpoint,
    save_checkpoint,
)
from .splines import RQSplineParams, SplineInversionFailure, rq_spline_apply

__all__ = [
    "ActNorm",
    "AffineCoupling",
    "ArchitectureMismatch",
    "ConditionEmbedding",
    "FixedPermutation",
    "Flow",
    "NonFiniteActivation",
    "PowerScaledNormal",
    "RQSplineParams",
    "SplineCoupling",
    "SplineInversionFailure",
    "StandardNormal",
    "UniformTruncatedNormalMix",
    "VolumePreservingCoupling",
    "build_flow",
    "latent_from_descriptor",
    "load_checkpoint",
    "make_subnet",
    "rq_spline_apply",
    "save_checkpoint",
]
