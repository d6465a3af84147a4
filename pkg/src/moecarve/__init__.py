"""Training-free conversion of dense SwiGLU FFN blocks into shared+routed
mixture-of-experts layers."""

from .carve import CarveResult, ExpertWeights, MoeFfn, RouterWeights, carve, carve_moe
from .grouping import MoeConfig, Partition
from .moe_runtime import dense_forward, moe_forward, route, route_batch
from .profiler import ActivationProfile, DenseFfn, build_profile

__all__ = [
    "ActivationProfile",
    "CarveResult",
    "DenseFfn",
    "ExpertWeights",
    "MoeConfig",
    "MoeFfn",
    "Partition",
    "RouterWeights",
    "build_profile",
    "carve",
    "carve_moe",
    "dense_forward",
    "moe_forward",
    "route",
    "route_batch",
]
