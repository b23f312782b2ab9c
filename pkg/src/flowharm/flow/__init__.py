from .masks import CouplingMask, channel_mask, checkerboard_mask
from .model import (
    FlowArchitecture,
    FlowModel,
    bits_per_dim,
    bits_per_dim_from_nll,
    build_flow,
    dequantize,
    flow_forward,
    log_likelihood,
)
from .subnet import ChannelNorm, ConcatELU, CouplingSubnet, max_levels
from .transforms import (
    CouplingLayer,
    DequantizationFlow,
    SqueezeOp,
    coupling_forward,
    coupling_inverse,
)

__all__ = [
    "CouplingMask",
    "channel_mask",
    "checkerboard_mask",
    "FlowArchitecture",
    "FlowModel",
    "bits_per_dim",
    "bits_per_dim_from_nll",
    "build_flow",
    "dequantize",
    "flow_forward",
    "log_likelihood",
    "ChannelNorm",
    "ConcatELU",
    "CouplingSubnet",
    "max_levels",
    "CouplingLayer",
    "DequantizationFlow",
    "SqueezeOp",
    "coupling_forward",
    "coupling_inverse",
]
