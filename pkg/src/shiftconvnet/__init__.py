"""Trainable stereo disparity estimation with a shift-convolution cost
volume, a coarse-to-fine decoder, and warp-guided refinement."""

from .autograd import (
    ContractViolation,
    Tensor,
    backward,
    conv2d,
    grad_check,
    hslice_pad,
    leaky_relu,
    maxpool2d,
    transposed_conv2d,
)
from .data import (
    CodecError,
    StereoSample,
    SynthConfig,
    gen_synthetic_pair,
    load_dataset,
    read_pfm,
    read_pnm,
    resize_nearest,
    write_dataset,
    write_pfm,
    write_pnm,
)
from .losses import LossConfig, d1_rate, epe, loss1, loss2, smooth_l1
from .matching import (
    CONCAT_THEN_CONV,
    CONV_THEN_CONCAT,
    ShiftConvConfig,
    auto_shift_conv,
    correlation_1d,
    shift_concat,
    shift_conv_layer,
    warp_horizontal,
)
from .network import (
    CORRELATION,
    SHIFT_CONV,
    ForwardOutputs,
    NetworkConfig,
    ShiftConvNet,
    desk_config,
    tiny_config,
)
from .training import (
    Adam,
    NumericalError,
    TrainConfig,
    ablation_suite,
    evaluate,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train_stage,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CodecError",
    "CONCAT_THEN_CONV",
    "CONV_THEN_CONCAT",
    "CORRELATION",
    "ContractViolation",
    "ForwardOutputs",
    "LossConfig",
    "NetworkConfig",
    "NumericalError",
    "SHIFT_CONV",
    "ShiftConvConfig",
    "ShiftConvNet",
    "StereoSample",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "ablation_suite",
    "auto_shift_conv",
    "backward",
    "conv2d",
    "correlation_1d",
    "d1_rate",
    "desk_config",
    "epe",
    "evaluate",
    "gen_synthetic_pair",
    "grad_check",
    "hslice_pad",
    "leaky_relu",
    "load_checkpoint",
    "load_dataset",
    "loss1",
    "loss2",
    "lr_schedule",
    "maxpool2d",
    "read_pfm",
    "read_pnm",
    "resize_nearest",
    "save_checkpoint",
    "shift_concat",
    "shift_conv_layer",
    "smooth_l1",
    "tiny_config",
    "train_stage",
    "transposed_conv2d",
    "warp_horizontal",
    "write_dataset",
    "write_pfm",
    "write_pnm",
]
