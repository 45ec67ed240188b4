"""Slice-aware multi-branch decoder segmentation on anisotropic volumes.

A from-scratch numpy stack: reverse-mode autodiff tensors, the multi-input
multi-output encoder/decoder with slice-centric attention, Dice-family
losses with dense pairwise coupling, an anisotropic phantom pipeline,
sliding-window volumetric inference, and the full metric suite.
"""

from .tensor import (
    OptimState,
    Tensor,
    backward,
    bilinear_upsample,
    conv2d,
    depthwise_conv2d,
    grad_check,
    no_grad,
    pointwise_activation,
    relu,
    same_padding,
    separable_conv2d,
    sgd_momentum_step,
    sigmoid,
    softmax_over_classes,
)
from .model import (
    EncoderTaps,
    Model,
    ModelConfig,
    build_model,
    count_flops,
    count_params,
    decode_multibranch,
    decode_singlebranch,
    encode,
    forward,
    forward_batch,
    load_checkpoint,
    sab,
    save_checkpoint,
)
from .losses import (
    EPSILON,
    LossValue,
    dcd_loss,
    dice_loss,
    lambda_weight,
    pair_weights,
    pairwise_dice,
    total_loss,
)
from .volume import (
    DataError,
    Phantom,
    PhantomConfig,
    TrainingSample,
    Volume,
    augment,
    coverage_counts,
    extract_windows,
    gen_phantom,
    hu_window,
    read_svol,
    resample_z,
    write_svol,
)
from .inference import (
    ProbVolume,
    argmax_labels,
    largest_component,
    postprocess,
    sliding_window_predict,
)
from .metrics import (
    aggregate,
    case_metrics,
    dice,
    dice_global,
    paired_ttest,
    rvd,
    surface_distances,
    surface_points,
    voe,
)
from .experiment import (
    DatasetConfig,
    ExperimentConfig,
    NumericError,
    RunRecord,
    ablate,
    predict_volume,
    train,
    write_phantom_dataset,
)

__version__ = "0.1.0"
