"""Scale-tree crowd density estimation on a from-scratch autodiff engine."""

from .analysis import CostReport, Metrics, count_params_flops, evaluate_mae_mse, receptive_fields
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import (
    CrowdSample,
    SceneSpec,
    augment,
    downsample_density,
    generate_background_pool,
    generate_scene,
    imbalance_stats,
    load_dataset,
    render_density_gt,
    save_dataset,
)
from .enhancer import (
    CrossScaleGates,
    EnhancerBlock,
    EnhancerSpec,
    StandardBlock,
    build_enhancer,
    cross_scale_mix,
    enhancer_forward,
    resample_gates,
    stack_dense_enhancers,
)
from .gradcheck import GradCheckReport, grad_check
from .model import DensityModel, ModelSpec, ScaleTreeNet, build_model, strip_auxiliator
from .optim import AdamState, adam_init, adam_step
from .supervision import (
    CrowdLabel,
    MixedBatch,
    compose_batch,
    loss_background,
    loss_confidence,
    loss_density,
    loss_total,
    make_crowd_label,
)
from .tensor import (
    Tape,
    Tensor,
    affine_mix,
    backward,
    channel_concat,
    channel_split,
    conv2d,
    count_macs,
    maxpool2d,
    no_grad,
    pointwise,
    relu,
    scalar,
    sigmoid,
    zero_grads,
)
from .training import EpochLog, TrainConfig, parse_config, train_loop

__version__ = "0.1.0"
