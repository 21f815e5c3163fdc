"""Large-kernel convolutional attention in equivalent attention, convolution,
and spectral realizations, with a tape autodiff engine, a small vision
classifier, desk-scale training, and FLOP/MAC accounting."""

from .attention import (
    VIEW_ATTENTION,
    VIEW_CONVOLUTION,
    VIEW_SPECTRAL,
    AttentionMatrix,
    LKCAKernel,
    LKCALayer,
    ValueProjection,
    backward,
    count_flops,
    count_params,
    forward,
    forward_attention_view,
    forward_conv_view,
    forward_spectral_view,
    init_layer,
    unroll_kernel_to_attention,
    with_view,
)
from .autodiff import (
    GradCheckReport,
    Tape,
    Var,
    cross_entropy_smoothed,
    finite_diff,
    grad_check,
    register_primitive,
    relative_error,
)
from .bench import BenchCase, BenchResult, run_case, run_suite
from .model import (
    CheckpointError,
    ModelConfig,
    VisionModel,
    bind_params,
    build_model,
    count_model_params,
    load_checkpoint,
    model_forward,
    param_registry,
    patchify,
    predict,
    save_checkpoint,
    unpatchify,
)
from .tensor import (
    MacCounter,
    NumericsError,
    SeededRng,
    ShapeError,
    cross_correlate_2d,
    grid_fold,
    grid_unfold,
)
from .train import (
    AdamWState,
    Dataset,
    IdxFormatError,
    Schedule,
    TrainConfig,
    adamw_step,
    cosine_lr,
    evaluate,
    gen_stripes,
    init_adamw,
    load_idx,
    train_loop,
    write_idx,
    write_metrics_csv,
)

__version__ = "0.1.0"
