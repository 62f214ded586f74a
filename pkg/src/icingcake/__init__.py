"""icingcake: post-learning head retraining with a numpy autodiff core."""

from .tensor import (
    GradTape,
    ShapeError,
    Tensor,
    backward,
    conv2d,
    cross_entropy,
    default_dtype,
    get_default_dtype,
    matmul,
    max_pool2d,
    relu,
    set_default_dtype,
    softmax,
)
from .network import (
    Adam,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Network,
    ReLU,
    ResidualBlock,
    SGD,
    SoftmaxHead,
    TrainConfig,
    evaluate,
    init_params,
    train,
)
from .data import (
    AugmentPolicy,
    DataFormatError,
    Dataset,
    augment_batch,
    batches,
    load_cifar,
    load_mnist,
    subset,
    synthetic_digits,
)
from .icing import (
    FeatureBank,
    Head,
    IcingConfig,
    apply_icing,
    evaluate_fast_path,
    extract_features,
    extractor_digest,
    head_of,
    load_feature_bank,
    retrain_head,
    save_feature_bank,
    swap_head,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .reports import SummaryTable, TrialReport, emit_report, summarize
from .experiment import ExperimentConfig, build_network, run_experiment

__version__ = "0.1.0"
