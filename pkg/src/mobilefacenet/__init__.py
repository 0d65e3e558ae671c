"""Engine for MobileFaceNet-style face embedding CNNs: building, cost and
receptive-field analysis, toy-scale margin-loss training, BN folding,
serialization and verification metrics."""

from .analysis import (
    CostReport,
    cost_report,
    count_madds,
    count_params,
    erf_map,
    importance_map,
    receptive_field,
)
from .arch import (
    ArchSpec,
    BottleneckSpec,
    PRIMARY_ROWS,
    Row,
    build_head_variant,
    build_mobilefacenet,
    build_model,
    expand_bottleneck,
    make_arch,
    shape_propagate,
)
from .pipeline import (
    EvalReport,
    PairList,
    cosine_similarity,
    embed,
    evaluate_kfold,
    fold_batchnorm,
    load_model,
    preprocess,
    save_model,
    tar_at_far,
)
from .tensor import Rng, ShapeError, rand_normal, tensor_new
from .training import (
    ArcFaceHead,
    TrainConfig,
    arcface_loss,
    classification_accuracy,
    desk_config,
    gen_toy_dataset,
    grad_check_model,
    lr_at,
    sgd_step,
    train_loop,
)

__version__ = "0.1.0"
