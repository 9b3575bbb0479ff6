"""External-feature watermarking and ownership verification for classifiers.

Workflow: style-transform a fraction of the training set (labels kept) and
train the deployed model on the result; train a benign reference on the
clean data; fit a meta-classifier on gradient-sign signatures of the two
models; verify a suspect model with a paired hypothesis test over sampled
transformed images.
"""

from .data import (
    ConfigurationError,
    ImageDataset,
    LabeledImage,
    PoisonPlan,
    ShapeError,
    StyleSpec,
    build_watermarked_dataset,
    build_watermarked_training_set,
    load_cifar10_binary,
    load_png_tree,
    load_style_image,
    make_color_jittered,
    make_default_style_image,
    make_synthetic_dataset,
    select_poison_indices,
    style_transform,
)
from .models import (
    ARCHITECTURES,
    ArchitectureError,
    ModelHandle,
    build_module,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, evaluate_accuracy, loss_gradient, train_model
from .stealing import (
    AttackChain,
    AttackConfig,
    AttackConfigError,
    QueryBudgetError,
    run_attack,
    run_attack_chain,
    steal_distillation,
    steal_finetune,
    steal_label_query,
    steal_logit_query,
    steal_zero_shot,
)
from .signatures import (
    GradientSignature,
    MetaClassifier,
    MetaTrainConfig,
    ParameterMask,
    build_meta_training_set,
    classify,
    extract_signature,
    mask_all,
    mask_head_bias,
    mask_last_layers,
    mask_random,
    train_meta_classifier,
)
from .verification import (
    VerificationReport,
    paired_t_test,
    student_t_sf,
    sweep_verification,
    verify_ownership,
)
from .backdoor import (
    BackdoorSpec,
    TriggerRecoveryConfig,
    attack_success_rate,
    badnets_poison,
    patch_transform,
    recover_trigger,
    white_square_spec,
)
from .pipeline import RunLedger, StageError, load_config, report_table, run_experiment

__version__ = "0.1.0"
