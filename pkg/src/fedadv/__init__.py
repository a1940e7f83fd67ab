"""Desk-scale federated learning with cross-round adversarial noise.

Simulates FedAvg with parameter clipping and Gaussian noise, lets one
client accumulate input perturbations from the global models it receives,
and measures how that accumulated noise changes the success and
transferability of standard evasion attacks.
"""

from .attacks import (
    AdversarialBatch,
    AttackConfig,
    attack_with_timing,
    bim,
    craft,
    fgsm,
    pgd,
    save_adversarial_pair,
)
from .crn import (
    CrnConfig,
    CrnState,
    CrnUninitializedError,
    crn_as_init,
    crn_init_full,
    crn_update,
    load_crn,
    save_crn,
    zeros_state,
)
from .datasets import (
    Dataset,
    Partition,
    gen_synthetic,
    hflip,
    load_fds1,
    partition_noniid,
    preprocess,
    save_fds1,
    split_train_test,
)
from .experiment import (
    AttackSpec,
    ConfigError,
    DataConfig,
    ExperimentPlan,
    parse_config,
    parse_config_text,
    preset_plan,
    run_experiment,
    serialize_config,
    write_report,
)
from .federation import (
    FedConfig,
    FedState,
    add_gaussian_noise,
    aggregate,
    clip_params,
    crn_start_round,
    params_digest,
    run_federation,
    write_round_log,
)
from .metrics import (
    EvalRecord,
    aasr,
    aetr,
    aetr_breakdown,
    asr,
    clean_accuracy,
    evaluate_batch,
)
from .model import (
    Architecture,
    ModelParams,
    TrainingDivergedError,
    cross_entropy_from_logits,
    default_architecture,
    flatten_params,
    forward,
    format_architecture,
    init_params,
    load_checkpoint,
    loss_and_input_grad,
    make_architecture,
    full_scale_architecture,
    parse_architecture,
    predict,
    save_checkpoint,
    train_epochs,
    unflatten_params,
)
from .rng import derive_rng
from .tensor_ops import NonFiniteError, channel_mean_center, project_linf

__version__ = "0.1.0"
