"""Desk-scale laboratory for backdoor attacks and a two-stage defense."""

from .data import (
    BlendTrigger,
    LabeledSet,
    PatchTrigger,
    PoisonConfig,
    apply_trigger,
    apply_trigger_batch,
    clean_subset,
    gen_synthetic,
    load_dataset,
    poison_dataset,
    poisoned_probe,
    save_dataset,
    train_test_split,
)
from .defense import (
    DefenseRun,
    FtConfig,
    NwcRecord,
    ReinitMask,
    UnlearnConfig,
    Variant,
    activeness_ft,
    compute_nwc,
    regulated_direction,
    regulated_grad,
    select_reinit_mask,
    tsbd_run,
    unlearn,
    zero_reinit,
)
from .metrics import (
    ActivationProfile,
    DefenseReport,
    accuracy,
    activation_profile,
    activation_rise,
    asr,
    coverage_ratio,
    der,
    neuron_grad_activeness,
    pearson,
    spearman,
    tac,
)
from .nn import (
    Activation,
    Batch,
    Direction,
    Gradients,
    Layer,
    Network,
    backward,
    forward,
    load_checkpoint,
    loss_ce,
    predict,
    save_checkpoint,
    sgd_step,
)
from .training import TrainConfig, init_network, train

__version__ = "0.1.0"
