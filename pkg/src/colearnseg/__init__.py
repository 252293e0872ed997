"""Co-learned multi-modality fusion CNN for PET-CT region detection and segmentation."""

from .tensor import Tensor, Parameter, backward, no_grad, zero_grads
from .model import ColearnConfig, ColearnNet, ModelParams
from .baselines import FusedInputNet, FusionRatio, MultiBranchNet, MultiChannelNet, intermix
from .training import (
    AugmentConfig,
    LossConfig,
    OptimizerState,
    TrainConfig,
    class_scale,
    scaled_ce_loss,
    sgd_momentum_step,
    train,
    two_fold_validate,
)
from .phantom import (
    PhantomSpec,
    StudySlice,
    adaptive_threshold_lungs,
    connected_threshold_tumor,
    generate_dataset,
    generate_study,
    kfold_split,
    suv_normalize,
)
from .metrics import MetricsReport, confusion, dice, foreground_aggregate, metrics, paired_ttest
from .gradcheck import finite_diff_check
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
