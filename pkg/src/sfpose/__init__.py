"""Source-free domain-adaptive 2D pose estimation at desk scale.

Three heatmap models (source, intermediate, target) are coupled by a
two-step adaptation loop: a source-protecting step finetunes the source
regressor and intermediate extractor against each other, and a
target-relevant step trains the target model with consistency,
contrastive and information-maximization objectives before folding it
into the intermediate model by exponential moving average. The
intermediate model is the one evaluated.
"""

__version__ = "0.1.0"

from .tensorgrad import Tensor, no_grad, backward, grad_check  # noqa: F401
from .posemaps import Keypoints, HeatmapSet, encode, decode, project, residual_pair  # noqa: F401
from .losses import (  # noqa: F401
    LossWeights,
    mse_heatmap,
    finetune_loss,
    residual_loss,
    contrastive_loss,
    im_loss,
    consistency_loss,
    target_objective,
)
from .models import (  # noqa: F401
    ArchConfig,
    PoseNet,
    ModelTriplet,
    EmaConfig,
    build_posenet,
    ema_update,
    save_checkpoint,
    load_checkpoint,
)
from .adapt import AdaptConfig, PretrainConfig, Schedule, Adam, Adapter, pretrain, adapt_loop  # noqa: F401
from .toydata import SkeletonSpec, DomainStyle, PoseSample, ToyDataset, generate, save_dataset, load_dataset  # noqa: F401
from .evalkit import PckConfig, EvalReport, pck, evaluate, run_ablation  # noqa: F401
