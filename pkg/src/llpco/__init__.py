"""Proportion-constrained contrastive clustering.

Learn a sample-level classifier when the only supervision is the class
proportion of each training bag (or one global proportion vector for the
whole region): bag samples are softly assigned to cluster prototypes by an
entropy-regularized transport solve whose row marginals are the prior
proportions, and two augmented views of each sample must predict each
other's assignments.
"""

from .bagging import Bag, PriorMode, PriorSetup, ProportionPrior, census_prior, empirical_bag_stats, make_epoch_bags
from .datagen import (
    AugmentationPolicy,
    PatchDataset,
    PatchRaster,
    VectorDataset,
    extract_patch,
    gen_blobs,
    gen_patch_world,
    load_dataset,
    patch_dataset,
    save_dataset,
    two_views,
    variance_mask,
)
from .loss import SwapLossResult, bag_proportion_loss, predicted_proportions, swap_loss
from .metrics import (
    KMeansResult,
    MetricsReport,
    accuracies,
    ari,
    confusion_matrix,
    hungarian_match,
    kmeans,
    knn_classify,
    nmi,
    predict_map,
)
from .model import (
    ModelConfig,
    ModelState,
    backward,
    encode,
    init_model,
    probabilities,
    prototype_scores,
)
from .sinkhorn import (
    MarginalSpec,
    TransportPlan,
    entropy,
    harden,
    lp_oracle,
    max_feasible_entropy,
    solve_codes,
)
from .trainer import (
    TrainConfig,
    TrainTrace,
    align_prototypes_to_prior,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
