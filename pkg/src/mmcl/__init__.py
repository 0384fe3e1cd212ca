"""Min-margin contrastive losses for partitioned query embeddings.

Losses, their analytic gradients and a finite-difference checker, a Hungarian
matcher, distribution metrics, and a toy matched-set decoder for end-to-end
training experiments.
"""

from .errors import (ConfigurationError, InvalidInputError, MMCLError, NonFiniteLossError,
                     OracleFailure, QueryFileError)
from .gradcheck import GradCheckReport, finite_difference_gradient, verify_gradient
from .linalg import SimilarityTensor, cosine_similarity, row_normalize
from .losses import (LOSSES, LossConfig, LossResult, compute_loss, iic_loss, imc_loss,
                     ime_loss, infonce_loss, margin_mask, mmcl_loss, npair_loss, oca_loss,
                     rank_weights)
from .matcher import Assignment, solve_assignment
from .metrics import (MetricsReport, align_groups, group_class_consistency,
                      homogeneity_coefficient, interclass_similarity, margin_satisfaction,
                      metrics_report, per_class_homogeneity)
from .optimize import collapsed_queries, optimize_queries, random_queries
from .partition import PartitionSpec, partition_queries
from .surrogate import (Scene, SceneParams, SurrogateModel, TrainConfig, TrainTrace,
                        base_loss, forward, generate_scene, init_model, run_training,
                        train_step)

__version__ = "0.1.0"
