"""Meta-learned batch-instance normalization for generalizable person retrieval.

A from-scratch reverse-mode autodiff engine over numpy, BN/IN/BIN layers with
a learnable per-channel balancing weight, the meta-learning trainer that
tunes those weights against simulated domain shift, a synthetic multi-domain
retrieval benchmark, and CMC/mAP evaluation.
"""

from .autograd import Tensor, backward, finite_diff_check, no_grad
from .data import (Batch, Domain, DomainDataset, GeneratorConfig, StyleSpec, generate,
                   load_dataset, sample_batch, save_dataset)
from .errors import (BatchCompositionError, ConfigError, ContractError, DegenerateStatisticsError,
                     EmptyBatchError, EvaluationError, FormatError, MetaBINError, NumericError,
                     SamplingError, ShapeError, TrainingError)
from .evaluation import RetrievalResult, evaluate_targets, rank_and_score
from .losses import (base_loss, batch_hard_triplet, cross_entropy_smoothed, inter_domain_shuffle,
                     intra_domain_scatter, meta_train_loss)
from .model import MetaBINNet, load_checkpoint, save_checkpoint
from .normalization import (BinLayerParams, batch_norm, bin_forward, instance_norm, read_rho_csv,
                            write_rho_csv)
from .trainer import (MetaBINTrainer, TrainConfig, baseline_config, cyclic_beta, domain_split,
                      probe_over_batches, rho_gradient_probe, train)

__version__ = "0.1.0"
