"""Exact machine unlearning by optimal relabelling of the forget set.

Linear heads on random features are unlearned exactly in closed form;
small MLPs use an alternating relabel / fine-tune loop.
"""

from .data import Dataset, Scenario, encode_targets, filter_classes, load_idx, split_scenario, synth_gaussian
from .metrics import MetricsReport, avg_gap, evaluate
from .numerics import SingularMatrixError, projector_exact, projector_woodbury, schur_block_inverse
from .rf_model import featurize, init_head, minnorm_fit, sample_rf_map, sgd_fit
from .unlearn_linear import finetune, gap_decomposition, muso_labels, retrain
from .unlearn_nn import MusoConfig, init_mlp, mlp_train, muso_unlearn

__version__ = "0.1.0"
