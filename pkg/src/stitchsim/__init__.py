"""stitchsim: representation similarity indices, model stitching, and
energy-based OOD analysis of stitched representations, at desk scale.

The package is organized as:

* ``numerics`` -- SVD, pseudoinverse, nuclear norm, low-rank approximation
* ``simindex`` -- LCKA, PWCCA, OPD, Procrustes, direct-matching distance
* ``nets`` -- small feedforward nets with manual backprop
* ``stitching`` -- affine stitching layers: direct / task-loss matching
* ``ood`` -- energy scores, margin fine-tuning, AUROC separability
* ``stats`` -- rank correlations, linear probing, sensitivity/specificity
* ``datasets`` / ``harness`` / ``cli`` -- synthetic data and experiments
"""

__version__ = "0.1.0"

from .activations import ActivationSet, read_activations, write_activations
from .errors import DegenerateInputError, TrainingDivergedError
from .nets import FeedforwardNet, LabeledDataset, TrainConfig, accuracy, init_net, train
from .ood import EnergyDetector, auroc, energy_margin_loss, energy_score, separability
from .simindex import cca, dm_structural_distance, lcka, opd, preprocess, procrustes_solve, pwcca
from .stats import kendall_tau, layer_identification, linear_probe, spearman_rho
from .stitching import AffineMap, StitchSpec, apply_map, fit_direct, relative_accuracy, train_tlm

__all__ = [
    "ActivationSet", "read_activations", "write_activations",
    "DegenerateInputError", "TrainingDivergedError",
    "FeedforwardNet", "LabeledDataset", "TrainConfig", "accuracy", "init_net", "train",
    "EnergyDetector", "auroc", "energy_margin_loss", "energy_score", "separability",
    "cca", "dm_structural_distance", "lcka", "opd", "preprocess", "procrustes_solve", "pwcca",
    "kendall_tau", "layer_identification", "linear_probe", "spearman_rho",
    "AffineMap", "StitchSpec", "apply_map", "fit_direct", "relative_accuracy", "train_tlm",
    "__version__",
]
