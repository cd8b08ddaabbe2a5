"""Multi-attack adversarial training with variance risk extrapolation on small MLPs."""

from .attacks import AttackResult, Domain, perturb_with_restarts, project_ball, steepest_step
from .diffnet import Batch, NetworkParams, backward, cross_entropy, forward, init_network
from .defenses import DefenseConfig, EpochStats, OptimState, TrainerState, train_epoch
from .evalharness import DomainSet, EvalReport, ensemble_accuracy, evaluate_report, select_checkpoint

__version__ = "0.1.0"
