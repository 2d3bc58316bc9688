"""Class-incremental learning with contrastive class concentration,
two-level distillation, rehearsal memory, and a linear-probe toolkit that
decomposes catastrophic forgetting into intra-phase forgetting, inter-phase
confusion, and classifier deviation."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .engine import run_experiment

__all__ = ["ExperimentConfig", "load_config", "run_experiment", "__version__"]
