from .config import ConfigError, ExperimentConfig, expand_grid, load_config, parse_override
from .runner import (RunArtifacts, StageError, evaluate, resolve_attack_params, run,
                     run_attack_eval, run_attack_only, run_robustness_eval, write_report)

__all__ = [
    "ConfigError", "ExperimentConfig", "RunArtifacts", "StageError", "evaluate", "expand_grid",
    "load_config", "parse_override", "resolve_attack_params", "run", "run_attack_eval",
    "run_attack_only", "run_robustness_eval", "write_report",
]
