"""Stage orchestration, config, manifests and synthetic bundles."""

from .config import PipelineConfig
from .stages import COMMANDS, STAGES, run_all

__all__ = ["COMMANDS", "PipelineConfig", "STAGES", "run_all"]
