"""Zero-shot text-guided image style transfer via loss-guided diffusion sampling."""

from .config import GuidanceWeights, RunConfig, load_preset, list_presets, validate_config
from .content import ContentWeights, ContrastiveConfig, FeatureStack
from .errors import DiffstyleError
from .models import CheckpointDescriptor, build_toy_unet, load_pretrained
from .pipeline import GuidanceEvaluator, RunResult, StyleTask, run_from_manifest, run_task
from .sampler import DiffusionState, SamplerConfig, sample
from .schedule import NoiseSchedule, RespacedSchedule, make_linear_schedule, respace
from .style import PatchPolicy, PromptPair, StyleWeights

__version__ = "0.1.0"

__all__ = [
    "CheckpointDescriptor",
    "ContentWeights",
    "ContrastiveConfig",
    "DiffstyleError",
    "DiffusionState",
    "FeatureStack",
    "GuidanceEvaluator",
    "GuidanceWeights",
    "NoiseSchedule",
    "PatchPolicy",
    "PromptPair",
    "RespacedSchedule",
    "RunConfig",
    "RunResult",
    "SamplerConfig",
    "StyleTask",
    "StyleWeights",
    "build_toy_unet",
    "list_presets",
    "load_preset",
    "load_pretrained",
    "make_linear_schedule",
    "respace",
    "run_from_manifest",
    "run_task",
    "sample",
    "validate_config",
]
