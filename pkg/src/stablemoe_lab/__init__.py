"""Two-stage MoE routing lab: learn and distill a router, freeze it, then train the experts."""

from .corpus import CorpusSplit, detokenize, load_corpus, tokenize
from .evaluation import evaluate_ppl
from .exceptions import ContractError, DimensionError, IntegrityError, StableMoEError
from .fluctuation import cumulative_curve, expert_token_report, last_fluctuation_step, record_snapshot
from .model import ModelConfig, MoELanguageModel
from .reporting import RunManifest, emit_reports, run_compare
from .training import TrainConfig, Trainer, load_model, run_two_stage

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "CorpusSplit",
    "DimensionError",
    "IntegrityError",
    "ModelConfig",
    "MoELanguageModel",
    "RunManifest",
    "StableMoEError",
    "TrainConfig",
    "Trainer",
    "cumulative_curve",
    "detokenize",
    "emit_reports",
    "evaluate_ppl",
    "expert_token_report",
    "last_fluctuation_step",
    "load_corpus",
    "load_model",
    "record_snapshot",
    "run_compare",
    "run_two_stage",
    "tokenize",
]
