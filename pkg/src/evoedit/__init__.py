"""Lifelong free-text knowledge editing on a desk-scale decoder LM."""

__version__ = "0.1.0"

from .corpus import EditInstance, Rank, RankedQuery, Tokenizer  # noqa: F401
from .engine import EditRunConfig, EditState, apply_edit, run_stream  # noqa: F401
from .evaluation import EvalReport, bleu, evaluate_efficacy, evaluate_specificity, per_token_ppl  # noqa: F401
from .fusion import FusionCoefficients, ImportanceLedger, component_importance, fuse_parameters, select_top_k  # noqa: F401
from .model import ComponentId, ModelConfig, ModelParams, init_model  # noqa: F401
from .perturb import NoiseConfig, noise_bound, perturb_embeddings  # noqa: F401
