"""Desk-scale text-based person search laboratory."""

from .geometry import BoundingBox, CandidatePool, generate_candidate_pool, iou, triangular_membership, visibility
from .synthetic import (
    DatasetConfig,
    DatasetSplits,
    PersonAttributes,
    SceneRecord,
    TextQuery,
    build_dataset,
    describe_person,
    generate_scene,
    load_dataset,
    render_person,
)
from .model import DualEncoder, ModelConfig, TokenFeatureMap, Tokenizer, similarity
from .spatial import InterventionConfig, ScoredCandidate, curriculum_stability, select_intervention
from .context import (
    BatchAssignment,
    DisentanglementMask,
    optimal_context_assignment,
    saliency_mask,
    synthesize_counterfactual,
)
from .regularization import adversarial_mask, reconstruction_loss, token_saliency
from .prototypes import alignment_weights, compute_prototypes, confidence_scores, weighted_loss_aggregate
from .losses import OimState, oim_loss, sdm_loss, total_loss
from .evaluation import (
    PerturbationSpec,
    RankedRetrievalList,
    apply_perturbation,
    average_precision,
    cmc_topk,
    evaluate_retrieval,
    gallery_size_sweep,
    rank_gallery,
)
from .training import RunConfig, train
from .harness import ablate, evaluate_checkpoint, sweep_gallery

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
