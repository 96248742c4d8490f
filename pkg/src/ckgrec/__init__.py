"""Confidence-aware knowledge-graph recommendation with LLM-assisted
graph augmentation, dual-view contrastive training, full-ranking evaluation
and confidence-guided explanations."""

from .augmenter import (
    AugmentationPools,
    Subgraph,
    build_prompt,
    extract_subgraph,
    parse_response,
    run_augmentation,
)
from .encoder import (
    ModelParams,
    attention_aggregate,
    confidence_aggregate,
    load_params,
    save_params,
    triplet_confidence,
)
from .errors import (
    BackendError,
    BudgetExceededError,
    CkgError,
    ConfigError,
    DataError,
    NonFiniteLossError,
)
from .evaluation import RankingResult, full_rank, ndcg_at_k, recall_at_k
from .explanation import (
    AugmentedKG,
    ExplanationResult,
    ReasonPath,
    build_augmented_kg,
    build_explanation_prompt,
    confidence_table,
    explain,
    extract_reason_paths,
    generate_explanation,
)
from .kg import (
    DatasetSplit,
    InteractionGraph,
    TripartiteKG,
    Triplet,
    Vocab,
    derive_ii_triplets,
    load_dataset,
    load_ia_triplets,
    load_ii_triplets,
    load_interactions,
    split_interactions,
)
from .lightgcn import PropagationState, final_embeddings, propagate
from .llm import (
    HttpBackend,
    LLMBackend,
    RecordingBackend,
    ReplayBackend,
    StubBackend,
    make_backend,
)
from .synthetic import SyntheticDataset, generate_dataset, write_tsv_dataset
from .training import (
    TrainConfig,
    TrainResult,
    bpr_loss,
    compute_batch_loss,
    contrastive_loss,
    evaluate_model,
    joint_loss,
    prepare_data,
    sample_negatives,
    train_model,
)
from .views import (
    DecisionMask,
    SampledPools,
    TripletArrays,
    ViewGraph,
    apply_decisions,
    build_view_graphs,
    cross_view_stability,
    gumbel_decisions,
    item_keep_probability,
    keep_probability,
    mask_interactions,
    sample_pools,
)

__version__ = "0.1.0"
