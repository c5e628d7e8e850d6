"""Discriminative prompt search for unique video captions.

Given a similarity tensor over (clip, caption owner, prompt, time advance),
pick for every clip the prompt combination whose caption makes the clip and
its caption mutual, strict nearest neighbours with the largest margin.
"""
from .embedding import (
    ClipSet,
    Embedding,
    PromptBank,
    SimilarityTensor,
    build_similarity_tensor,
    cosine,
    normalize,
)
from .errors import (
    BuildError,
    CaptionUnavailableError,
    FormatError,
    GenerationError,
    InvalidCombinationError,
    InvalidEmbeddingError,
    InvalidInputError,
    TrainingError,
    UndefinedMarginError,
    UniqcapError,
)
from .evaluation import (
    MetricReport,
    chance_baseline,
    cycle_at_1,
    evaluate_assignments,
    recall_at_k,
    retrieval_matrix,
)
from .formats import read_embeddings, read_tensor, write_embeddings, write_tensor
from .oracle import SyntheticInstance, TensorOracle, oracle_from_files, synth_generate
from .search import (
    PromptAssignment,
    PromptCombination,
    SearchConfig,
    assemble_caption,
    combo_similarity,
    enumerate_combinations,
    is_unique,
    margin,
    select_prompts,
    verify_uniqueness,
)

__version__ = "0.1.0"
