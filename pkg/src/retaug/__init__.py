"""Retrieval-augmented detection toolkit.

Exact cosine retrieval over embedding tables, hard/easy negative mining
with hinge losses, a cross-attention feature augmenter with hand-derived
gradients, and logit ensembling, all deterministic and CPU-only.
"""

from .augmenter import (
    AugmenterParams,
    RafBatch,
    RafHyperParams,
    RafLossResult,
    augment,
    augment_batch,
    aux_logits,
    build_M,
    decoder_forward,
    init_params,
    load_checkpoint,
    pseudo_label,
    raf_grad,
    raf_loss,
    raf_loss_and_grad,
    save_checkpoint,
    train,
)
from .concepts import (
    ConceptRecord,
    ConceptStore,
    RetrievedConcepts,
    ingest_concepts,
    read_concept_jsonl,
    retrieve,
    write_concept_jsonl,
)
from .config import PipelineConfig, default_config, load_config
from .ensemble import LogitBundle, classify, ensemble, ensemble_bundle, ensemble_matrix
from .errors import RetaugError
from .negatives import (
    NegativeVocabularySets,
    RankMatrix,
    VocabularyStore,
    build_negative_sets,
    build_store,
    compute_ranks,
    derive_item_seed,
    filter_by_rank_variance,
    sample_iteration,
)
from .ral import RalBatchItem, RalBatchResult, RalHyperParams, avg_similarity, ral_total
from .store import (
    EmbeddingTable,
    TopKResult,
    bottomk,
    build_table,
    load_table,
    save_table,
    subset,
    topk,
    union_tables,
)

__version__ = "0.1.0"

__all__ = [
    "AugmenterParams",
    "ConceptRecord",
    "ConceptStore",
    "EmbeddingTable",
    "LogitBundle",
    "NegativeVocabularySets",
    "PipelineConfig",
    "RafBatch",
    "RafHyperParams",
    "RafLossResult",
    "RalBatchItem",
    "RalBatchResult",
    "RalHyperParams",
    "RankMatrix",
    "RetaugError",
    "RetrievedConcepts",
    "TopKResult",
    "VocabularyStore",
    "augment",
    "augment_batch",
    "aux_logits",
    "avg_similarity",
    "bottomk",
    "build_M",
    "build_negative_sets",
    "build_store",
    "build_table",
    "classify",
    "compute_ranks",
    "decoder_forward",
    "default_config",
    "derive_item_seed",
    "ensemble",
    "ensemble_bundle",
    "ensemble_matrix",
    "filter_by_rank_variance",
    "ingest_concepts",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_table",
    "pseudo_label",
    "raf_grad",
    "raf_loss",
    "raf_loss_and_grad",
    "ral_total",
    "read_concept_jsonl",
    "retrieve",
    "sample_iteration",
    "save_checkpoint",
    "save_table",
    "subset",
    "topk",
    "train",
    "union_tables",
    "write_concept_jsonl",
]
