"""Multi-adapter reasoning engine.

Two reasoning lanes answer every problem: IR answers directly, and KG plus DR
answer through generated knowledge. Sampling repeats until both lanes have
produced the same canonical answer, and the knowledge pipeline builds the
aligned SFT datasets those adapter lanes are trained from.
"""

from .answers import (
    AnswerKind,
    AnswerValue,
    ExtractionStrategy,
    answers_equal,
    canonical_key,
    extract_final_answer,
    normalize_answer,
    render_answer,
)
from .core import (
    AdapterRole,
    DifficultyTag,
    FallbackPolicy,
    InteractionConfig,
    Knowledge,
    KnowledgeSet,
    Problem,
    Source,
    group_variants,
    validate_corpus,
)
from .backend import (
    GenerationRequest,
    GenerationResult,
    HttpBackend,
    ScriptTable,
    ScriptedBackend,
)
from .interaction import (
    RunMode,
    Transcript,
    TranscriptStatus,
    batch_run,
    decide_final,
    run_interaction,
    run_sc_cot,
)
from .augment import (
    build_knowledge_prompt,
    emit_sft_datasets,
    generate_knowledge,
    share_knowledge,
)
from .evalharness import (
    RunMetrics,
    bucket_by_difficulty,
    load_gsm8k,
    load_math,
    render_report,
    score_run,
)

__version__ = "0.1.0"
