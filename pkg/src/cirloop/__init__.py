"""Multi-round composed image retrieval evaluation engine.

The interaction loop (compose -> fuse history -> rank -> feed back),
its metrics, and the benchmark-forging pipeline. Retrieval, caption, and
image-generation models stay behind remote endpoints or precomputed
files; everything in-process is exact and deterministic.
"""

from .compose import (
    Caption,
    ComposerBinding,
    QueryVector,
    ReplayComposer,
    RemoteComposer,
    ToyComposer,
    build_composer,
    toy_compose,
    toy_text_direction,
)
from .errors import (
    CirLoopError,
    ComposeError,
    ConfigError,
    ForgeError,
    GalleryError,
    GalleryFormatError,
    MetricsError,
    RankingError,
    ReplayKeyError,
    SessionError,
    SimulatorError,
    TransportError,
)
from .feedback import (
    DatasetProfile,
    Feedback,
    FeedbackRequest,
    FISD_CATEGORIES,
    CaptionPipelineSimulator,
    DirectDiffSimulator,
    OracleSimulator,
    PromptTemplate,
    SimulatorBinding,
    build_simulator,
    frozen_feedback,
    load_template,
)
from .gallery import EmbeddingGallery, GalleryEntry, load_gallery, normalize, write_gallery
from .metrics import (
    EvalReport,
    compare_reports,
    hits_at_k,
    make_report,
    map_at_k,
    rank_stats,
    recall_at_k,
    write_report_csv,
    write_report_json,
)
from .ranking import (
    HistoryList,
    NextRefPolicy,
    Ranking,
    fuse_history,
    rank_gallery,
    select_next_reference,
    target_rank,
)
from .session import (
    EvalConfig,
    EvalRun,
    QueryTriplet,
    RoundRecord,
    Session,
    SessionTrace,
    Status,
    apply_pool_narrowing,
    load_triplets_jsonl,
    read_traces_jsonl,
    run_batch,
    run_session,
    write_traces_jsonl,
    write_triplets_jsonl,
)

__version__ = "0.1.0"
