"""Cross-modal retrieval with a shared encoder stack over frozen embedding
sequences: a small reverse-mode tensor engine, tied transformer/linear
encoders, ranking + contrastive objectives, retrieval metrics, and a
deterministic training loop."""

from .autodiff import Tape, Tensor, backward, grad_check
from .data import (
    EmbeddingSequence,
    PairedDataset,
    SynthSpec,
    batch_iter,
    collate,
    generate_synthetic,
    load_dataset,
    split_by_audio,
    write_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    EmptySequenceError,
    IntegrityError,
    NumericFault,
    ParseError,
    SchemaError,
    ShapeError,
    TiedrankError,
)
from .evaluate import (
    RetrievalReport,
    evaluate,
    metrics_from_ranks,
    rank_of_target,
    report_from_json,
    similarity_matrix,
)
from .features import frame_count, logmel_spectrogram, mel_filterbank
from .gradcheck import (
    GroupResult,
    format_report,
    run_and_report,
    run_model_suite,
    run_suites,
)
from .losses import LossConfig, combined_loss, contrastive_loss, triplet_ranking_loss
from .model import (
    PRESETS,
    ModelConfig,
    TiedRetrievalModel,
    copy_model,
    forward_batch,
    init_model,
    load_checkpoint,
    preset_config,
    save_checkpoint,
)
from .train import (
    TrainConfig,
    TrainResult,
    ablation_grid,
    adam_step,
    materialize_embeddings,
    scheduler_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "grad_check",
    "EmbeddingSequence", "PairedDataset", "SynthSpec", "batch_iter", "collate",
    "generate_synthetic", "load_dataset", "split_by_audio", "write_dataset",
    "CheckpointError", "ConfigError", "ContractError", "DatasetError",
    "EmptySequenceError", "IntegrityError", "NumericFault", "ParseError",
    "SchemaError", "ShapeError", "TiedrankError",
    "RetrievalReport", "evaluate", "metrics_from_ranks", "rank_of_target",
    "report_from_json", "similarity_matrix",
    "frame_count", "logmel_spectrogram", "mel_filterbank",
    "GroupResult", "format_report", "run_and_report", "run_model_suite",
    "run_suites",
    "LossConfig", "combined_loss", "contrastive_loss", "triplet_ranking_loss",
    "PRESETS", "ModelConfig", "TiedRetrievalModel", "copy_model",
    "forward_batch", "init_model", "load_checkpoint", "preset_config",
    "save_checkpoint",
    "TrainConfig", "TrainResult", "ablation_grid", "adam_step",
    "materialize_embeddings", "scheduler_step", "train",
    "__version__",
]
