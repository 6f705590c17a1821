"""Continuous-time disease progression modeling on temporally detailed hypergraphs."""

from .errors import TDHNodeError
from .hypergraph import (
    MarkerId,
    OnsetMap,
    ProgressionHypergraph,
    TDHyperedge,
    TDHypergraph,
    Trajectory,
    binary_incidence,
    build_progression_hypergraph,
    onset_map_from_sequence,
    split_frontier,
    td_snapshot,
)
from .pathways import PathwaySet, bundled_pathways, load_pathway_file, resolve_pathways
from .model import ModelConfig, ProgressionModel, build_model
from .training import TrainConfig, load_checkpoint, model_from_checkpoint, save_checkpoint, train
from .metrics import MetricsReport, evaluate
from .data import (
    DiscretizationRule,
    GeneratorConfig,
    PatientSequence,
    generate_cohort,
    ingest,
    onset_labels,
    split_cohort,
)

__version__ = "0.1.0"

__all__ = [
    "TDHNodeError",
    "MarkerId",
    "Trajectory",
    "ProgressionHypergraph",
    "OnsetMap",
    "TDHyperedge",
    "TDHypergraph",
    "build_progression_hypergraph",
    "binary_incidence",
    "onset_map_from_sequence",
    "td_snapshot",
    "split_frontier",
    "PathwaySet",
    "bundled_pathways",
    "load_pathway_file",
    "resolve_pathways",
    "ModelConfig",
    "ProgressionModel",
    "build_model",
    "TrainConfig",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "MetricsReport",
    "evaluate",
    "DiscretizationRule",
    "GeneratorConfig",
    "PatientSequence",
    "generate_cohort",
    "ingest",
    "onset_labels",
    "split_cohort",
]
