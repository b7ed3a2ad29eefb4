"""Identify cognitive experts in mixture-of-experts routing traces and reinforce them at inference time."""

from .npmi import (
    CognitiveExpertSet,
    CountStats,
    NpmiReport,
    UndefinedNpmiError,
    count_stats,
    merge_stats,
    npmi,
    rank_experts,
    score_experts,
)
from .steering import SteeringConfig, from_ranked, parse_config, serialize_config
from .trace import (
    FORMAT_VERSION,
    ExpertKey,
    MarkerSet,
    ModelShape,
    RoutingEvent,
    TraceCorpus,
    TraceInstance,
    TraceParseError,
    read_corpus,
    read_table,
    validate_corpus,
    write_corpus,
)

__version__ = "0.1.0"
