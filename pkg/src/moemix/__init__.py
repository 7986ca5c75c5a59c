"""moemix: a desk-scale sparse-MoE lab with dynamic data-mixture scheduling."""

from .errors import ConfigurationError, DataError, MoeMixError, NumericsError
from .moe_core import (
    BatchStats,
    MoEConfig,
    MoENetwork,
    PAD_ID,
    RoutingRecord,
    balance_loss,
    backward,
    cv_squared,
    forward_loss,
    top_k_route,
)
from .gate_stats import (
    DistanceSummary,
    GateLoadMatrix,
    NormalizedGateLoads,
    distance_summary,
    embedding_distance_summary,
    normalize_rows,
    probe_gate_loads,
)
from .scheduler import (
    SamplingWeights,
    SchedulerConfig,
    dynamic_update,
    inverse_update,
    make_policy,
    refloss_update,
)
from .synth_data import (
    CorpusManifest,
    DomainCorpus,
    DomainSpec,
    dataset_embedding,
    default_manifest,
    generate_corpora,
    generate_corpus,
    sample_batch,
)
from .trainer import RunConfig, run_refloss, run_sweep, run_training

__version__ = "0.1.0"
