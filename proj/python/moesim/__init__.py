"""Python access to the moesim expert-prefetch simulator."""

from ._moesim import (
    ConfigError,
    ColdStart,
    EngineConfig,
    HardwareSpec,
    ModelSpec,
    PolicyConfig,
    PredictorKind,
    Strategy,
    Trace,
    build_embedding_table,
    cli,
    compare,
    compute_step,
    find_preset,
    fit_decay,
    generate_trace,
    mean_pool,
    miss_rate,
    simulate,
    swap_in_latency,
    token_diversity,
    validate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
