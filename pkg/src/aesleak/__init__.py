"""Desk-scale laboratory for cache side-channel attacks on table-based AES.

The package wires three layers together: instrumented AES-128
implementations that emit ground-truth memory-access traces
(:mod:`aesleak.aes`), a modeled set-associative cache observed through a
noisy interrupt-driven channel (:mod:`aesleak.cache`,
:mod:`aesleak.noise`, :mod:`aesleak.observe`), and key-recovery engines
that reconstruct the key from what the channel leaks
(:mod:`aesleak.ttable`, :mod:`aesleak.lastround`).  The ``aesleak``
command line drives end-to-end experiments (:mod:`aesleak.cli`).
"""

from .aes import (
    INV_SBOX,
    SBOX,
    AccessTrace,
    Style,
    TableLayout,
    TraceEvent,
    encrypt_traced,
    expand_key,
    invert_key_schedule,
    unaccessed_line_probability,
)
from .cache import (
    CacheGeometry,
    CacheState,
    ContextSwitchProfile,
    ProbeResult,
    set_index,
)
from .lastround import (
    CorrelationResult,
    LastRoundRecovery,
    LeakageMatrix,
    build_leakage,
    build_prediction,
    correlate_key_byte,
    predict_line,
    recover_last_round_key,
)
from .noise import (
    NoiseProfile,
    NoiseStats,
    measure_noise_statistics,
    noise_free,
    sbox_replay,
    table1_four_ttable,
    table1_large_ttable,
)
from .observe import (
    EncryptionObservation,
    InsufficientDataError,
    ObservationRun,
    RoundSegmentation,
    SegmentationError,
    extract_observation,
    filter_noise,
    segment_rounds,
    synthesize_observations,
)
from .ttable import (
    KeyRecoveryResult,
    recover_key,
    run_recovery_trial,
    success_curve,
)

__version__ = "0.1.0"

__all__ = [
    "AccessTrace",
    "CacheGeometry",
    "ContextSwitchProfile",
    "CorrelationResult",
    "EncryptionObservation",
    "INV_SBOX",
    "InsufficientDataError",
    "KeyRecoveryResult",
    "LastRoundRecovery",
    "LeakageMatrix",
    "NoiseProfile",
    "NoiseStats",
    "ObservationRun",
    "ProbeResult",
    "RoundSegmentation",
    "SBOX",
    "SegmentationError",
    "Style",
    "TableLayout",
    "TraceEvent",
    "CacheState",
    "build_leakage",
    "build_prediction",
    "correlate_key_byte",
    "encrypt_traced",
    "expand_key",
    "extract_observation",
    "filter_noise",
    "invert_key_schedule",
    "measure_noise_statistics",
    "noise_free",
    "predict_line",
    "recover_key",
    "recover_last_round_key",
    "run_recovery_trial",
    "sbox_replay",
    "segment_rounds",
    "set_index",
    "success_curve",
    "synthesize_observations",
    "table1_four_ttable",
    "table1_large_ttable",
    "unaccessed_line_probability",
    "__version__",
]
