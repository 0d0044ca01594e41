"""Model-agnostic multi-bit text watermarking via bit-flip unbiased reweighting.

Embedding XORs a pseudorandomly selected message bit with a one-time-pad
mask to obtain fair coin flips, which drive a stack of mass-preserving
probability transfers between fixed balanced vocabulary bipartitions.
Detection reverses the XOR from token memberships alone — no model access —
and recovers the message by majority vote, with a one-proportion z-test for
presence.
"""

__version__ = "0.1.0"

from .detect import (
    DetectionReport,
    GreenStats,
    VotingMatrix,
    detect,
    expected_green_stats,
    extract_message,
    extraction_rate,
    gather_votes,
    green_count,
    p_value,
    reference_green_count,
    type2_error,
    z_score,
)
from .embed import (
    EmbedParams,
    GenerationTrace,
    Message,
    StepRecord,
    coin_flips,
    generate,
    sample_token,
    watermark_step,
)
from .errors import (
    BimarkError,
    ContractViolationError,
    DimensionError,
    DomainError,
    ParseError,
    StatisticUndefinedError,
)
from .prf import (
    ContextWindow,
    CounterRng,
    SeedDomain,
    SeenContextLog,
    WatermarkKey,
    derive_partitions,
    derive_seed,
    prf_mask,
    prf_position,
    read_key_file,
    write_key_file,
)
from .profiles import DetectionProfile, ExperimentConfig, read_tokens, write_tokens
from .reweight import (
    PartitionStack,
    ProbabilityDistribution,
    ScalingFactors,
    VocabularyBipartition,
    bit_flip_reweight,
    green_indicator,
    multilayer_reweight,
    partition_mass,
    scaling_factors,
)
from .toylm import DistributionTrace, SyntheticLM, TraceLM, entropy, load_trace, save_trace
