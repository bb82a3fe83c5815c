"""Exact linear attention library: decomposable kernels, O(L) attention,
a toy MoE decoder stack, and the verification/benchmark tooling around them."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DegenerateRowError,
    ElaError,
    FinitenessError,
    FormatError,
    InputError,
    ShapeError,
    StalenessError,
    UsageError,
)
from .tensor import PRECISIONS, Tape, Tensor, backward, tensor3  # noqa: F401
from .kernels import (  # noqa: F401
    KERNEL_IDS,
    FeatureMapPair,
    KernelReport,
    feature_map_pair,
    validate_kernel,
)
from .attention import (  # noqa: F401
    AttentionConfig,
    DecodeState,
    attention,
    attention_backward,
    attention_quadratic,
    decode_step,
    linear_bidirectional,
    linear_causal,
    linear_forward,
    quadratic_oracle,
    stabilize_shift,
    start_decode,
)
from .model import (  # noqa: F401
    ModelConfig,
    ToyGPT,
    gpt_forward,
    load_checkpoint,
    moe_forward,
    parse_model_config,
    rms_norm,
    save_checkpoint,
    stream_start,
    stream_step,
)
from .training import (  # noqa: F401
    Corpus,
    TrainConfig,
    TrainResult,
    ablation_suite,
    load_corpus,
    make_desk_corpus,
    sample,
    train,
)
from .bench import (  # noqa: F401
    BenchRecord,
    bench_attention,
    fit_loglog_slope,
    speedup_at,
)
