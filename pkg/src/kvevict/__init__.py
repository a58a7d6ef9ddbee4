"""Budget-constrained KV-cache eviction policies with a toy transformer,
trace replay, and an experiment harness.

Policies compose an importance score (random / recency / aas / aqas / ltas /
mas) with an eviction scope (all / local window / sink / top-std); the six
canonical combinations are random, streamllm, scissorhands, h2o, tova, and
roco.
"""

from .analysis import (
    consistency_experiment,
    generation_agreement,
    jaccard,
    perplexity,
    scope_sweep,
    std_trajectory,
    write_csv,
)
from .errors import CacheFullError, ConfigurationError, KvEvictError, TraceFormatError
from .kv_cache import (
    BudgetSpec,
    CacheSet,
    HeadCache,
    ImportanceStats,
    ResolvedBudget,
    resolve_budget,
    stats_overhead,
)
from .policies import (
    ImportanceMethod,
    Policy,
    ScopeMethod,
    eviction_scope,
    group_average,
    importance_scores,
    policy_from_name,
    select_victims,
    std_scores,
    with_resolved_scope,
)
from .tensor_core import attention_step, matmul, softmax_row
from .toy_model import (
    EOS_TOKEN,
    GenerationResult,
    ModelConfig,
    StepOutput,
    ToyModel,
    forward_step,
    generate,
    init_model,
    load_model,
    save_model,
)
from .trace_io import (
    AttentionTrace,
    ReplayResult,
    TraceHeader,
    mask_and_renormalize,
    read_trace,
    replay,
    trace_from_generation,
    write_trace,
)

__version__ = "0.1.0"
