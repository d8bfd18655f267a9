"""Bounded-memory attention: fixed slot counts, control-vector writes,
batch/recurrent equivalence, and a toy trainer plus decode benchmarks."""

from .attention import (
    AttentionConfig,
    AttnState,
    GradTape,
    LayerParams,
    StrategySpec,
    init_attn_state,
    init_layer_params,
    mha_backward,
    mha_forward,
    pseudo_query_memory,
)
from .memory import (
    BoundedMemory,
    TransitionOp,
    build_memory,
    full_attention,
    readout,
    readout_normalized,
    step,
    zero_memory,
)
from .numerics import NumericError, finite_diff_grad, make_rng, outer, softmax
from .strategies import (
    ClusterControl,
    CompressiveControl,
    ControlStrategy,
    DilatedControl,
    LinformerControl,
    LocalToGlobalControl,
    MlpControl,
    RandomSlotControl,
    WindowControl,
    cluster_assign,
    centroids_via_phi,
    dilated_step,
    phi_at,
    phi_matrix,
    phi_mlp_prefix,
    phi_mlp_sequence,
)
from .toymodel import (
    DecoderState,
    SiteSpec,
    TaskSpec,
    ToyLM,
    ToyModelConfig,
    ToySeq2Seq,
    forward_lm,
    greedy_decode,
    train,
)

__version__ = "0.1.0"
