"""Concatenated and collaborative multi-head attention, CP-based conversion
between them, and key/query redundancy analysis."""

from .analysis import (
    CostReport,
    EnergySpectrum,
    flop_count,
    head_spectrum,
    layer_spectrum,
    param_count,
    shared_dim_for_energy,
)
from .attention import (
    AttentionDims,
    CollabMHAParams,
    ConcatMHAParams,
    MixingKind,
    MixingMatrix,
    ScoreDecomposition,
    collab_mha_forward,
    concat_mha_forward,
    fold_key_bias,
    scaled_dot_attention,
    score_decomposition,
)
from .decompose import (
    ALSConfig,
    CPFactors,
    CPResult,
    Init,
    StackedQKTensor,
    cp_als,
    exact_expand,
    reconstruction_error,
    reparametrize,
    stack_qk,
)
from .grad import CollabGradients, ToyTaskConfig, collab_backward, train_toy

__version__ = "0.1.0"
