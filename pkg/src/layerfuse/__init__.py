"""layerfuse: multi-layer attentive probing on frozen vision-transformer features.

Per-layer CLS and average-pooled summary tokens are stacked into a small
matrix per sample and fused by a learned-query multi-head cross-attention
probe (or concatenated into a linear probe), trained with AdamW, cosine
annealing, class-weighted cross-entropy, and the full regularization stack.
Everything is deterministic given a seed and verifiable at desk scale on
synthetic feature stores.
"""

from .analysis import (
    GainRecord,
    HeatmapMatrix,
    accuracy_gain,
    aggregate_attention,
    balanced_accuracy,
    cka_rbf,
    emit_report,
    layer_similarity_curve,
)
from .diffcore import (
    OptState,
    TrainingDiverged,
    adamw_step,
    apply_jitter,
    attention_backward,
    attention_forward,
    clip_global_norm,
    compute_class_weights,
    cosine_lr,
    finite_difference_check,
    linear_forward,
    softmax_rows,
    weighted_ce,
)
from .estimator import FusionProbeClassifier
from .probes import (
    AttentiveProbe,
    LinearProbe,
    ProbeConfig,
    build_config,
    count_params,
    enumerate_params,
    fusion_backward,
    fusion_forward,
    init_probe,
    load_probe,
    make_aat_config,
    make_hybrid_config,
    probe_backward,
    probe_forward,
    save_probe,
)
from .reprstore import (
    FeatureStore,
    LayerScheme,
    StackedBatch,
    StoreFormatError,
    StoreMeta,
    assemble_batch,
    l2_normalize,
    pad_to_width,
    read_store,
    resolve_layers,
    stratified_split,
    write_store,
)
from .rng import RngStream
from .synthgen import SynthSpec, generate_mixed_width, generate_planted, generate_separable
from .trainer import (
    GridSpace,
    SplitSpec,
    TrainPlan,
    build_plan,
    grid_search,
    resolve_schedule,
    seed_study,
    train,
    train_on_arrays,
)

__version__ = "0.1.0"
