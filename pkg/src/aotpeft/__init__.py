"""Parameter-efficient fine-tuning for a frozen transformer encoder, built
around per-token bias tables that fuse to zero inference overhead, plus the
usual baselines, a training/grid harness, a row-addressable table store for
multi-task serving, and a latency benchmark.
"""

from .errors import (
    AotPeftError,
    BatchCompositionError,
    ConfigError,
    FormatError,
    InputError,
    NumericError,
    ShapeError,
)
from .forward import build_params, forward, run_backward, run_forward
from .numerics import (
    GradPair,
    Tensor,
    activation,
    finite_diff_grad,
    layer_norm,
    make_rng,
    matmul,
    softmax_rows,
)
from .peft import (
    Adapter,
    AotFC,
    AotKron,
    BiasTable,
    BitFit,
    Full,
    FusedAotState,
    LoRA,
    PTv1,
    PTv2,
    adapter_bottleneck,
    apply_aot,
    bitfit_shift,
    count_trainable,
    decompose_aot_attention,
    fc_row,
    fused_table_bytes,
    init_peft_state,
    kron_row,
    lora_linear,
    materialize_table,
    ptv1_prepend,
    ptv2_attention,
)
from .taskstore import (
    TaskBundle,
    TaskRegistry,
    load_table,
    memory_budget,
    multitask_forward,
    read_rows,
    write_table,
)
from .training import (
    AdamState,
    GridSpace,
    TaskSpec,
    TrainConfig,
    adam_step,
    grid_search,
    make_task,
    train_task,
)
from .transformer import (
    Backbone,
    LayerWeights,
    ModelConfig,
    attention,
    embed,
    encoder_layer,
    init_backbone,
)
from .harness import BenchConfig, BenchReport, measure, top_tokens_by_norm

__version__ = "0.1.0"
