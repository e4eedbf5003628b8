"""Desk-scale mixture-of-low-rank-experts lab with instruction-guided routing."""

from .estimator import MoLERegressor
from .experts import ConfigError, LoRAExpert, MoLELayer, expert_forward, init_experts, mole_forward
from .losses import LossReport, UsageStats, aux_loss, ortho_loss, task_loss, total_loss, usage_stats
from .routing import (
    GateNet,
    LayerPolicyMap,
    RoutingDecision,
    consistency,
    expert_choice_route,
    fragmentation,
    igr_route,
    routing_logit_count,
    token_topk_route,
    topk,
)
from .signal import InstructionEncoding, PerceiverBottleneck, ToyEncoder, distill, fuse_global, signal_variant
from .tensor import ParamStore, ShapeError, Tensor, attention, grad_check, layer_norm, matmul, softmax
from .training import (
    AdamW,
    Batch,
    ExperimentConfig,
    Model,
    TaskSpec,
    eval_task_loss,
    make_task_suite,
    micro_gradcheck,
    run_experiment,
    sample_batch,
    train_step,
)

__version__ = "0.1.0"
