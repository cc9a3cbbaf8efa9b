"""Block-affine (Bone) adapters over frozen weights, with a LoRA baseline."""
from .adapters import (
    CATALOGS,
    VARIANTS,
    AdapterConfig,
    AdapterState,
    ConfigError,
    adapter_forward,
    delta_w,
    delta_w_col,
    delta_w_grouped,
    delta_w_hadamard,
    delta_w_row,
    delta_w_square,
    delta_w_unconstrained,
    format_millions,
    init_adapter,
    init_adapters,
    lora_delta_w,
    merge,
    param_count,
)
from .model import FrozenLinearModel, SyntheticTask, attach_adapters, build_model, generate_task
from .tensor import Tape, Tensor, backward, checkpoint
from .train import MemoryReport, TrainRun, account_memory, train

__version__ = "0.1.0"
