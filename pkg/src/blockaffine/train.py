"""Deterministic adapter-only training with analytic memory accounting."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapters import AdapterConfig, param_count
from .model import (
    DESK_NONLINEARITIES,
    DESK_SHAPES,
    FrozenLinearModel,
    SyntheticTask,
    attach_adapters,
    build_model,
    generate_task,
)
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    as_dtype,
    backward,
    log_softmax,
    mul,
    no_tape,
    reduce_sum,
    scale,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# losses

def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = add(pred, scale(Tensor._wrap(np.asarray(target, dtype=pred.data.dtype)), -1.0))
    return scale(reduce_sum(mul(diff, diff)), 1.0 / diff.size)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = reduce_sum(mul(log_softmax(logits), Tensor._wrap(onehot)))
    return scale(picked, -1.0 / len(labels))


def task_loss(task: SyntheticTask, pred: Tensor, target: np.ndarray) -> Tensor:
    if task.kind == "teacher_student_regression":
        return mse_loss(pred, target)
    return cross_entropy_loss(pred, target)


# --------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is not None:
                p.data = p.data - p.data.dtype.type(self.lr) * g


class AdamW:
    """Adam with decoupled weight decay; state exists only for ``params``."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            ty = p.data.dtype.type
            self.m[i] = ty(b1) * self.m[i] + ty(1 - b1) * g
            self.v[i] = ty(b2) * self.v[i] + ty(1 - b2) * g * g
            update = (self.m[i] / ty(c1)) / (np.sqrt(self.v[i] / ty(c2)) + ty(self.eps))
            if self.weight_decay:
                update = update + ty(self.weight_decay) * p.data
            p.data = p.data - ty(self.lr) * update

    @property
    def state_bytes(self) -> int:
        return sum(a.nbytes for a in self.m) + sum(a.nbytes for a in self.v)


# --------------------------------------------------------------------------
# runs

@dataclass(frozen=True)
class TrainRun:
    adapter: AdapterConfig
    task: SyntheticTask = field(default_factory=SyntheticTask)
    layer_shapes: tuple[tuple[int, int], ...] = DESK_SHAPES
    nonlinearities: tuple[str, ...] = DESK_NONLINEARITIES
    model_seed: int = 0
    optimizer: str = "adamw"
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 64
    seed: int = 0
    dtype: str = "f32"
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        as_dtype(self.dtype)
        for n, m in self.layer_shapes:
            self.adapter.check_shape(n, m)

    def metadata(self) -> dict:
        d = asdict(self)
        d["adapter"] = self.adapter.to_dict()
        d["layer_shapes"] = [list(s) for s in self.layer_shapes]
        d["nonlinearities"] = list(self.nonlinearities)
        d["betas"] = list(self.betas)
        if self.adapter.variant == "lora":
            d["lora_init"] = "A ~ Normal(0, 1/sqrt(r)), B = 0"
        return d


@dataclass
class MemoryReport:
    """Tracked-buffer bytes by category; ``peak_tracked_bytes`` is their sum."""

    params: int
    grads: int
    optimizer_state: int
    cached_delta_w: int

    @property
    def peak_tracked_bytes(self) -> int:
        return self.params + self.grads + self.optimizer_state + self.cached_delta_w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["peak_tracked_bytes"] = self.peak_tracked_bytes
        return d


def account_memory(run: TrainRun) -> MemoryReport:
    """Analytic byte counts from shapes and dtype.

    Bone in cached mode keeps one ``[out, in]`` weight-sized buffer per
    adapted matrix alive until backward; lora keeps its ``[batch, r]``
    low-rank activation. Recompute mode keeps neither.
    """
    item = as_dtype(run.dtype).itemsize
    p = param_count(run.layer_shapes, run.adapter) * item
    opt = 2 * p if run.optimizer == "adamw" else 0
    cached = 0
    if not run.adapter.recompute:
        if run.adapter.variant == "lora":
            cached = len(run.layer_shapes) * run.batch_size * run.adapter.rank * item
        else:
            cached = sum(n * m for n, m in run.layer_shapes) * item
    return MemoryReport(params=p, grads=p, optimizer_state=opt, cached_delta_w=cached)


@dataclass
class TrainResult:
    model: FrozenLinearModel
    log: list[tuple[int, float]]
    final_loss: float
    memory: MemoryReport

    def loss_at(self, step: int) -> float:
        return self.log[step][1]


def prepare(run: TrainRun) -> tuple[FrozenLinearModel, Tensor, np.ndarray]:
    base = build_model(run.layer_shapes, run.nonlinearities, run.model_seed, run.dtype)
    X, y = generate_task(run.task, base)
    model = attach_adapters(base, run.adapter, seed=run.seed)
    return model, X, y


def _batches(n: int, batch: int, rng: np.random.Generator):
    buf = np.empty(0, dtype=np.intp)
    while True:
        while buf.size < batch:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch]
        buf = buf[batch:]


def evaluate(model: FrozenLinearModel, task: SyntheticTask, X: Tensor, y: np.ndarray) -> float:
    with no_tape():
        return task_loss(task, model.forward(X), y).item()


def train(run: TrainRun) -> TrainResult:
    """Optimize the adapter slots of ``run``.

    ``log[k]`` is the full-dataset loss before update ``k``; ``final_loss``
    is measured after the last update. Minibatches are drawn from seeded
    per-epoch permutations.
    """
    model, X, y = prepare(run)
    params = model.parameters()
    if run.optimizer == "sgd":
        opt = SGD(params, run.lr)
    else:
        opt = AdamW(params, run.lr, run.betas, run.eps, run.weight_decay)
    frozen = [lay.weight.data.copy() for lay in model.layers]
    batches = _batches(X.shape[0], run.batch_size, np.random.default_rng([run.seed, 2]))
    Xd = X.data
    history: list[tuple[int, float]] = []
    variant = run.adapter.variant
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(run.steps):
                history.append((step, evaluate(model, run.task, X, y)))
                idx = next(batches)
                with Tape() as tape:
                    loss = task_loss(run.task, model.forward(Tensor._wrap(Xd[idx])), y[idx])
                opt.step(backward(loss, tape))
            final = evaluate(model, run.task, X, y)
    except NonFiniteError as exc:
        step = len(history)
        raise TrainingDiverged(f"{variant}: non-finite values at step {step} (lr={run.lr}): {exc}") from exc
    for w, lay in zip(frozen, model.layers):
        assert np.array_equal(w, lay.weight.data), "frozen weight changed"
    log.debug("%s seed=%d: loss %.6g -> %.6g", variant, run.seed, history[0][1] if history else final, final)
    return TrainResult(model, history, final, account_memory(run))
