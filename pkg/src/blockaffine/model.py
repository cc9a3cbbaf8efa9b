"""Frozen base models and synthetic fine-tuning tasks."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .adapters import AdapterConfig, AdapterState, adapter_forward, init_adapters, merge, param_count
from .tensor import ShapeError, Tensor, as_dtype, matmul, tanh, transpose2d

NONLINEARITIES = ("tanh", "none")

DESK_SHAPES = ((64, 64), (64, 64))
DESK_NONLINEARITIES = ("tanh", "none")


@dataclass(frozen=True)
class Layer:
    weight: Tensor  # [out, in], frozen
    nonlinearity: str = "none"


@dataclass(frozen=True)
class FrozenLinearModel:
    layers: tuple[Layer, ...]
    config: AdapterConfig | None = None
    adapters: tuple[AdapterState, ...] | None = None

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lay.weight.shape for lay in self.layers]

    @property
    def dtype(self) -> str:
        return self.layers[0].weight.dtype

    def parameters(self) -> list[Tensor]:
        if self.adapters is None:
            return []
        return [t for st in self.adapters for t in st.parameters()]

    @property
    def num_trainable(self) -> int:
        return sum(t.size for t in self.parameters())

    def forward(self, X: Tensor) -> Tensor:
        h = X
        for i, lay in enumerate(self.layers):
            if self.adapters is None:
                h = matmul(h, transpose2d(lay.weight))
            else:
                h = adapter_forward(h, lay.weight, self.adapters[i], self.config)
            if lay.nonlinearity == "tanh":
                h = tanh(h)
        return h

    __call__ = forward

    def base(self) -> "FrozenLinearModel":
        return FrozenLinearModel(self.layers)

    def merged(self) -> "FrozenLinearModel":
        """Adapter-free model whose weights are ``W + dW``."""
        if self.adapters is None:
            return self
        layers = tuple(
            Layer(merge(lay.weight, st, self.config), lay.nonlinearity)
            for lay, st in zip(self.layers, self.adapters)
        )
        return FrozenLinearModel(layers)


def build_model(layer_shapes: Sequence[tuple[int, int]] = DESK_SHAPES,
                nonlinearities: Sequence[str] | None = None,
                seed: int = 0, dtype="f32") -> FrozenLinearModel:
    """Gaussian weights with std ``1/sqrt(in)``; shapes are ``(out, in)``."""
    shapes = [tuple(int(d) for d in s) for s in layer_shapes]
    if not shapes:
        raise ShapeError("model needs at least one layer")
    if nonlinearities is None:
        nonlinearities = ["tanh"] * (len(shapes) - 1) + ["none"]
    if len(nonlinearities) != len(shapes):
        raise ShapeError(f"{len(shapes)} layers but {len(nonlinearities)} nonlinearities")
    for (out_prev, _), (_, in_next) in zip(shapes, shapes[1:]):
        if out_prev != in_next:
            raise ShapeError(f"layer shapes do not chain: {shapes}")
    for nl in nonlinearities:
        if nl not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nl!r}")
    rng = np.random.default_rng(seed)
    dt = as_dtype(dtype)
    layers = []
    for (out, inp), nl in zip(shapes, nonlinearities):
        W = rng.normal(0.0, 1.0 / np.sqrt(inp), size=(out, inp))
        layers.append(Layer(Tensor(W.astype(dt), name="weight"), nl))
    return FrozenLinearModel(tuple(layers))


def attach_adapters(model: FrozenLinearModel, config: AdapterConfig, seed: int = 0) -> FrozenLinearModel:
    """New model with a freshly initialized adapter slot on every layer."""
    shapes = model.shapes
    for n, m in shapes:
        config.check_shape(n, m)
    states = init_adapters(config, shapes, seed, model.dtype)
    attached = replace(model, config=config, adapters=tuple(states))
    assert attached.num_trainable == param_count(shapes, config)
    return attached


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "teacher_student_regression"
    input_dim: int = 64
    output_dim: int = 64
    dataset_size: int = 4096
    seed: int = 0
    rank: int = 4        # teacher perturbation rank
    scale: float = 0.1   # teacher perturbation scale
    modulus: int = 7     # modular_classification only

    def __post_init__(self):
        if self.kind not in ("teacher_student_regression", "modular_classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def teacher_model(model: FrozenLinearModel, rank: int, scale: float, seed: int) -> FrozenLinearModel:
    """Base weights plus ``scale * U @ V.T`` with standard-normal ``U [out, rank]``, ``V [in, rank]``."""
    rng = np.random.default_rng(seed)
    layers = []
    for lay in model.layers:
        out, inp = lay.weight.shape
        U = rng.standard_normal((out, rank))
        V = rng.standard_normal((inp, rank))
        W = lay.weight.data.astype(np.float64) + scale * (U @ V.T)
        layers.append(Layer(Tensor(W.astype(lay.weight.data.dtype)), lay.nonlinearity))
    return FrozenLinearModel(tuple(layers))


def generate_task(task: SyntheticTask, model: FrozenLinearModel) -> tuple[Tensor, np.ndarray]:
    """Inputs and targets for ``task``; a pure function of ``task.seed`` and the base weights.

    Regression targets are float arrays ``[N, output_dim]``; classification
    targets are integer labels ``(a + b) mod k``.
    """
    in_dim, out_dim = model.shapes[0][1], model.shapes[-1][0]
    if (task.input_dim, task.output_dim) != (in_dim, out_dim):
        raise ShapeError(f"task dims ({task.input_dim}, {task.output_dim}) do not match model ({in_dim}, {out_dim})")
    dt = as_dtype(model.dtype)
    data_rng, teacher_seed = np.random.default_rng([task.seed, 0]), [task.seed, 1]
    N = task.dataset_size
    if task.kind == "teacher_student_regression":
        X = Tensor(data_rng.standard_normal((N, in_dim)).astype(dt))
        teacher = teacher_model(model.base(), task.rank, task.scale, teacher_seed)
        return X, teacher.forward(X).numpy()
    k = task.modulus
    if in_dim < 2 * k or out_dim < k:
        raise ShapeError(f"modular task with k={k} needs input_dim >= {2 * k} and output_dim >= {k}")
    a = data_rng.integers(0, k, size=N)
    b = data_rng.integers(0, k, size=N)
    X = np.zeros((N, in_dim), dtype=dt)
    X[np.arange(N), a] = 1
    X[np.arange(N), k + b] = 1
    return Tensor(X), (a + b) % k
