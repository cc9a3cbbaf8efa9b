"""Finite-difference gradient checks and oracle sweeps for every adapter variant."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import reference as ref
from .adapters import (
    VARIANTS,
    AdapterConfig,
    AdapterState,
    adapter_forward,
    block_assignment,
    delta_w_col,
    delta_w_grouped,
    delta_w_hadamard,
    delta_w_row,
    delta_w_unconstrained,
    lora_delta_w,
    state_shapes,
)
from .tensor import Tape, Tensor, backward, mul, no_tape, reduce_sum

FD_STEP = 1e-5
TOLERANCE = {"f64": 1e-5, "f32": 1e-2}


def desk_config(variant: str, size: int = 4, groups: int = 2) -> AdapterConfig:
    if variant == "lora":
        return AdapterConfig("lora", rank=size)
    if variant == "bone_both":
        return AdapterConfig("bone_both", block_size=size, groups=groups)
    return AdapterConfig(variant, block_size=size)


def rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max abs deviation scaled by the largest expected magnitude."""
    denom = max(float(np.max(np.abs(expected), initial=0.0)), 1e-300)
    return float(np.max(np.abs(np.asarray(actual, dtype=np.float64) - expected), initial=0.0)) / denom


@dataclass
class GradCheckResult:
    variant: str
    seed: int
    dtype: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _squared_output(X: Tensor, W: Tensor, state: AdapterState, config: AdapterConfig) -> Tensor:
    Y = adapter_forward(X, W, state, config)
    return reduce_sum(mul(Y, Y))


def grad_check(variant: str, seed: int = 0, dtype: str = "f64", n: int = 16, batch: int = 8,
               config: AdapterConfig | None = None, corrupt: bool = False) -> GradCheckResult:
    """Backward vs central differences of ``sum((X (W + dW)^T)^2)`` at a random nonzero state.

    The difference quotient is always taken in float64 at the same point, so
    ``dtype='f32'`` measures float32 backward error against a float64 reference.
    ``corrupt`` perturbs one analytic entry and must make the check fail.
    """
    config = config or desk_config(variant)
    rng = np.random.default_rng([seed, 17])
    W64 = rng.normal(0, 1 / np.sqrt(n), size=(n, n))
    X64 = rng.standard_normal((batch, n))
    state64 = {k: rng.normal(0, 0.2, size=s) for k, s in state_shapes(config, (n, n)).items()}

    def as_tensors(dt, state_arrays, grad=True):
        return (Tensor(X64, dt), Tensor(W64, dt),
                AdapterState({k: Tensor(v, dt, requires_grad=grad) for k, v in state_arrays.items()}))

    X, W, state = as_tensors(dtype, state64)
    with Tape() as tape:
        loss = _squared_output(X, W, state, config)
    grads = backward(loss, tape)

    worst = 0.0
    for name, arr in state64.items():
        analytic = np.array(grads[state[name]], dtype=np.float64)
        if corrupt:
            analytic.flat[0] += 1e-2 * np.max(np.abs(analytic)) + 1e-3

        def f(x, name=name):
            arrays = dict(state64, **{name: x})
            Xf, Wf, st = as_tensors("f64", arrays, grad=False)
            with no_tape():
                return _squared_output(Xf, Wf, st, config).item()

        numeric = ref.central_difference(f, arr, FD_STEP)
        worst = max(worst, rel_err(analytic, numeric))
    return GradCheckResult(variant, seed, dtype, worst, TOLERANCE[dtype])


def grad_check_all(seeds: Iterable[int] = range(10), dtype: str = "f64",
                   variants: Iterable[str] = VARIANTS, corrupt: bool = False) -> list[GradCheckResult]:
    return [grad_check(v, s, dtype, corrupt=corrupt) for v in variants for s in seeds]


# --------------------------------------------------------------------------
# oracle sweep

@dataclass
class OracleResult:
    variant: str
    n: int
    m: int
    b: int
    seed: int
    rel_err: float


def oracle_case(variant: str, n: int, m: int, b: int, seed: int) -> OracleResult:
    """One vectorized delta-W evaluation against its pure-Python per-block loop."""
    rng = np.random.default_rng([seed, n, m, b])
    W = rng.standard_normal((n, m))
    R, C = n // b, m // b

    def blocks(k):
        return rng.standard_normal((k, b, b))

    if variant == "lora":
        A, B = rng.standard_normal((n, b)), rng.standard_normal((b, m))
        got = lora_delta_w(Tensor(A), Tensor(B)).data
        want = ref.naive_matmul(A, B)
    elif variant == "bone_col":
        k = blocks(R)
        got, want = delta_w_col(Tensor(W), Tensor(k)).data, ref.naive_delta_w_col(W, k)
    elif variant == "bone_row":
        k = blocks(C)
        got, want = delta_w_row(Tensor(W), Tensor(k)).data, ref.naive_delta_w_row(W, k)
    elif variant == "bone_both":
        g = 2 if (R * C) % 2 == 0 else 1
        k = blocks(g)
        got = delta_w_grouped(Tensor(W), Tensor(k)).data
        want = ref.naive_delta_w_grouped(W, k, block_assignment(n, m, b, g))
    elif variant == "bone_unconstrained":
        A, B = blocks(C), blocks(C)
        got = delta_w_unconstrained(Tensor(W), Tensor(A), Tensor(B)).data
        want = ref.naive_delta_w_unconstrained(W, A, B)
    elif variant == "bone_hadamard":
        k = blocks(C)
        got, want = delta_w_hadamard(Tensor(W), Tensor(k)).data, ref.naive_delta_w_hadamard(W, k)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return OracleResult(variant, n, m, b, seed, rel_err(got, want))


def oracle_sweep(dims=(8, 16, 32, 64), block_sizes=(2, 4, 8), seeds=range(5),
                 variants: Iterable[str] = VARIANTS) -> list[OracleResult]:
    return [oracle_case(v, n, m, b, s)
            for v in variants for n in dims for m in dims for b in block_sizes for s in seeds]
