"""Block-affine adapters and the LoRA baseline.

Weights are stored ``[out_features, in_features]`` and a layer computes
``X @ (W + dW).T``. With ``n = out`` and ``m = in`` the column grouping
trains ``n * b`` parameters per matrix and the row grouping ``m * b``.

Every bone variant evaluates ``dW`` block by block over the canonical
``b x b`` tiling of ``W``::

    col           dW[r, c] = W[r, c] @ bone[r] + bone[r]
    row           dW[r, c] = W[r, c] @ bone[c] + bone[c]
    both          dW[r, c] = W[r, c] @ bone[a(r, c)] + bone[a(r, c)]
    unconstrained dW[r, c] = W[r, c] @ A[c] + B[c]
    hadamard      dW[r, c] = W[r, c] * bone[c] + bone[c]

where ``a`` maps each block (in row-major block order) to one of ``g``
shared bone blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_dtype,
    batched_block_matmul,
    checkpoint,
    gather_blocks,
    matmul,
    mul,
    no_tape,
    permute,
    reshape,
    tile_blocks,
    transpose2d,
)

VARIANTS = ("lora", "bone_col", "bone_row", "bone_both", "bone_unconstrained", "bone_hadamard")
BONE_VARIANTS = VARIANTS[1:]


class ConfigError(ValueError):
    """Adapter configuration does not fit a weight shape."""


@dataclass(frozen=True)
class AdapterConfig:
    variant: str
    block_size: int | None = None
    groups: int | None = None
    rank: int | None = None
    recompute: bool = False
    # block index (row-major) -> group; None means contiguous chunks
    assignment: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "lora":
            if not self.rank or self.rank < 1:
                raise ConfigError("lora needs a positive rank")
        else:
            if not self.block_size or self.block_size < 1:
                raise ConfigError(f"{self.variant} needs a positive block_size")
            if self.variant == "bone_both" and (not self.groups or self.groups < 1):
                raise ConfigError("bone_both needs a positive group count")

    @property
    def size(self) -> int:
        """``b`` for bone variants, ``r`` for lora."""
        return self.rank if self.variant == "lora" else self.block_size

    def check_shape(self, n: int, m: int) -> None:
        if self.variant == "lora":
            if self.rank > min(n, m):
                raise ConfigError(f"lora rank {self.rank} exceeds min({n}, {m})")
            return
        b = self.block_size
        if n % b or m % b:
            raise ConfigError(f"block_size {b} does not divide weight shape ({n}, {m})")
        if self.variant == "bone_both":
            nblocks = (n // b) * (m // b)
            if nblocks % self.groups:
                raise ConfigError(f"groups {self.groups} does not divide {nblocks} blocks of shape ({n}, {m})")
            if self.assignment is not None:
                block_assignment(n, m, b, self.groups, self.assignment)

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "recompute": self.recompute}
        if self.variant == "lora":
            d["r"] = self.rank
        else:
            d["b"] = self.block_size
        if self.groups is not None:
            d["g"] = self.groups
        if self.assignment is not None:
            d["assignment"] = list(self.assignment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        known = {"variant", "b", "r", "g", "recompute", "assignment"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown adapter keys {sorted(extra)}")
        if "variant" not in d:
            raise ConfigError("adapter section needs a variant")
        assignment = d.get("assignment")
        return cls(
            variant=d["variant"],
            block_size=d.get("b"),
            groups=d.get("g"),
            rank=d.get("r"),
            recompute=bool(d.get("recompute", False)),
            assignment=tuple(assignment) if assignment is not None else None,
        )


@dataclass
class AdapterState:
    """Trainable tensors of one adapter on one frozen matrix."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def block_assignment(n: int, m: int, b: int, groups: int,
                     assignment: Sequence[int] | None = None) -> np.ndarray:
    """Group index for each block of an ``(n, m)`` matrix, in row-major block order.

    Without an explicit assignment, consecutive runs of ``nblocks / groups``
    blocks share a group. An explicit one must be total and balanced.
    """
    nblocks = (n // b) * (m // b)
    if nblocks % groups:
        raise ConfigError(f"groups {groups} does not divide {nblocks} blocks")
    per = nblocks // groups
    if assignment is None:
        return np.repeat(np.arange(groups), per)
    a = np.asarray(assignment, dtype=np.intp)
    if a.shape != (nblocks,):
        raise ConfigError(f"assignment must list all {nblocks} blocks, got {a.size}")
    if a.min() < 0 or a.max() >= groups:
        raise ConfigError(f"assignment values must lie in [0, {groups})")
    counts = np.bincount(a, minlength=groups)
    if (counts != per).any():
        raise ConfigError(f"unbalanced assignment: expected {per} blocks per group, got {counts.tolist()}")
    return a


# --------------------------------------------------------------------------
# delta-W constructions

def _blocks(W: Tensor, b: int) -> tuple[int, int, Tensor]:
    n, m = W.shape
    if n % b or m % b:
        raise ConfigError(f"block_size {b} does not divide weight shape ({n}, {m})")
    return n // b, m // b, reshape(W, (n // b, b, m // b, b))


def _expect(t: Tensor, shape: tuple, what: str) -> None:
    if t.shape != shape:
        raise ShapeError(f"{what} must have shape {shape}, got {t.shape}")


def delta_w_square(W: Tensor, bone: Tensor) -> Tensor:
    """Full-size block affine: ``W @ bone + bone`` for square ``W``."""
    if W.data.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"delta_w_square needs a square matrix, got {W.shape}")
    _expect(bone, W.shape, "bone")
    return add(matmul(W, bone), bone)


def delta_w_col(W: Tensor, bone: Tensor) -> Tensor:
    b = bone.shape[-1]
    R, C, W4 = _blocks(W, b)
    _expect(bone, (R, b, b), "bone")
    # [C, R, b, b]: the shared index (row block) sits second
    Wb = permute(W4, (2, 0, 1, 3))
    out = add(batched_block_matmul(Wb, bone), tile_blocks(bone, C))
    return reshape(permute(out, (1, 2, 0, 3)), W.shape)


def delta_w_row(W: Tensor, bone: Tensor) -> Tensor:
    b = bone.shape[-1]
    R, C, W4 = _blocks(W, b)
    _expect(bone, (C, b, b), "bone")
    Wb = permute(W4, (0, 2, 1, 3))
    out = add(batched_block_matmul(Wb, bone), tile_blocks(bone, R))
    return reshape(permute(out, (0, 2, 1, 3)), W.shape)


def delta_w_grouped(W: Tensor, bone: Tensor, assignment: Sequence[int] | None = None) -> Tensor:
    g, b, _ = bone.shape
    R, C, W4 = _blocks(W, b)
    _expect(bone, (g, b, b), "bone")
    idx = block_assignment(*W.shape, b, g, assignment)
    Wb = reshape(permute(W4, (0, 2, 1, 3)), (1, R * C, b, b))
    shared = gather_blocks(bone, idx)
    out = add(batched_block_matmul(Wb, shared), tile_blocks(shared, 1))
    return reshape(permute(reshape(out, (R, C, b, b)), (0, 2, 1, 3)), W.shape)


def delta_w_unconstrained(W: Tensor, A: Tensor, B: Tensor) -> Tensor:
    b = A.shape[-1]
    R, C, W4 = _blocks(W, b)
    _expect(A, (C, b, b), "A")
    _expect(B, (C, b, b), "B")
    Wb = permute(W4, (0, 2, 1, 3))
    out = add(batched_block_matmul(Wb, A), tile_blocks(B, R))
    return reshape(permute(out, (0, 2, 1, 3)), W.shape)


def delta_w_hadamard(W: Tensor, bone: Tensor) -> Tensor:
    b = bone.shape[-1]
    R, C, W4 = _blocks(W, b)
    _expect(bone, (C, b, b), "bone")
    Wb = permute(W4, (0, 2, 1, 3))
    t = tile_blocks(bone, R)
    out = add(mul(Wb, t), t)
    return reshape(permute(out, (0, 2, 1, 3)), W.shape)


def lora_delta_w(A: Tensor, B: Tensor) -> Tensor:
    return matmul(A, B)


def delta_w(W: Tensor, state: AdapterState, config: AdapterConfig) -> Tensor:
    v = config.variant
    if v == "lora":
        return lora_delta_w(state["A"], state["B"])
    if v == "bone_col":
        return delta_w_col(W, state["bone"])
    if v == "bone_row":
        return delta_w_row(W, state["bone"])
    if v == "bone_both":
        return delta_w_grouped(W, state["bone"], config.assignment)
    if v == "bone_unconstrained":
        return delta_w_unconstrained(W, state["A"], state["B"])
    return delta_w_hadamard(W, state["bone"])


# --------------------------------------------------------------------------
# state, forward, merge

def state_shapes(config: AdapterConfig, shape: tuple[int, int]) -> dict[str, tuple[int, ...]]:
    n, m = shape
    config.check_shape(n, m)
    v = config.variant
    if v == "lora":
        return {"A": (n, config.rank), "B": (config.rank, m)}
    b = config.block_size
    if v == "bone_col":
        return {"bone": (n // b, b, b)}
    if v == "bone_both":
        return {"bone": (config.groups, b, b)}
    if v == "bone_unconstrained":
        return {"A": (m // b, b, b), "B": (m // b, b, b)}
    return {"bone": (m // b, b, b)}


def init_adapter(config: AdapterConfig, shape: tuple[int, int],
                 rng: np.random.Generator, dtype="f32") -> AdapterState:
    """Zero-delta initial state. Only lora draws from ``rng`` (its ``A``)."""
    dt = as_dtype(dtype)
    tensors = {}
    for name, s in state_shapes(config, shape).items():
        if config.variant == "lora" and name == "A":
            arr = rng.normal(0.0, 1.0 / np.sqrt(config.rank), size=s).astype(dt)
        else:
            arr = np.zeros(s, dtype=dt)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return AdapterState(tensors)


def init_adapters(config: AdapterConfig, shapes: Sequence[tuple[int, int]],
                  seed: int, dtype="f32") -> list[AdapterState]:
    rng = np.random.default_rng(seed)
    return [init_adapter(config, tuple(s), rng, dtype) for s in shapes]


def adapter_forward(X: Tensor, W: Tensor, state: AdapterState, config: AdapterConfig) -> Tensor:
    """``X @ (W + dW).T`` for ``X [batch, in]`` and ``W [out, in]``.

    LoRA uses the factored path ``X @ W.T + (X @ B.T) @ A.T`` so no
    ``[out, in]`` buffer is formed. With ``config.recompute`` the whole
    adapted product is wrapped in :func:`checkpoint`.
    """
    if X.data.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ShapeError(f"input {X.shape} does not match weight [out, in] = {W.shape}")
    names = list(state.tensors)

    def fn(x, *params):
        st = AdapterState(dict(zip(names, params)))
        if config.variant == "lora":
            low = matmul(matmul(x, transpose2d(st["B"])), transpose2d(st["A"]))
            return add(matmul(x, transpose2d(W)), low)
        return matmul(x, transpose2d(add(W, delta_w(W, st, config))))

    params = [state.tensors[k] for k in names]
    if config.recompute:
        return checkpoint(fn, X, *params)
    return fn(X, *params)


def merge(W: Tensor, state: AdapterState, config: AdapterConfig) -> Tensor:
    """Plain ``W + dW`` for adapter-free inference."""
    with no_tape():
        return add(W, delta_w(W, state, config)).detach()


# --------------------------------------------------------------------------
# parameter accounting

def matrix_param_count(n: int, m: int, config: AdapterConfig) -> int:
    config.check_shape(n, m)
    v, b = config.variant, config.block_size
    if v == "lora":
        return (n + m) * config.rank
    if v == "bone_col":
        return n * b
    if v in ("bone_row", "bone_hadamard"):
        return m * b
    if v == "bone_both":
        return config.groups * b * b
    return 2 * m * b


def param_count(layer_shapes: Sequence[tuple[int, int]], config: AdapterConfig) -> int:
    return sum(matrix_param_count(n, m, config) for n, m in layer_shapes)


def format_millions(count: int) -> str:
    """One-decimal millions, truncated (87,031,808 -> '87.0M', 72,876,032 -> '72.8M')."""
    return f"{count // 100_000 / 10:.1f}M"


def _llama2_7b() -> list[tuple[int, int]]:
    h, f = 4096, 11008
    layer = [(h, h)] * 4 + [(f, h), (f, h), (h, f)]
    return layer * 32


CATALOGS: dict[str, list[tuple[int, int]]] = {
    # q, k, v, o, gate, up, down per decoder layer, as [out, in]
    "llama2-7b": _llama2_7b(),
    "llama2-7b-attn": [(4096, 4096)] * 4 * 32,
    "desk": [(64, 64), (64, 64)],
}
