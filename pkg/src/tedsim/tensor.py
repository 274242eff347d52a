"""Dense float64 building blocks with hand-written backward passes.

Includes Megatron-style column- and row-parallel linear layers. Those take a
comm object (anything with ``all_reduce(group, buf)``) and skip communication
entirely when the tensor group has a single member.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from tedsim.fabric import Group


class SupportsAllReduce(Protocol):
    def all_reduce(self, group: Group, buf, width: int = ...) -> np.ndarray: ...


@dataclass(frozen=True)
class Partition:
    """Which slice of a full tensor a rank holds.

    ``kind`` is ``"none"`` (replicated), ``"column"`` (last axis split) or
    ``"row"`` (first axis split) into ``parts`` equal pieces. ``expert`` tags
    expert-owned tensors.
    """

    kind: str = "none"
    index: int = 0
    parts: int = 1
    expert: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("none", "column", "row"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if not 0 <= self.index < self.parts:
            raise ValueError(f"shard {self.index} out of range for {self.parts} parts")

    def take(self, full: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return full
        axis = full.ndim - 1 if self.kind == "column" else 0
        size = full.shape[axis]
        if size % self.parts:
            raise ValueError(f"axis of length {size} cannot be split into {self.parts} parts")
        k = size // self.parts
        sl = [slice(None)] * full.ndim
        sl[axis] = slice(self.index * k, (self.index + 1) * k)
        return full[tuple(sl)]


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    partition: Partition = Partition()
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def is_expert(self) -> bool:
        return self.partition.expert is not None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def seeded_init(shape: Sequence[int], seed, partition: Partition = Partition(), scale: float = 1.0) -> np.ndarray:
    """Draw the full tensor from ``seed`` then return the requested shard.

    Sharded ranks therefore hold exact slices of the serial parameters.
    ``seed`` may be an int or a sequence of ints (hashed by SeedSequence).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    full = rng.standard_normal(tuple(shape)) * scale
    return np.ascontiguousarray(partition.take(full))


# -- dense ops ---------------------------------------------------------------


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape} @ W {W.shape}")
    y = x @ W
    if b is not None:
        y = y + b
    return y


def linear_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Return (dx, dW, db) for ``y = x @ W + b``."""
    if dy.shape != (x.shape[0], W.shape[1]):
        raise ValueError(f"dy shape {dy.shape} does not match output ({x.shape[0]}, {W.shape[1]})")
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner)


# -- tensor-parallel linear layers --------------------------------------------


def column_parallel_forward(x_full: np.ndarray, W_shard: np.ndarray, b_shard: np.ndarray | None = None) -> np.ndarray:
    """Local output columns; no communication."""
    return linear_forward(x_full, W_shard, b_shard)


def column_parallel_backward(comm: SupportsAllReduce, group: Group, x_full, W_shard, dy_shard):
    """Weight grads are local; the input grad is summed over the tensor group."""
    dx_partial, dW, db = linear_backward(x_full, W_shard, dy_shard)
    dx = comm.all_reduce(group, dx_partial) if group.size > 1 else dx_partial
    return dx, dW, db


def row_parallel_forward(comm: SupportsAllReduce, group: Group, x_shard, W_shard, b: np.ndarray | None = None):
    """Sum of per-shard partial products, replicated on every member; bias added after the reduce."""
    partial = linear_forward(x_shard, W_shard)
    y = comm.all_reduce(group, partial) if group.size > 1 else partial
    if b is not None:
        y = y + b
    return y


def row_parallel_backward(x_shard, W_shard, dy_full):
    """(dx_shard, dW_shard, db); no communication since dy is replicated."""
    return linear_backward(x_shard, W_shard, dy_full)
