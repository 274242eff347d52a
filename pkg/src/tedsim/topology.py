"""Tensor/expert/data virtual topologies.

Ranks are laid out on a (t, e, d) grid with the tensor index varying fastest::

    rank = t + G_tensor * (e + E * d)

Non-expert blocks see a 2D grid (tensor x nonexp-data, where the nonexp-data
index is the column ``e + E*d``); expert blocks see the 3D grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from tedsim.fabric import InvalidConfigError


@dataclass(frozen=True)
class TedConfig:
    world_size: int
    tensor: int
    experts: int
    expert_parallel: int
    data_exp: int
    data_nonexp: int

    def __post_init__(self) -> None:
        degrees = (self.world_size, self.tensor, self.experts, self.expert_parallel, self.data_exp, self.data_nonexp)
        if min(degrees) < 1:
            raise InvalidConfigError(f"all parallel degrees must be >= 1: {self}")
        if self.expert_parallel != self.experts:
            raise InvalidConfigError("expert-parallel degree must equal the number of experts")
        if self.tensor * self.expert_parallel * self.data_exp != self.world_size:
            raise InvalidConfigError("G_tensor * G_expert * G_data_exp must equal G")
        if self.tensor * self.data_nonexp != self.world_size:
            raise InvalidConfigError("G_tensor * G_data_nonexp must equal G")

    @classmethod
    def from_json(cls, doc: Mapping) -> "TedConfig":
        try:
            return derive_config(int(doc["world_size"]), int(doc["tensor_parallel"]), int(doc["experts"]))
        except KeyError as exc:
            raise InvalidConfigError(f"missing config field {exc.args[0]!r}") from None

    def coords(self, rank: int) -> tuple[int, int, int]:
        """(t, e, d) grid coordinates of ``rank``."""
        _check_rank(self, rank)
        t = rank % self.tensor
        col = rank // self.tensor
        return t, col % self.experts, col // self.experts

    def rank_of(self, t: int, e: int, d: int) -> int:
        return t + self.tensor * (e + self.experts * d)

    def column(self, rank: int) -> int:
        """Index of the rank's nonexp-data shard (its tensor group)."""
        _check_rank(self, rank)
        return rank // self.tensor


def derive_config(world_size: int, tensor: int, experts: int) -> TedConfig:
    if world_size < 1:
        raise InvalidConfigError(f"world_size must be >= 1, got {world_size}")
    if tensor < 1 or experts < 1:
        raise InvalidConfigError(f"tensor_parallel and experts must be >= 1, got {tensor}, {experts}")
    if world_size % tensor:
        raise InvalidConfigError(f"G_tensor={tensor} does not divide G={world_size}")
    data_nonexp = world_size // tensor
    if data_nonexp % experts:
        raise InvalidConfigError(f"E={experts} does not divide G/G_tensor={data_nonexp}")
    return TedConfig(
        world_size=world_size,
        tensor=tensor,
        experts=experts,
        expert_parallel=experts,
        data_exp=data_nonexp // experts,
        data_nonexp=data_nonexp,
    )


@dataclass(frozen=True)
class TopologyGroups:
    cfg: TedConfig
    tensor_groups: tuple[tuple[int, ...], ...]
    expert_groups: tuple[tuple[int, ...], ...]
    exp_data_groups: tuple[tuple[int, ...], ...]
    nonexp_data_groups: tuple[tuple[int, ...], ...]

    def families(self) -> dict[str, tuple[tuple[int, ...], ...]]:
        return {
            "tensor": self.tensor_groups,
            "expert": self.expert_groups,
            "data-exp": self.exp_data_groups,
            "data-nonexp": self.nonexp_data_groups,
        }


@dataclass(frozen=True)
class RankGroups:
    tensor: tuple[int, ...]
    expert: tuple[int, ...]
    exp_data: tuple[int, ...]
    nonexp_data: tuple[int, ...]


def build_groups(cfg: TedConfig) -> TopologyGroups:
    T, E, D = cfg.tensor, cfg.experts, cfg.data_exp
    r = cfg.rank_of
    tensor = tuple(tuple(r(t, e, d) for t in range(T)) for d in range(D) for e in range(E))
    expert = tuple(tuple(r(t, e, d) for e in range(E)) for d in range(D) for t in range(T))
    exp_data = tuple(tuple(r(t, e, d) for d in range(D)) for e in range(E) for t in range(T))
    nonexp = tuple(tuple(r(t, e, d) for d in range(D) for e in range(E)) for t in range(T))
    return TopologyGroups(cfg, tensor, expert, exp_data, nonexp)


def groups_for_rank(topo: TopologyGroups, rank: int) -> RankGroups:
    cfg = topo.cfg
    t, e, d = cfg.coords(rank)
    return RankGroups(
        tensor=topo.tensor_groups[d * cfg.experts + e],
        expert=topo.expert_groups[d * cfg.tensor + t],
        exp_data=topo.exp_data_groups[e * cfg.tensor + t],
        nonexp_data=topo.nonexp_data_groups[t],
    )


def _check_rank(cfg: TedConfig, rank: int) -> None:
    if not 0 <= rank < cfg.world_size:
        raise InvalidConfigError(f"rank {rank} outside [0, {cfg.world_size})")
