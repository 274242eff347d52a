"""Deterministic simulator for tensor + expert + data parallel MoE training."""

from tedsim.fabric import CommLedger, Fabric, GroupKind, InvalidConfigError, Op, Phase, Width, create_fabric, run_ranks
from tedsim.moe import Flags, MoeModelConfig, serial_reference_step
from tedsim.topology import TedConfig, build_groups, derive_config
from tedsim.train import simulate

__version__ = "0.1.0"

__all__ = [
    "CommLedger",
    "Fabric",
    "Flags",
    "GroupKind",
    "InvalidConfigError",
    "MoeModelConfig",
    "Op",
    "Phase",
    "TedConfig",
    "Width",
    "build_groups",
    "create_fabric",
    "derive_config",
    "run_ranks",
    "serial_reference_step",
    "simulate",
]
