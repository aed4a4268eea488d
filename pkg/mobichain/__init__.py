"""Activity chain reconstruction and cross-region transfer."""
from __future__ import annotations

from .activity import Activity, ActivityChain, ActivityType, RegionProfile, StayPoint, read_chains, validate_chain, write_chains
from .const import VERSION
from .encoding import MaskSpec, MaskStrategy, SlotDataset, SlotSequence, apply_mask, decode_slots, encode_day
from .errors import MobichainError
from .metrics import JsdReport, evaluate, extract_statistics, jsd
from .model import ModelConfig, forward, init_model, reconstruct

__version__ = VERSION

__all__ = [
    "Activity",
    "ActivityChain",
    "ActivityType",
    "JsdReport",
    "MaskSpec",
    "MaskStrategy",
    "MobichainError",
    "ModelConfig",
    "RegionProfile",
    "SlotDataset",
    "SlotSequence",
    "StayPoint",
    "apply_mask",
    "decode_slots",
    "encode_day",
    "evaluate",
    "extract_statistics",
    "forward",
    "init_model",
    "jsd",
    "read_chains",
    "reconstruct",
    "validate_chain",
    "write_chains",
]
