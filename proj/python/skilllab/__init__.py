"""Dual-arm skill composition lab: python surface over the C++ core."""

from _skilllab import (  # noqa: F401
    OBS_DIM,
    ArmAction,
    World,
    conditional_mi,
    default_config,
    eval_suite,
    generate,
    gradcheck,
    rollout,
    train,
    version,
)

__all__ = [
    "OBS_DIM",
    "ArmAction",
    "World",
    "conditional_mi",
    "default_config",
    "eval_suite",
    "generate",
    "gradcheck",
    "rollout",
    "train",
    "version",
]
