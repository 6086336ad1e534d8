"""Switch-layer routing, expert layers and toy training.

Configurations are plain dicts keyed by dotted names such as
``"router.capacity_factor"``; values may be str, int, float or bool.
"""

from __future__ import annotations

from typing import Any, Mapping

from . import _switchsim
from ._switchsim import (
    CorruptionError,
    InvalidArgument,
    NumericError,
    RouterConfig,
    SwitchParams,
    UnsupportedVersion,
    bf16_round,
    config_keys,
    default_config,
    expert_capacity,
    grad_check,
    init_switch_params,
    load_balance_loss,
    moe_topk_ffn,
    parse_config,
    route,
    run_cli,
    switch_ffn,
)

__all__ = [
    "CorruptionError",
    "InvalidArgument",
    "NumericError",
    "RouterConfig",
    "SwitchParams",
    "Trainer",
    "UnsupportedVersion",
    "bf16_round",
    "build_config",
    "comm_report",
    "config_keys",
    "default_config",
    "expert_capacity",
    "grad_check",
    "init_switch_params",
    "load_balance_loss",
    "moe_topk_ffn",
    "parallel_check",
    "parse_config",
    "route",
    "run_cli",
    "run_distill",
    "run_experiment",
    "serialize_config",
    "switch_ffn",
]


def _text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _assignments(config: Mapping[str, Any] | None, overrides: Mapping[str, Any]) -> dict[str, str]:
    merged = dict(config or {})
    merged.update(overrides)
    return {k: _text(v) for k, v in merged.items()}


def build_config(config: Mapping[str, Any] | None = None, **overrides: Any) -> dict[str, str]:
    """Validated full configuration. Keyword overrides use ``__`` for dots."""
    return _switchsim.build_config(_assignments(config, _dotted(overrides)))


def serialize_config(config: Mapping[str, Any]) -> str:
    return _switchsim.serialize_config(_assignments(config, {}))


def run_experiment(config: Mapping[str, Any], resume: str = "") -> dict:
    return _switchsim.run_experiment(_assignments(config, {}), resume)


def run_distill(config: Mapping[str, Any]) -> dict:
    return _switchsim.run_distill(_assignments(config, {}))


def comm_report(config: Mapping[str, Any]) -> str:
    return _switchsim.comm_report(_assignments(config, {}))


def parallel_check(config: Mapping[str, Any], strategies: list[str]) -> list[dict]:
    return _switchsim.parallel_check(_assignments(config, {}), strategies)


class Trainer(_switchsim.Trainer):
    def __init__(self, config: Mapping[str, Any] | None = None, **overrides: Any) -> None:
        super().__init__(_assignments(config, _dotted(overrides)))


def _dotted(overrides: Mapping[str, Any]) -> dict[str, Any]:
    return {k.replace("__", "."): v for k, v in overrides.items()}
