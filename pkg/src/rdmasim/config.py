"""Flat, typed scenario configuration.

A scenario is a JSON object whose keys are dotted paths (``nic.mmio_cost``,
``polling.strategy``...).  Every key has a type and a default; unknown keys
and ill-typed values are rejected with the offending path.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from typing import Any, Mapping

from .batching import BatchMode, MrStrategy
from .nic import MrCostModel, NicConfig
from .polling import STRATEGIES
from .verbs import BLOCK, Space


class ConfigError(ValueError):
    """Invalid scenario configuration.  ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Field:
    kind: type
    default: Any
    choices: tuple[str, ...] | None = None
    minimum: float | None = None
    doc: str = ""


def _nic_fields() -> dict[str, Field]:
    out = {}
    for f in fields(NicConfig):
        default = f.default
        kind = float if isinstance(default, float) else int
        out[f"nic.{f.name}"] = Field(kind, default, minimum=1 if kind is int else 0)
    return out


def _mr_fields() -> dict[str, Field]:
    out = {}
    for f in fields(MrCostModel):
        default = f.default
        kind = float if isinstance(default, float) else int
        out[f"mr.{f.name}"] = Field(kind, default, minimum=0)
    return out


SCHEMA: dict[str, Field] = {
    "seed": Field(int, 1, minimum=0),
    "actors": Field(int, 1, minimum=1),
    "peers": Field(int, 1, minimum=1),
    "qps_per_node": Field(int, 1, minimum=1),
    "space": Field(str, "kernel", choices=tuple(s.value for s in Space)),
    "duration": Field(int, 0, minimum=0, doc="virtual ns; 0 runs to quiescence"),
    **_nic_fields(),
    **_mr_fields(),
    "batching.mode": Field(str, "hybrid", choices=tuple(m.value for m in BatchMode)),
    "batching.mr_strategy": Field(str, "auto", choices=tuple(m.value for m in MrStrategy)),
    "batching.max_chaining_size": Field(int, 16, minimum=1),
    "batching.max_merged_bytes": Field(int, 1 << 20, minimum=1),
    "batching.auto_threshold": Field(int, 928 * 1024, minimum=1),
    "batching.merge_check_ns": Field(int, 100, minimum=0),
    "batching.wr_build_ns": Field(int, 200, minimum=0),
    "batching.queue_capacity": Field(int, 0, minimum=0),
    "admission.window_bytes": Field(int, 0, minimum=0),
    "admission.fragment_bytes": Field(int, BLOCK, minimum=1),
    "polling.strategy": Field(str, "adaptive", choices=tuple(STRATEGIES)),
    "polling.max_poll_wc": Field(int, 16, minimum=1),
    "polling.max_retry": Field(int, 120, minimum=0),
    "polling.reset_retry": Field(bool, True),
    "polling.budget": Field(int, 16, minimum=1),
    "polling.m": Field(int, 1, minimum=1),
    "polling.poll_ns": Field(int, 80, minimum=1),
    "polling.handle_ns": Field(int, 300, minimum=0),
    "host.cpus": Field(int, 8, minimum=0, doc="0 = unlimited"),
    "host.send_queue_depth": Field(int, 512, minimum=1),
    "host.mempool_slots": Field(int, 4096, minimum=1),
    "host.slot_bytes": Field(int, BLOCK, minimum=1),
    "workload.kind": Field(str, "kv", choices=("kv", "burst", "trace")),
    "workload.preset": Field(str, "", choices=("", "etc", "sys", "small", "medium", "large")),
    "workload.requests": Field(int, 1000, minimum=0),
    "workload.read_fraction": Field(float, 0.95, minimum=0),
    "workload.zipf_theta": Field(float, 0.99, minimum=0),
    "workload.keyspace": Field(int, 1 << 15, minimum=1),
    "workload.seq_prob": Field(float, 0.3, minimum=0),
    "workload.req_len": Field(int, BLOCK, minimum=1),
    "workload.mean_gap_ns": Field(float, 2000.0, minimum=0),
    "workload.cluster_size": Field(int, 1, minimum=1),
    "workload.large_cluster": Field(int, 0, minimum=0, doc="0 = calibrate"),
    "workload.inter_burst_gap": Field(int, 20_000, minimum=0),
    "workload.intra_burst_gap": Field(int, 0, minimum=0),
    "workload.sequential_clusters": Field(bool, False),
    "workload.trace_path": Field(str, ""),
    "replay.mode": Field(str, "open", choices=("open", "closed")),
    "replay.depth": Field(int, 0, minimum=0, doc="per-actor outstanding limit; 0 = unlimited"),
    "replay.think_ns": Field(int, -1, minimum=-1, doc="closed mode think time; -1 = use trace gaps"),
    "replay.think_dist": Field(str, "fixed", choices=("fixed", "exp")),
    "replay.think_on_cpu": Field(bool, False),
    "replay.issue_ns": Field(int, 0, minimum=0, doc="application CPU per request"),
    "report.sample_interval_ns": Field(int, 100_000, minimum=1),
}


def _coerce(path: str, spec: Field, value: Any) -> Any:
    if spec.kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if spec.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                raise ConfigError(path, f"expected an integer, got {value!r}")
    elif spec.kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif spec.kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        if spec.choices is not None and value not in spec.choices:
            raise ConfigError(path, f"expected one of {list(spec.choices)}, got {value!r}")
    if spec.minimum is not None and spec.kind in (int, float) and value < spec.minimum:
        raise ConfigError(path, f"must be >= {spec.minimum}, got {value}")
    return value


def parse_value(path: str, text: str) -> Any:
    """Parse a command-line value (sweep axis) into the key's type."""
    spec = SCHEMA.get(path)
    if spec is None:
        raise ConfigError(path, "unknown key")
    if spec.kind is str:
        return _coerce(path, spec, text)
    if spec.kind is bool:
        lowered = text.strip().lower()
        if lowered not in ("true", "false", "1", "0"):
            raise ConfigError(path, f"expected true/false, got {text!r}")
        return lowered in ("true", "1")
    try:
        num = json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(path, f"expected a number, got {text!r}") from None
    return _coerce(path, spec, num)


def resolve(raw: Mapping[str, Any]) -> dict[str, Any]:
    """Validate ``raw`` and fill defaults.  Returns a new, sorted dict."""
    if not isinstance(raw, Mapping):
        raise ConfigError("", "config must be a JSON object")
    out = {key: spec.default for key, spec in SCHEMA.items()}
    for key in sorted(raw):
        if key.startswith("_"):
            continue  # comments
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(key, "unknown key")
        out[key] = _coerce(key, spec, raw[key])
    _cross_check(out)
    return dict(sorted(out.items()))


def _cross_check(cfg: dict[str, Any]) -> None:
    for key in ("workload.read_fraction",):
        if cfg[key] > 1:
            raise ConfigError(key, "must be <= 1")
    if cfg["workload.seq_prob"] >= 1:
        raise ConfigError("workload.seq_prob", "must be < 1")
    if cfg["workload.req_len"] > cfg["host.slot_bytes"] * cfg["host.mempool_slots"]:
        raise ConfigError("workload.req_len", "larger than the whole mempool")
    if cfg["workload.kind"] == "trace" and not cfg["workload.trace_path"]:
        raise ConfigError("workload.trace_path", "required when workload.kind is 'trace'")
    preset = cfg["workload.preset"]
    if preset in ("etc", "sys") and cfg["workload.kind"] != "kv":
        raise ConfigError("workload.preset", f"{preset!r} is a kv preset")
    if preset in ("small", "medium", "large") and cfg["workload.kind"] != "burst":
        raise ConfigError("workload.preset", f"{preset!r} is a burst preset")
    if cfg["workload.kind"] == "kv" and cfg["workload.keyspace"] < cfg["peers"]:
        raise ConfigError("workload.keyspace", "must be >= peers")
    try:
        nic_config(cfg).validate()
    except ValueError as e:
        raise ConfigError("nic", str(e)) from None
    try:
        mr_costs(cfg).validate()
    except ValueError as e:
        raise ConfigError("mr", str(e)) from None
    window = cfg["admission.window_bytes"]
    frag = cfg["admission.fragment_bytes"]
    if window:
        need = -(-min(cfg["workload.req_len"], cfg["batching.max_merged_bytes"]) // frag) * frag
        if need > window:
            raise ConfigError(
                "admission.window_bytes", f"a single request needs {need} B in fragments, window is {window} B"
            )


def nic_config(cfg: Mapping[str, Any]) -> NicConfig:
    return NicConfig(**{f.name: cfg[f"nic.{f.name}"] for f in fields(NicConfig)})


def mr_costs(cfg: Mapping[str, Any]) -> MrCostModel:
    return MrCostModel(**{f.name: cfg[f"mr.{f.name}"] for f in fields(MrCostModel)})


def load(path: str | os.PathLike) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"not valid JSON: {e}") from None
    return resolve(raw)


def diff_from_defaults(cfg: Mapping[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in sorted(cfg.items()) if SCHEMA[k].default != v}
