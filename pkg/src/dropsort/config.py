"""Flat key=value run configuration.

Config files are UTF-8 text with one ``key = value`` pair per line and
``#`` comments. Values layer in a fixed precedence: library defaults,
then the chosen scenario's preset values, then the file, then explicit
command-line overrides. Unknown keys are rejected so typos fail loudly,
and every run can write its fully resolved snapshot; feeding a snapshot
back in reproduces the same resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from . import scenarios


class ConfigError(ValueError):
    """Malformed key, value, or file; maps to a usage error exit."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: str = "pa_single"
    data_dir: str = "data"
    model_path: str = "model.ckpt"
    # second checkpoint for joint (two-model AND) sorting; empty = unused
    second_model_path: str = ""
    report_dir: str = "reports"
    image_px: int = 128
    n_train: int = 125
    n_val: int = 20
    plan: str = "none"
    theta: float = 0.9
    stream_len: int = 1000
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 8
    conv_filters: tuple[int, ...] = (8, 16, 32)
    kernel_px: int = 15
    pool_window: int = 2
    pool_stride: int = 2
    dense_units: int = 128
    dropout_rate: float = 0.4
    n_classes: int = 3
    grab_ms: float = 1.0
    infer_ms: float = 5.0
    deadline_ms: float = 12.0
    storage_capacity: int = 30
    dump_activations: bool = False
    thetas: tuple[float, ...] = (0.0, 0.5, 0.9, 0.99)
    bench_sizes: tuple[int, ...] = (50, 128, 256, 478)
    bench_reps: int = 30
    strict: bool = False


# keys whose defaults the named scenario preset overrides
_SCENARIO_KEYS = ("n_train", "n_val", "plan", "theta", "stream_len",
                  "batch_size")

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert raw text to the registered type of one config key."""
    if key not in _FIELD_TYPES:
        known = ", ".join(sorted(_FIELD_TYPES))
        raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        item = int if kind == "tuple[int, ...]" else float
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form
    return str(value)


def read_config_file(path) -> dict[str, object]:
    """Parse one file into typed values; unknown keys raise ConfigError."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, "
                              f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            out[key] = parse_value(key, value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def _validate(cfg: RunConfig) -> RunConfig:
    scenarios.scenario(cfg.scenario)  # raises on unknown names
    if not 0.0 <= cfg.theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {cfg.theta}")
    if cfg.stream_len < 0:
        raise ConfigError("stream_len must be non-negative")
    if cfg.bench_reps < 1:
        raise ConfigError("bench_reps must be at least 1")
    return cfg


def resolve(file_values: Mapping[str, object] | None = None,
            cli_values: Mapping[str, object] | None = None) -> RunConfig:
    """Layer defaults, scenario preset, file, and CLI into a RunConfig."""
    file_values = dict(file_values or {})
    cli_values = dict(cli_values or {})
    name = cli_values.get("scenario",
                          file_values.get("scenario",
                                          RunConfig.scenario))
    spec = scenarios.scenario(str(name))
    layered: dict[str, object] = {"scenario": spec.name}
    for key in _SCENARIO_KEYS:
        layered[key] = getattr(spec, key)
    layered.update(file_values)
    layered.update(cli_values)
    return _validate(replace(RunConfig(), **layered))


def write_snapshot(cfg: RunConfig, path) -> None:
    """Write every resolved key so the file alone reproduces the run."""
    lines = ["# resolved run configuration"]
    lines += [f"{f.name} = {format_value(getattr(cfg, f.name))}"
              for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
