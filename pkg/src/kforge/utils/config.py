"""Configuration knobs shared by the pipeline stages.

A configuration file is TOML (values under a ``[kforge]`` table) or JSON (a top-level
object). Command line flags override file values, which override the defaults below.
"""

import json
import tomllib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from kforge.errors import ConfigError

FAULT_POLICIES = ("kill", "report")


@dataclass(frozen=True)
class Config:  # pylint: disable=too-many-instance-attributes
    """All tunable parameters of the toolkit."""

    stability_window: int = 3
    max_runs: int = 15
    unresolved_warn_fraction: float = 0.01
    launch_cost_steps: int = 3
    fault_policy: str = "kill"
    ram_mb: int = 8192
    per_kernel_mb: int = 8
    baseline_reserved_mb: int = 2192
    gadget_max_len: int = 20

    def __post_init__(self) -> None:
        for item in fields(self):
            value = getattr(self, item.name)
            if item.type is str:
                continue
            allowed: tuple[type, ...] = (int, float) if item.type is float else (int,)
            if isinstance(value, bool) or not isinstance(value, allowed):
                raise ConfigError(f"{item.name} must be {item.type.__name__}, got {value!r}")
        if self.fault_policy not in FAULT_POLICIES:
            raise ConfigError(
                f"fault_policy must be one of {FAULT_POLICIES}, got {self.fault_policy!r}"
            )
        if self.stability_window < 1:
            raise ConfigError("stability_window must be at least 1")
        if self.max_runs < 1:
            raise ConfigError("max_runs must be at least 1")
        if self.per_kernel_mb < 1:
            raise ConfigError("per_kernel_mb must be at least 1")
        if self.gadget_max_len < 1:
            raise ConfigError("gadget_max_len must be at least 1")

    def override(self, **values: Any) -> "Config":
        """Returns a copy with every non-``None`` value replaced."""
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    @classmethod
    def from_dict(cls, data: dict) -> "Config":  # type: ignore[type-arg]
        """Create a Config from a mapping, rejecting unknown keys."""
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)


def load_config(file_path: Path | None) -> Config:
    """Loads a configuration file, or the defaults when no file is given.

    Args:
        file_path: A ``.toml`` or ``.json`` file, or None.

    Returns:
        The parsed configuration.
    """
    if file_path is None:
        return Config()
    try:
        raw = file_path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read {file_path}: {e}") from e
    try:
        if file_path.suffix == ".toml":
            data = tomllib.loads(raw.decode("utf-8")).get("kforge", {})
        elif file_path.suffix == ".json":
            data = json.loads(raw)
        else:
            raise ConfigError(f"{file_path}: configuration must be .toml or .json")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"{file_path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{file_path}: expected a table of settings")
    return Config.from_dict(data)
