"""Run configuration shared by the profiler, clock, and CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ClockConfig:
    tick_rate: int = 2_600_000        # ticks per millisecond
    stall_threshold_ms: int = 30_000  # waits at or above this are stalling
    infinite_wait_cap_ms: int = 600_000
    sandwich_window: int = 50         # max instruction gap between paired rdtsc
    rdtsc_requires_sandwich: bool = True


@dataclass(frozen=True)
class RunConfig:
    mitigate: bool = True
    exclude_fp_prone: bool = True
    # technique id -> "on" | "off" | forced substituted value
    overrides: tuple[tuple[str, str], ...] = ()
    seed: int = 0
    honeypot_pid: int = 99999
    clock: ClockConfig = field(default_factory=ClockConfig)

    def override_for(self, technique: str) -> str | None:
        for key, value in self.overrides:
            if key == technique:
                return value
        return None

    def mitigation_enabled(self, technique: str) -> bool:
        ov = self.override_for(technique)
        if ov == "off":
            return False
        if ov is not None:
            return True
        return self.mitigate

    def validate_overrides(self, known_ids) -> None:
        for key, _ in self.overrides:
            if key not in known_ids:
                raise ConfigError(f"override references unknown technique {key!r}")


_CLOCK_KEYS = ("tick_rate", "stall_threshold_ms", "infinite_wait_cap_ms",
               "sandwich_window", "rdtsc_requires_sandwich")
_RUN_KEYS = ("mitigate", "exclude_fp_prone", "seed", "honeypot_pid")


def load_config_file(path) -> RunConfig:
    """Load a JSON config file into a RunConfig."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"bad config file {path}: expected an object")
    cfg = RunConfig()
    clock_kwargs = {}
    for key, value in data.items():
        if key in _CLOCK_KEYS:
            clock_kwargs[key] = value
        elif key in _RUN_KEYS:
            cfg = replace(cfg, **{key: value})
        elif key == "overrides":
            cfg = replace(cfg, overrides=tuple(sorted(value.items())))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if clock_kwargs:
        cfg = replace(cfg, clock=replace(cfg.clock, **clock_kwargs))
    return cfg
