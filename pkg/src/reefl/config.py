"""Experiment configuration: flat key=value files with dotted sections.

Every knob has a registered type and default; unknown keys are rejected.
Values from a file are overridden by CLI-style ``key=value`` pairs, and the
fully resolved configuration can be echoed back out for reproducibility.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .ree import ExitSchedule
from .training import TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_PARSERS = {int: int, float: float, bool: _parse_bool, str: lambda s: s.strip(), tuple: _parse_int_list}

# key -> (type, default)
REGISTRY: dict[str, tuple] = {
    "seed": (int, 0),
    "output_dir": (str, "runs/exp"),
    "model.depth": (int, 12),
    "model.dim": (int, 32),
    "model.heads": (int, 4),
    "model.patch_size": (int, 4),
    "model.num_classes": (int, 4),
    "schedule.every_k": (int, 3),
    "schedule.exit_blocks": (tuple, ()),
    "schedule.ree_everywhere": (bool, True),
    "schedule.modulation_enabled": (bool, True),
    "train.lr0": (float, 5e-2),
    "train.lr_min": (float, 1e-3),
    "train.batch_size": (int, 32),
    "train.local_epochs": (int, 1),
    "train.clip": (float, 1.0),
    "train.tau": (float, 1.0),
    "train.zeta": (float, 0.2),
    "train.eta_max": (float, 1.0),
    "train.ramp_rounds": (int, 300),
    "train.kd_enabled": (bool, True),
    "train.kd_teacher_grad": (bool, False),
    "train.mode": (str, "full"),
    "federation.num_clients": (int, 20),
    "federation.sample_fraction": (float, 0.1),
    "federation.total_rounds": (int, 100),
    "federation.eval_interval": (int, 10),
    "federation.exclude_underbudget": (bool, False),
    "federation.threads": (int, 0),
    "data.source": (str, "synthetic"),
    "data.path": (str, ""),
    "data.num_classes": (int, 4),
    "data.per_class": (int, 100),
    "data.image_size": (int, 16),
    "data.channels": (int, 1),
    "data.noise": (float, 0.25),
    "data.alpha": (float, 1.0),
    "data.split_ratio": (float, 0.8),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    # -- derived build objects -------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            depth=self["model.depth"],
            dim=self["model.dim"],
            heads=self["model.heads"],
            patch_size=self["model.patch_size"],
            num_classes=self["model.num_classes"],
            image_size=self["data.image_size"],
            image_channels=self["data.channels"],
        )

    def schedule(self) -> ExitSchedule:
        blocks = self["schedule.exit_blocks"]
        if blocks:
            return ExitSchedule(blocks, self["model.depth"], self["schedule.ree_everywhere"])
        return ExitSchedule.every_k(
            self["schedule.every_k"], self["model.depth"], self["schedule.ree_everywhere"]
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self["train.lr0"],
            lr_min=self["train.lr_min"],
            total_rounds=self["federation.total_rounds"],
            batch_size=self["train.batch_size"],
            local_epochs=self["train.local_epochs"],
            clip=self["train.clip"],
            tau=self["train.tau"],
            zeta=self["train.zeta"],
            eta_max=self["train.eta_max"],
            ramp_rounds=self["train.ramp_rounds"],
            kd_enabled=self["train.kd_enabled"],
            kd_teacher_grad=self["train.kd_teacher_grad"],
            mode=self["train.mode"],
        )

    def validate(self) -> None:
        try:
            backbone = self.backbone_config()
            schedule = self.schedule()
            self.train_config()
        except ConfigError:
            raise
        except Exception as exc:  # bad derived value
            raise ConfigError(str(exc)) from exc
        if self["data.source"] not in ("synthetic", "file"):
            raise ConfigError(f"data.source must be 'synthetic' or 'file', got {self['data.source']!r}")
        if self["data.source"] == "file" and not self["data.path"]:
            raise ConfigError("data.path required when data.source=file")
        if self["data.source"] == "synthetic":
            if self["data.num_classes"] != self["model.num_classes"]:
                raise ConfigError(
                    "data.num_classes must match model.num_classes "
                    f"({self['data.num_classes']} vs {self['model.num_classes']})"
                )
            if self["data.per_class"] < 1:
                raise ConfigError("data.per_class must be >= 1")
        if not 0 < self["federation.sample_fraction"] <= 1:
            raise ConfigError("federation.sample_fraction must be in (0, 1]")
        if self["federation.eval_interval"] < 1:
            raise ConfigError("federation.eval_interval must be >= 1")
        if self["federation.num_clients"] < schedule.num_exits:
            raise ConfigError(
                f"federation.num_clients={self['federation.num_clients']} is fewer than "
                f"{schedule.num_exits} exits"
            )
        if not 0 < self["data.split_ratio"] < 1:
            raise ConfigError("data.split_ratio must be in (0, 1)")
        if self["data.alpha"] <= 0:
            raise ConfigError("data.alpha must be positive")
        if backbone.image_size < backbone.patch_size:
            raise ConfigError("image smaller than one patch")

    def resolved_text(self) -> str:
        lines = [f"{key}={_format_value(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"


def _set_value(values: dict, key: str, raw: str, origin: str) -> None:
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key {key!r} ({origin})")
    typ, _ = REGISTRY[key]
    try:
        values[key] = _PARSERS[typ](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} ({origin}): {exc}") from exc


def parse_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then file, then overrides; validates the result.

    ``overrides`` entries look like "train.lr0=0.01" (a leading "--" is
    tolerated so CLI flags can be passed through untouched).
    """
    values = {key: default for key, (_, default) in REGISTRY.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed line {lineno} in {path}: {line!r}")
            key, raw = line.split("=", 1)
            _set_value(values, key.strip(), raw, origin=f"{path}:{lineno}")
    for item in overrides or []:
        entry = item[2:] if item.startswith("--") else item
        if "=" not in entry:
            raise ConfigError(f"malformed override {item!r}, expected key=value")
        key, raw = entry.split("=", 1)
        _set_value(values, key.strip(), raw, origin="override")
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg
