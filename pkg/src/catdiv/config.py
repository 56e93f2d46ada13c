"""Flat ``section.key = value`` configuration.

Lines starting with ``#`` are comments. Values are parsed according to the
type of the default; lists are comma separated. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .ingest import SplitSpec
from .model import HyperParams
from .synthetic import taobao_split
from .train import TrainConfig

_TAOBAO = taobao_split()

DEFAULTS: dict[str, object] = {
    "paths.log": "",
    "paths.work_dir": "work",
    "paths.checkpoint": "",  # default: <work_dir>/model.ckpt
    "paths.index": "",       # default: <work_dir>/index.bin
    "paths.reports": "",     # default: <work_dir>/reports
    "data.max_users": 0,     # 0 = no cap
    "data.max_rows": 0,
    "split.train_end": _TAOBAO.train_end,
    "split.valid_end": _TAOBAO.valid_end,
    "split.test_end": _TAOBAO.test_end,
    "samples.per_user": 5,
    "samples.min_history": 3,
    "samples.negative_pool": "non-interacted",
    "samples.seed": 0,
    "samples.dump": False,
    "model.min_item_count": 1,
    "model.seed": 0,
    "eval.ks": [5, 15, 30],
    "index.n": 300,
    "index.smoothing": 10.0,
    "pipeline.ks": [10, 20, 30],
    "pipeline.m": 50,
}
for _f in fields(HyperParams):
    DEFAULTS[f"model.{_f.name}"] = _f.default
for _f in fields(TrainConfig):
    DEFAULTS[f"train.{_f.name}"] = _f.default


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}", code="bad-value") from exc
    return text


class Config:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}", code="unknown-key")
        default = DEFAULTS[key]
        if isinstance(value, str):
            value = value.strip()
            if not isinstance(default, str):
                value = _parse_value(key, value, default)
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path=None, overrides: list[str] | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}", code="unreadable-config") from exc
            for n, line in enumerate(text.splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{n}: expected key = value", code="bad-line")
                key, value = line.split("=", 1)
                cfg.set(key.strip(), value)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value", code="bad-override")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.split_spec()
            self.hparams()
            self.train_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), code="bad-value") from exc
        if self["samples.negative_pool"] not in ("non-interacted", "all-but-target"):
            raise ConfigError("samples.negative_pool must be non-interacted or all-but-target",
                              code="bad-value")
        if self["index.n"] < 1 or self["pipeline.m"] < 1 or self["index.smoothing"] < 0:
            raise ConfigError("index.n and pipeline.m must be >= 1, smoothing >= 0", code="bad-value")
        if not self["eval.ks"] or min(self["eval.ks"]) < 1 or not self["pipeline.ks"] or min(self["pipeline.ks"]) < 1:
            raise ConfigError("K lists must be non-empty and >= 1", code="bad-value")
        if self["samples.per_user"] < 1 or self["samples.min_history"] < 1:
            raise ConfigError("samples.per_user and samples.min_history must be >= 1", code="bad-value")

    # -- typed views ---------------------------------------------------------

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self["split.train_end"], self["split.valid_end"], self["split.test_end"])

    def hparams(self) -> HyperParams:
        return HyperParams(**{f.name: self[f"model.{f.name}"] for f in fields(HyperParams)})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: self[f"train.{f.name}"] for f in fields(TrainConfig)})

    @property
    def work_dir(self) -> Path:
        return Path(self["paths.work_dir"])

    def path(self, key: str, default_name: str) -> Path:
        value = self[f"paths.{key}"]
        return Path(value) if value else self.work_dir / default_name

    def dump(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, list):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def documented_keys() -> str:
    return Config().dump()

