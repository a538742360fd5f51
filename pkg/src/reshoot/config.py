"""Run configuration: one JSON file, flags override file values."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .backends.base import KINDS, BackendConfig
from .backends.mock import DRIFT_KINDS
from .errors import ConfigError
from .verifier import AuditThresholds

# keys that would mean a secret was pasted into the file
_SECRET_KEYS = {"api_key", "apikey", "token", "secret", "password", "credential", "credentials"}


@dataclass(frozen=True)
class MockSettings:
    fault_rate: float = 0.0
    drift_kinds: tuple[str, ...] = DRIFT_KINDS
    clip_fault_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "drift_kinds", tuple(self.drift_kinds))
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ConfigError("mock.fault_rate must be in [0, 1]")
        unknown = set(self.drift_kinds) - set(DRIFT_KINDS)
        if unknown:
            raise ConfigError(f"unknown drift kinds {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    backends: dict = field(default_factory=lambda: {k: BackendConfig(k) for k in KINDS})
    thresholds: AuditThresholds = field(default_factory=AuditThresholds)
    parallelism: int = 4
    clip_duration: float = 6.0
    stitch_cmd: str = ""
    strict_stitch: bool = False
    seed: int = 0
    output_dir: str = "runs/default"
    registry_dir: str = ""
    style: str = "realistic cinematic"
    global_context: bool = False
    batch_retries: int = 2
    understanding_retries: int = 2
    mock: MockSettings = field(default_factory=MockSettings)

    def __post_init__(self):
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if not self.clip_duration > 0:
            raise ConfigError("clip_duration must be > 0")
        if self.batch_retries < 0 or self.understanding_retries < 0:
            raise ConfigError("retry counts must be >= 0")
        missing = set(KINDS) - set(self.backends)
        if missing:
            raise ConfigError(f"missing backend configs {sorted(missing)}")
        if self.stitch_cmd and ("{edl}" not in self.stitch_cmd or "{out}" not in self.stitch_cmd):
            raise ConfigError("stitch_cmd needs {edl} and {out} placeholders")

    @property
    def max_retries(self) -> int:
        return self.thresholds.max_retries

    @property
    def all_mock(self) -> bool:
        return all(b.is_mock for b in self.backends.values())

    def with_overrides(self, **kw) -> RunConfig:
        """Flag overrides; ``max_retries`` is routed into thresholds."""
        kw = {k: v for k, v in kw.items() if v is not None}
        if "max_retries" in kw:
            kw["thresholds"] = replace(kw.get("thresholds", self.thresholds),
                                       max_retries=kw.pop("max_retries"))
        if "fault_rate" in kw:
            kw["mock"] = replace(kw.get("mock", self.mock), fault_rate=kw.pop("fault_rate"))
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {
            "backends": {k: self.backends[k].to_dict() for k in KINDS},
            "thresholds": self.thresholds.to_dict(),
            "mock": {**asdict(self.mock), "drift_kinds": list(self.mock.drift_kinds)},
        }
        for name in self.__dataclass_fields__:
            if name not in d:
                d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_secrets(d, "")
        known = set(cls.__dataclass_fields__) | {"max_retries"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k not in ("backends", "thresholds", "mock",
                                                      "max_retries")}
        backends = {k: BackendConfig(k) for k in KINDS}
        for kind, raw in (d.get("backends") or {}).items():
            if kind not in KINDS:
                raise ConfigError(f"unknown backend kind {kind!r}")
            backends[kind] = BackendConfig.from_dict(kind, raw)
        thresholds = AuditThresholds.from_dict(d.get("thresholds") or {})
        if "max_retries" in d:
            thresholds = replace(thresholds, max_retries=int(d["max_retries"]))
        mock_raw = d.get("mock") or {}
        try:
            mock = MockSettings(**mock_raw)
        except TypeError as exc:
            raise ConfigError(f"mock: {exc}") from None
        try:
            return cls(backends=backends, thresholds=thresholds, mock=mock, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _reject_secrets(obj, path: str) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k.lower() in _SECRET_KEYS:
                raise ConfigError(f"{path}/{k}: credentials must come from an environment "
                                  f"variable named by auth_env_var, not the config file")
            _reject_secrets(v, f"{path}/{k}")


def load_config(path=None, **overrides) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        cfg = RunConfig.from_dict(raw)
    return cfg.with_overrides(**overrides)
