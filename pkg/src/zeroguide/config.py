"""Run configuration: flat ``key=value`` files, CLI overrides win over file values."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_target: int = 20
    t_feature: float = 0.9
    sigma_sq: float = 2.5
    layer_start: int = 21
    layer_end: int = 24
    tau_merge: float = 0.8
    tau_sbert: float = 0.5
    tau_clip: float = 0.1
    tau_iou: float = 0.5
    decoder: str = "retrieval"
    backend: str = "live"
    dataset: Optional[str] = None
    out: Optional[str] = None
    vocabulary: Optional[str] = None   # phrase list for the retrieval bank; default: dataset classes
    class_subset: Optional[str] = None
    max_images: Optional[int] = None
    crf_iterations: int = 10
    workers: int = 1
    seed: int = 0
    debug_saliency: bool = False

    def __post_init__(self):
        if self.n_target < 1:
            raise ConfigError("n_target must be >= 1")
        if not -1.0 <= self.t_feature <= 1.0:
            raise ConfigError("t_feature must be a cosine in [-1, 1]")
        if self.sigma_sq <= 0:
            raise ConfigError("sigma_sq must be positive")
        if not 1 <= self.layer_start <= self.layer_end:
            raise ConfigError("need 1 <= layer_start <= layer_end")
        if not 0.0 <= self.tau_iou <= 1.0:
            raise ConfigError("tau_iou must lie in [0, 1]")
        for name in ("tau_sbert", "tau_clip"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1]")
        if self.decoder not in ("retrieval", "generative"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if not (self.backend == "live" or self.backend.startswith("replay:")):
            raise ConfigError(f"backend must be 'live' or 'replay:<file>', got {self.backend!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.crf_iterations < 0:
            raise ConfigError("crf_iterations must be >= 0")

    def to_text(self) -> str:
        # the output directory is implied by where the file lives
        lines = []
        for k, v in asdict(self).items():
            if v is not None and k != "out":
                lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: Any) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    kind = _TYPES[key]
    if raw.strip().lower() in ("", "none") and "Optional" in kind:
        return None
    try:
        if "bool" in kind:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults < config file < overrides (``None`` override values are ignored)."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text()))
        # relative paths in a config file are relative to the file
        for key in ("dataset", "vocabulary", "class_subset", "out"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str((path.parent / values[key]).resolve())
        b = values.get("backend")
        if b and b.startswith("replay:") and not Path(b[7:]).is_absolute():
            values["backend"] = "replay:" + str((path.parent / b[7:]).resolve())
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v)
    return RunConfig(**values)
