"""
Application Settings
환경 변수 / .env 기반 설정과 key=value 실행 설정 파일 로더
"""

from pathlib import Path
from typing import Any, Mapping, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from mrmp.errors import ConfigError
from mrmp.models.schemas import RunConfig


class Settings(BaseSettings):
    """Process-wide settings (env prefix MRMP_)"""

    model_config = SettingsConfigDict(env_prefix="MRMP_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    APP_NAME: str = "MrMP"
    DATA_DIR: Path = Path("data")
    OUTPUT_DIR: Path = Path("runs")
    LOG_LEVEL: str = "INFO"

    # Serving
    CHECKPOINT_PATH: Optional[Path] = None
    VOCAB_PATH: Optional[Path] = None
    MAX_BATCH: int = 256


settings = Settings()


def _parse_value(key: str, raw: str) -> Any:
    raw = raw.strip()
    if key == "threshold_grid":
        return [float(x) for x in raw.replace(",", " ").split()] if raw else None
    if raw.lower() in ("none", "null", ""):
        return None
    return raw


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a flat key=value file; '#' starts a comment"""
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e

    for line_no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got '{line}'")
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{path}:{line_no}: unknown config key '{key}'")
        values[key] = _parse_value(key, raw)
    return values


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values first, then non-None command-line overrides"""
    values = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"invalid {where}: {first['msg']}") from e


def dump_run_config(config: RunConfig) -> str:
    """Effective config as sorted key=value lines (echoed into output dirs)"""
    lines = []
    for key, value in sorted(config.model_dump().items()):
        if value is None:
            value = "none"
        elif isinstance(value, list):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_run_config(config: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.txt"
    path.write_text(dump_run_config(config), encoding="utf-8")
    return path
