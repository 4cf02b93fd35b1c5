import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from fbflow.exceptions import InvalidConfigError
from fbflow.models.run_config import RunConfig

logger = logging.getLogger(__name__)

# 設定ディレクトリのパス（環境変数から取得、デフォルトはカレントディレクトリ）
CONFIG_DIR = os.getenv("CONFIG_DIR", ".")
ENV_FILE_PATH = Path(CONFIG_DIR) / ".env"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(env_file=str(ENV_FILE_PATH), case_sensitive=False, extra="ignore")

    # Application
    APP_NAME: str = "fbflow"
    LOG_LEVEL: str = "INFO"
    CORPUS_JOBS: int = 1

    # Directories
    OUTPUT_DIR: Path = Path("outputs")
    LOG_DIR: Path = Path("logs")

    def ensure_dirs(self) -> None:
        """Create output and log directories if they don't exist"""
        self.OUTPUT_DIR.mkdir(parents=True, exist_ok=True)
        self.LOG_DIR.mkdir(parents=True, exist_ok=True)


# Initialize settings
settings = Settings()


def setup_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> None:
    """Configure the root logger with a log file and the console"""
    log_dir = settings.LOG_DIR if log_dir is None else log_dir
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_dir / f"{settings.APP_NAME}.log"),
            logging.StreamHandler(),
        ],
        force=True,
    )


def _format_loc(loc: tuple) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_run_config(data: Dict[str, Any], source: str = "<config>") -> RunConfig:
    """Validate a decoded TOML document into a RunConfig"""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        diagnostics = [f"{source}: {_format_loc(err['loc'])}: {err['msg']}" for err in e.errors()]
        for line in diagnostics:
            logger.error(line)
        raise InvalidConfigError(diagnostics) from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """
    Load a run configuration from a TOML file

    Decoding errors carry the TOML line/column; validation errors carry the
    dotted field location (e.g. problem.g.A).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        logger.error(f"Cannot read config {path}: {e}")
        raise InvalidConfigError([f"{path}: cannot read file: {e.strerror}"]) from e

    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        logger.error(f"TOML error in {path}: {e}")
        raise InvalidConfigError([f"{path}: {e}"]) from e

    config = parse_run_config(data, source=str(path))
    logger.info(f"Loaded run config {config.name!r} from {path}")
    return config


def apply_overrides(
    config: RunConfig,
    t_max: Optional[float] = None,
    stop_residual: Optional[float] = None,
    seed: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Return a validated copy of config with command-line overrides applied"""
    integrator_updates: Dict[str, Any] = {}
    if t_max is not None:
        integrator_updates["t_max"] = t_max
    if stop_residual is not None:
        integrator_updates["stop_residual"] = stop_residual

    data = config.model_dump(mode="python")
    if integrator_updates:
        data["integrator"] = {**data["integrator"], **integrator_updates}
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return parse_run_config(data, source="command line")

