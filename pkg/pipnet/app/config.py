import os
import logging
from pathlib import Path

from dotenv import load_dotenv


dotenv_path_explicit = os.path.join(os.path.dirname(__file__), '..', '.env')
if os.path.exists(dotenv_path_explicit):
    load_dotenv(dotenv_path=dotenv_path_explicit)
else:
    load_dotenv() # Fallback

logger = logging.getLogger(__name__)

PACKAGE_FIXTURES_DIR = Path(__file__).parent / "fixtures"


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}; using {default}.")
        return default


def log_level() -> str:
    return os.getenv("PIPNET_LOG_LEVEL", "INFO").upper()


def output_root() -> Path:
    return Path(os.getenv("PIPNET_OUTPUT_ROOT", "runs"))


def fixtures_dir() -> Path:
    raw = os.getenv("PIPNET_FIXTURES_DIR", "").strip()
    return Path(raw) if raw else PACKAGE_FIXTURES_DIR


def workers() -> int:
    return max(1, _env_int("PIPNET_WORKERS", 1))


def record_timing() -> bool:
    """When False, wall-clock fields in reports are written as 0 so reruns are byte-identical."""
    return _env_bool("PIPNET_RECORD_TIMING", True)
