import os
from pathlib import Path
from dotenv import load_dotenv
from data.exceptions import ConfigError

load_dotenv()


def _int_setting(name, default):
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from e


def default_seed() -> int:
    return _int_setting('PAD_SEED', 0)


def default_jobs() -> int:
    jobs = _int_setting('PAD_JOBS', os.cpu_count() or 1)
    if jobs < 1:
        raise ConfigError(f"PAD_JOBS must be at least 1, got {jobs}")
    return jobs


def cache_dir() -> Path:
    return Path(os.getenv('PAD_CACHE_DIR') or '.pad-cache')


def log_level() -> str:
    return (os.getenv('PAD_LOG_LEVEL') or 'INFO').upper()
