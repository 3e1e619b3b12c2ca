# fabgpt/core/config.py
import os
from pathlib import Path
from typing import Optional

# 1) Load .env explicitly (python-dotenv)
try:
    from dotenv import load_dotenv, find_dotenv
except ImportError:
    raise RuntimeError("Install python-dotenv: pip install python-dotenv")

# Prefer a .env next to fabgpt/ (i.e., the repo root)
PACKAGE_DIR = Path(__file__).resolve().parents[1]
ENV_PATH = PACKAGE_DIR.parent / ".env"

# Use find_dotenv as a fallback (cwd) if not found at expected place
if ENV_PATH.exists():
    load_dotenv(dotenv_path=ENV_PATH, override=False)
else:
    load_dotenv(find_dotenv(filename=".env", usecwd=True), override=False)

def _get_env(name: str, default: str = "") -> str:
    v = os.getenv(name, default)
    return v.strip() if isinstance(v, str) else v

def _get_int_env(name: str) -> Optional[int]:
    raw = _get_env(name)
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise RuntimeError(f"{name} must be an integer, got {raw!r}")

class Settings:
    # FABGPT_SEED wins over the seed in any run config
    SEED: Optional[int] = _get_int_env("FABGPT_SEED")
    DATA_ROOT: str = _get_env("FABGPT_DATA_ROOT", "./data")
    NUM_THREADS: int = int(_get_env("FABGPT_NUM_THREADS", "1"))
    LOG_LEVEL: str = _get_env("FABGPT_LOG_LEVEL", "INFO").upper()
    RUN_SLOW_TESTS: bool = _get_env("FABGPT_RUN_SLOW", "0") in ("1", "true", "yes")

    # bundled corpora / default config
    ASSET_DIR: str = str(PACKAGE_DIR / "data")

    def reload(self) -> "Settings":
        """Re-read the environment (tests flip FABGPT_SEED at runtime)."""
        self.SEED = _get_int_env("FABGPT_SEED")
        self.DATA_ROOT = _get_env("FABGPT_DATA_ROOT", "./data")
        self.NUM_THREADS = int(_get_env("FABGPT_NUM_THREADS", "1"))
        self.LOG_LEVEL = _get_env("FABGPT_LOG_LEVEL", "INFO").upper()
        return self

settings = Settings()
