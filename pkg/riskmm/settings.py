from __future__ import annotations

import logging
import os
from pathlib import Path

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


class Settings:
    def __init__(self) -> None:
        self.threads = max(1, int(os.getenv("RISKMM_THREADS", "1")))
        self.log_level = os.getenv("RISKMM_LOG_LEVEL", "INFO").upper()
        self.output_dir = Path(os.getenv("RISKMM_OUTPUT_DIR", "."))
        self.history_db = Path(os.getenv("RISKMM_HISTORY_DB", "history.db"))


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or Settings().log_level).upper(),
        format=LOG_FORMAT,
    )
