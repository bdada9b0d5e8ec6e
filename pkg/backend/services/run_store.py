from __future__ import annotations

import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List

from riskmm.settings import Settings


class RunStore:
    """Append-only SQLite log of service requests, one row per solve / simulate / verify."""

    def __init__(self, db_path: Path | None = None) -> None:
        self.db_path = db_path if db_path is not None else Settings().history_db
        self._initialize()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _initialize(self) -> None:
        with self._connect() as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    kind TEXT NOT NULL,
                    config_json TEXT,
                    summary_json TEXT NOT NULL
                )
                """
            )
            conn.commit()

    def log_run(self, kind: str, config: Dict[str, Any] | None, summary: Dict[str, Any]) -> int:
        now_iso = datetime.now(timezone.utc).isoformat()
        with self._connect() as conn:
            cursor = conn.execute(
                "INSERT INTO runs (timestamp, kind, config_json, summary_json) VALUES (?, ?, ?, ?)",
                (
                    now_iso,
                    kind,
                    json.dumps(config) if config is not None else None,
                    json.dumps(summary),
                ),
            )
            conn.commit()
            return int(cursor.lastrowid)

    def fetch_runs(self, limit: int = 50, offset: int = 0, kind: str | None = None) -> Dict[str, Any]:
        where_clause = ""
        params: List[Any] = []
        if kind:
            where_clause = " WHERE kind = ?"
            params.append(kind)

        with self._connect() as conn:
            conn.row_factory = sqlite3.Row
            total_row = conn.execute(f"SELECT COUNT(*) AS c FROM runs{where_clause}", tuple(params)).fetchone()
            total = int(total_row["c"]) if total_row else 0
            rows = conn.execute(
                f"""
                SELECT id, timestamp, kind, config_json, summary_json
                FROM runs{where_clause}
                ORDER BY id DESC
                LIMIT ? OFFSET ?
                """,
                tuple(params + [limit, offset]),
            ).fetchall()

        entries = [
            {
                "id": int(row["id"]),
                "timestamp": row["timestamp"],
                "kind": row["kind"],
                "config": json.loads(row["config_json"]) if row["config_json"] else None,
                "summary": json.loads(row["summary_json"]),
            }
            for row in rows
        ]
        return {"total": total, "limit": limit, "offset": offset, "count": len(entries), "entries": entries}
