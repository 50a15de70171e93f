"""Single-directory file store backing the HTTP service.

One JSON document per project, run, and report, written atomically
(temp file + rename); per-project overlay history as an append-only
JSONL audit log.  No external database: the whole service state lives
in one directory that can be copied, inspected, or deleted as a unit.
"""

from __future__ import annotations

import json
import os
from pathlib import Path


class StoreError(Exception):
    pass


def _atomic_write(path: Path, doc: dict) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(json.dumps(doc, ensure_ascii=False, indent=2) + "\n",
                   "utf-8")
    os.replace(tmp, path)


class FileStore:
    """Documents and audit logs under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._projects = self.root / "projects"
        self._runs = self.root / "runs"
        self._reports = self.root / "reports"
        for directory in (self._projects, self._runs, self._reports):
            directory.mkdir(parents=True, exist_ok=True)

    # -- projects ----------------------------------------------------------

    def save_project(self, doc: dict) -> None:
        _atomic_write(self._projects / f"{doc['id']}.json", doc)

    def load_project(self, project_id: str) -> dict | None:
        return self._load(self._projects / f"{project_id}.json")

    def list_projects(self) -> list[str]:
        return sorted(p.stem for p in self._projects.glob("*.json"))

    # -- audit log ---------------------------------------------------------

    def _audit_path(self, project_id: str) -> Path:
        return self._projects / f"{project_id}.audit.jsonl"

    def append_audit(self, project_id: str, event: dict) -> None:
        line = json.dumps(event, ensure_ascii=False)
        with self._audit_path(project_id).open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read_audit(self, project_id: str) -> list[dict]:
        path = self._audit_path(project_id)
        if not path.exists():
            return []
        events = []
        for line in path.read_text("utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except ValueError:
                # A torn final line from a crash mid-append is dropped;
                # complete events are never skipped.
                continue
        return events

    # -- runs --------------------------------------------------------------

    def save_run(self, doc: dict) -> None:
        _atomic_write(self._runs / f"{doc['id']}.json", doc)

    def load_run(self, run_id: str) -> dict | None:
        return self._load(self._runs / f"{run_id}.json")

    def list_runs(self) -> list[str]:
        return sorted(p.stem for p in self._runs.glob("*.json"))

    # -- reports -----------------------------------------------------------

    def save_report(self, doc: dict) -> None:
        _atomic_write(self._reports / f"{doc['id']}.json", doc)

    def load_report(self, report_id: str) -> dict | None:
        return self._load(self._reports / f"{report_id}.json")

    def list_reports(self) -> list[str]:
        return sorted(p.stem for p in self._reports.glob("*.json"))

    # ----------------------------------------------------------------------

    @staticmethod
    def _load(path: Path) -> dict | None:
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text("utf-8"))
        except ValueError as exc:
            raise StoreError(f"corrupt document {path}: {exc}") from exc
