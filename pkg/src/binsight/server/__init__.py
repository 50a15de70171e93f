"""HTTP service over the analysis pipeline: projects, runs, overlays.

The service keeps its whole state in one directory (JSON documents plus
append-only audit logs), never mutates uploaded pseudocode — accepted
renames live in an overlay reconstructed by replaying the audit log —
and streams run progress as line-delimited JSON with plain polling as
the fallback.
"""

from .app import ApiError, create_app, default_transport_factory
from .items import ApplyItem, derive_items
from .mockmodel import MockTransport
from .overlay import (KIND_FUNCTION, KIND_VARIABLE, Overlay, OverlayEntry,
                      render_with_overlay)
from .runs import DuplicateRun, RunManager, UnknownRun
from .store import FileStore, StoreError

__all__ = [
    "ApiError",
    "ApplyItem",
    "DuplicateRun",
    "FileStore",
    "KIND_FUNCTION",
    "KIND_VARIABLE",
    "MockTransport",
    "Overlay",
    "OverlayEntry",
    "RunManager",
    "StoreError",
    "UnknownRun",
    "create_app",
    "default_transport_factory",
    "derive_items",
    "render_with_overlay",
]
