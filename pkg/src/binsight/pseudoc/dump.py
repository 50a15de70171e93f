"""Decompiler dump interchange.

A dump is UTF-8 JSONL, one object per function:

    {"project": str, "binary": str, "name": str, "address": int,
     "pseudocode": str, "external": bool}

External records are declaration-only stubs for functions outside the
binary; their pseudocode may be empty and is never parsed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class DumpError(Exception):
    pass


class EmptyDump(DumpError):
    """No record in the file survived validation."""

    def __init__(self, rejects: list[tuple[int, str]]):
        self.rejects = rejects
        detail = f" ({len(rejects)} rejected)" if rejects else ""
        super().__init__(f"dump contains no valid function records{detail}")


class DuplicateFunction(DumpError):
    def __init__(self, address: int):
        self.address = address
        super().__init__(f"duplicate function at address {address:#x}")


@dataclass(frozen=True)
class FunctionRecord:
    project: str
    binary: str
    name: str
    address: int
    pseudocode: str
    external: bool = False

    def to_json(self) -> dict:
        return {
            "project": self.project,
            "binary": self.binary,
            "name": self.name,
            "address": self.address,
            "pseudocode": self.pseudocode,
            "external": self.external,
        }


@dataclass
class DecompDump:
    records: list[FunctionRecord]
    rejects: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.by_name: dict[str, FunctionRecord] = {}
        self.by_address: dict[int, FunctionRecord] = {}
        for rec in self.records:
            self.by_name.setdefault(rec.name, rec)
            self.by_address[rec.address] = rec

    def __len__(self) -> int:
        return len(self.records)

    def get(self, name: str) -> FunctionRecord | None:
        return self.by_name.get(name)

    def internal(self) -> list[FunctionRecord]:
        return [r for r in self.records if not r.external]


_REQUIRED = {"project": str, "binary": str, "name": str, "pseudocode": str}


def _validate(obj) -> FunctionRecord | str:
    if not isinstance(obj, dict):
        return "record is not an object"
    for key, typ in _REQUIRED.items():
        if key not in obj:
            return f"missing field {key!r}"
        if not isinstance(obj[key], typ):
            return f"field {key!r} is not a {typ.__name__}"
    addr = obj.get("address")
    if not isinstance(addr, int) or isinstance(addr, bool) or addr < 0:
        return "field 'address' is not a non-negative integer"
    external = obj.get("external", False)
    if not isinstance(external, bool):
        return "field 'external' is not a boolean"
    if not obj["name"]:
        return "field 'name' is empty"
    return FunctionRecord(
        project=obj["project"],
        binary=obj["binary"],
        name=obj["name"],
        address=addr,
        pseudocode=obj["pseudocode"],
        external=external,
    )


def parse_dump(source: str | Path) -> DecompDump:
    """Read a JSONL dump from a path or an in-memory string.

    Malformed lines are collected as (line_number, reason) rejects;
    a duplicate address aborts, a dump with zero valid records raises
    EmptyDump.
    """
    text = source.read_text(encoding="utf-8") if isinstance(source, Path) else source
    records: list[FunctionRecord] = []
    rejects: list[tuple[int, str]] = []
    seen_addresses: set[int] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        result = _validate(obj)
        if isinstance(result, str):
            rejects.append((lineno, result))
            continue
        if result.address in seen_addresses:
            raise DuplicateFunction(result.address)
        seen_addresses.add(result.address)
        records.append(result)
    if not records:
        raise EmptyDump(rejects)
    return DecompDump(records, rejects)


def write_dump(records: list[FunctionRecord], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
