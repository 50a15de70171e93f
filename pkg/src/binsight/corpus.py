"""Dataset hygiene and pretraining-sample construction.

Raw decompiled-function corpora are noisy: compiler-generated helpers,
jump-only forwarders, degenerate or enormous bodies, and large amounts
of near-duplicated code reused across projects.  This module provides
the four corpus operations the training data depends on:

* :func:`sanitize` — per-record filters (length bounds, thunk and
  auxiliary detection, missing ground truth) with an explicit drop
  reason per rejected record.
* :func:`minhash_dedup` — near-duplicate removal: shingled token
  streams, MinHash signatures, banded locality-sensitive hashing for
  candidate pairs, signature-estimated Jaccard verification, and
  one representative (lowest address) kept per duplicate cluster.
* :func:`render_pretrain_sample` — a pretraining sample interleaving a
  function's three segments (stripped pseudocode, source side, comment)
  in a seeded random order, recoverable byte-exactly.
* :func:`mix_plan` — integer token quotas per data domain in a 60:25:15
  binary/code/text ratio, capped by availability with proportional
  redistribution of any shortfall.

Signature computation is vectorized over all hash functions at once;
records are independent, so callers may shard them freely.  Clustering
itself is single-threaded.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import random
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .pseudoc import NodeKind, ParseFailure, parse_pseudocode

__all__ = [
    "CorpusRecord",
    "DEFAULT_AUXILIARY_NAMES",
    "DedupParams",
    "DedupResult",
    "DropReason",
    "MIX_RATIO",
    "MissingSegment",
    "PretrainSample",
    "SEGMENT_KINDS",
    "SanitizePolicy",
    "SanitizeResult",
    "load_corpus",
    "minhash_dedup",
    "mix_plan",
    "render_pretrain_sample",
    "sanitize",
    "split_pretrain_sample",
]


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecord:
    """One corpus function: stripped pseudocode plus aligned ground truth.

    ``source`` holds the whole source side as the dataset aligned it
    (symbol-rich code and any type definitions); ``comment`` is the
    natural-language description.  Both may be empty when unavailable.
    """

    project: str
    binary: str
    name: str
    address: int
    pseudocode: str
    source: str = ""
    comment: str = ""

    def to_json(self) -> dict:
        return {"project": self.project, "binary": self.binary,
                "name": self.name, "address": self.address,
                "pseudocode": self.pseudocode, "source": self.source,
                "comment": self.comment}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CorpusRecord":
        try:
            return cls(project=obj["project"], binary=obj["binary"],
                       name=obj["name"], address=obj["address"],
                       pseudocode=obj["pseudocode"],
                       source=obj.get("source", ""),
                       comment=obj.get("comment", ""))
        except KeyError as exc:
            raise ValueError(
                f"corpus record missing field {exc.args[0]!r}") from exc


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    """Read corpus records from JSONL, one object per line."""
    path = Path(path)
    records: list[CorpusRecord] = []
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            records.append(CorpusRecord.from_json(obj))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# Sanitization
# --------------------------------------------------------------------------

#: Compiler- and runtime-generated helpers that carry no analyst value.
DEFAULT_AUXILIARY_NAMES: tuple[str, ...] = (
    "_init", "_fini", "_start", "frame_dummy",
    "register_tm_clones", "deregister_tm_clones",
    "__do_global_ctors_aux", "__do_global_dtors_aux",
    "__libc_csu_init", "__libc_csu_fini",
)


class DropReason(str, Enum):
    TooShort = "TooShort"
    TooLong = "TooLong"
    Thunk = "Thunk"
    Auxiliary = "Auxiliary"
    NoSource = "NoSource"


@dataclass(frozen=True)
class SanitizePolicy:
    """Which records to drop and why.

    ``require_source`` drops records whose ground-truth source side is
    missing; ``auxiliary_name_list`` extends nothing — it *is* the
    auxiliary set, defaulting to well-known compiler helpers.
    """

    min_lines: int = 3
    max_lines: int = 500
    drop_thunks: bool = True
    auxiliary_name_list: tuple[str, ...] = DEFAULT_AUXILIARY_NAMES
    require_source: bool = False

    def __post_init__(self):
        if self.min_lines >= self.max_lines:
            raise ValueError("min_lines must be smaller than max_lines")
        object.__setattr__(self, "auxiliary_name_list",
                           tuple(self.auxiliary_name_list))


@dataclass(frozen=True)
class SanitizeResult:
    kept: tuple
    dropped: tuple  # of (record, DropReason)


def _is_thunk(record) -> bool:
    """True when the body is a single jump or call-forwarding statement."""
    try:
        fn = parse_pseudocode(record)
    except ParseFailure:
        return False
    statements = fn.body().children
    if len(statements) != 1:
        return False
    stmt = statements[0]
    if stmt.kind is NodeKind.Goto:
        return True
    if stmt.kind is NodeKind.Call:
        return True
    if stmt.kind is NodeKind.Return and len(stmt.children) == 1:
        value = stmt.children[0]
        while value.kind is NodeKind.Cast and value.children:
            value = value.children[-1]
        if value.kind is NodeKind.Call:
            return True
    return False


def _drop_reason(record, policy: SanitizePolicy,
                 auxiliary: frozenset) -> DropReason | None:
    # Identity-based reasons outrank the generic length bounds, so a
    # two-line thunk reports Thunk, not TooShort.
    if policy.drop_thunks and _is_thunk(record):
        return DropReason.Thunk
    if record.name in auxiliary:
        return DropReason.Auxiliary
    lines = len(record.pseudocode.splitlines())
    if lines < policy.min_lines:
        return DropReason.TooShort
    if lines > policy.max_lines:
        return DropReason.TooLong
    if policy.require_source and not getattr(record, "source", "").strip():
        return DropReason.NoSource
    return None


def sanitize(records: Iterable, policy: SanitizePolicy = SanitizePolicy()
             ) -> SanitizeResult:
    """Split records into kept and (record, reason) dropped lists.

    The decision is per-record, so the kept set is identical under any
    input permutation; input order is preserved in both outputs.
    """
    auxiliary = frozenset(policy.auxiliary_name_list)
    kept, dropped = [], []
    for record in records:
        reason = _drop_reason(record, policy, auxiliary)
        if reason is None:
            kept.append(record)
        else:
            dropped.append((record, reason))
    return SanitizeResult(kept=tuple(kept), dropped=tuple(dropped))


# --------------------------------------------------------------------------
# Near-duplicate removal
# --------------------------------------------------------------------------

#: Token classes for shingling: identifiers, hex and decimal literals,
#: then any other single non-whitespace character, by maximal munch.
_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|0[xX][0-9a-fA-F]+|[0-9]+|\S")

_SHINGLE_SEP = "\x1f"
_MERSENNE_61 = (1 << 61) - 1


@dataclass(frozen=True)
class DedupParams:
    """MinHash/LSH knobs; bands × rows must equal the signature size."""

    shingle_size: int = 5
    num_hashes: int = 128
    jaccard_threshold: float = 0.85
    lsh_bands: int = 16
    lsh_rows: int = 8
    seed: int = 0x5EED

    def __post_init__(self):
        if self.shingle_size < 1:
            raise ValueError("shingle_size must be >= 1")
        if self.lsh_bands * self.lsh_rows != self.num_hashes:
            raise ValueError("lsh_bands * lsh_rows must equal num_hashes")
        if not 0.0 <= self.jaccard_threshold <= 1.0:
            raise ValueError("jaccard_threshold must be within [0, 1]")


@dataclass(frozen=True)
class DedupResult:
    """Survivors plus the duplicate clusters they were chosen from.

    ``kept`` preserves input order; each cluster lists its records
    sorted by (address, name), the kept representative first.
    """

    kept: tuple
    duplicate_clusters: tuple


def _shingles(text: str, size: int) -> frozenset[str]:
    tokens = _TOKEN_RE.findall(text)
    if len(tokens) < size:
        return frozenset({_SHINGLE_SEP.join(tokens)})
    return frozenset(_SHINGLE_SEP.join(tokens[i:i + size])
                     for i in range(len(tokens) - size + 1))


def _shingle_hashes(shingles: frozenset[str]) -> np.ndarray:
    values = [int.from_bytes(
        hashlib.blake2b(s.encode("utf-8"), digest_size=4).digest(), "little")
        for s in shingles]
    return np.asarray(values, dtype=np.uint64)


def _hash_family(params: DedupParams) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(params.seed)
    # a*x + b stays below 2**62 (a < 2**29, x < 2**32, b < 2**61), so
    # the modular reduction is exact in uint64 arithmetic.
    a = rng.integers(1, 1 << 29, size=params.num_hashes, dtype=np.uint64)
    b = rng.integers(0, _MERSENNE_61, size=params.num_hashes, dtype=np.uint64)
    return a, b


def _signature(hashes: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    mixed = (a[:, None] * hashes[None, :] + b[:, None]) % _MERSENNE_61
    return mixed.min(axis=1)


def estimate_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    """Fraction of agreeing signature slots — the MinHash estimator."""
    return float(np.mean(sig_a == sig_b))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def minhash_dedup(records: Sequence, params: DedupParams = DedupParams()
                  ) -> DedupResult:
    """Remove near-duplicates, keeping the lowest-address representative.

    Token streams are shingled, hashed into MinHash signatures, and
    banded into LSH buckets; candidate pairs sharing a bucket are
    verified by the signature-estimated Jaccard against the threshold,
    and verified pairs are merged transitively into clusters.  Records
    work duck-typed: anything with ``pseudocode``, ``address``, and
    ``name`` attributes qualifies.
    """
    records = list(records)
    if not records:
        return DedupResult(kept=(), duplicate_clusters=())
    a, b = _hash_family(params)
    signatures = [
        _signature(_shingle_hashes(_shingles(r.pseudocode,
                                             params.shingle_size)), a, b)
        for r in records]

    buckets: dict[tuple[int, bytes], list[int]] = {}
    for i, sig in enumerate(signatures):
        for band in range(params.lsh_bands):
            chunk = sig[band * params.lsh_rows:(band + 1) * params.lsh_rows]
            buckets.setdefault((band, chunk.tobytes()), []).append(i)

    union = _UnionFind(len(records))
    checked: set[tuple[int, int]] = set()
    for ids in buckets.values():
        if len(ids) < 2:
            continue
        for i, j in itertools.combinations(ids, 2):
            pair = (i, j) if i < j else (j, i)
            if pair in checked:
                continue
            checked.add(pair)
            if estimate_jaccard(signatures[pair[0]],
                                signatures[pair[1]]) >= params.jaccard_threshold:
                union.union(*pair)

    members: dict[int, list[int]] = {}
    for i in range(len(records)):
        members.setdefault(union.find(i), []).append(i)

    representative: dict[int, int] = {}
    clusters = []
    for root, ids in members.items():
        if len(ids) == 1:
            continue
        ordered = sorted(ids, key=lambda i: (records[i].address,
                                             records[i].name))
        representative[root] = ordered[0]
        clusters.append(tuple(records[i] for i in ordered))
    clusters.sort(key=lambda c: (c[0].address, c[0].name))

    kept = tuple(records[i] for i in range(len(records))
                 if union.find(i) not in representative
                 or representative[union.find(i)] == i)
    return DedupResult(kept=kept, duplicate_clusters=tuple(clusters))


# --------------------------------------------------------------------------
# Pretraining samples
# --------------------------------------------------------------------------

SEGMENT_KINDS = ("pseudo", "source", "comment")

_SEGMENT_HEADERS = {
    "pseudo": "<<<segment:pseudo>>>",
    "source": "<<<segment:source>>>",
    "comment": "<<<segment:comment>>>",
}


class MissingSegment(Exception):
    """The record lacks a segment every pretraining sample needs."""


@dataclass(frozen=True)
class PretrainSample:
    """Three segments rendered in one seeded order.

    ``rendered`` holds each segment exactly once under its fixed header
    line; :func:`split_pretrain_sample` recovers the segment texts
    byte-exactly.
    """

    segments: Mapping
    order: tuple[str, ...]
    rendered: str


def render_pretrain_sample(record, seed: int) -> PretrainSample:
    """Interleave a record's three segments in a seeded random order.

    The seed picks uniformly among the six orders of (pseudo, source,
    comment) and fully determines the output.  A missing or blank
    segment raises :class:`MissingSegment`.
    """
    segments = {"pseudo": record.pseudocode,
                "source": getattr(record, "source", ""),
                "comment": getattr(record, "comment", "")}
    missing = [kind for kind in SEGMENT_KINDS
               if not segments[kind] or not segments[kind].strip()]
    if missing:
        raise MissingSegment(
            f"record {getattr(record, 'name', '?')} lacks: "
            + ", ".join(missing))
    orders = sorted(itertools.permutations(SEGMENT_KINDS))
    order = orders[random.Random(seed).randrange(len(orders))]
    rendered = "".join(f"{_SEGMENT_HEADERS[kind]}\n{segments[kind]}\n"
                       for kind in order)
    return PretrainSample(segments=segments, order=order, rendered=rendered)


def split_pretrain_sample(rendered: str) -> PretrainSample:
    """Recover the segments (byte-exactly) and order from rendered text."""
    positions = []
    for kind, header in _SEGMENT_HEADERS.items():
        marker = header + "\n"
        first = rendered.find(marker)
        if first == -1 or rendered.find(marker, first + 1) != -1:
            raise ValueError(
                f"rendered sample must contain the {kind} header exactly once")
        positions.append((first, kind, len(marker)))
    positions.sort()
    segments = {}
    for rank, (start, kind, header_len) in enumerate(positions):
        end = (positions[rank + 1][0] if rank + 1 < len(positions)
               else len(rendered))
        body = rendered[start + header_len:end]
        if not body.endswith("\n"):
            raise ValueError("rendered segment must end with a newline")
        segments[kind] = body[:-1]
    return PretrainSample(segments=segments,
                          order=tuple(kind for _, kind, _ in positions),
                          rendered=rendered)


# --------------------------------------------------------------------------
# Mixture planning
# --------------------------------------------------------------------------

#: Pretraining token mixture: binary, general code, natural language.
MIX_RATIO: Mapping[str, int] = {"binary": 60, "code": 25, "text": 15}


def mix_plan(available: Mapping[str, int], total_tokens: int,
             ratio: Mapping[str, int] = MIX_RATIO) -> dict[str, int]:
    """Integer token quotas per domain in the configured ratio.

    Each domain's ideal share is capped by its availability and the
    shortfall is redistributed among the remaining domains in their
    ratio, repeatedly, until everything is placed or every domain is
    full.  Fractional shares are settled by largest remainder (ties in
    ratio-declaration order), so the quotas always sum to exactly
    ``min(total_tokens, sum(available))``.
    """
    if total_tokens < 0:
        raise ValueError("total_tokens must be >= 0")
    if not ratio or any(w <= 0 for w in ratio.values()):
        raise ValueError("ratio weights must be positive")
    missing = [d for d in ratio if d not in available]
    if missing:
        raise ValueError(f"availability missing domains: {missing}")
    if any(available[d] < 0 for d in ratio):
        raise ValueError("availability must be >= 0")

    quotas = {domain: 0 for domain in ratio}
    remaining = min(total_tokens, sum(available[d] for d in ratio))
    open_domains = [d for d in ratio if available[d] > 0]
    while remaining > 0 and open_domains:
        weight = sum(ratio[d] for d in open_domains)
        ideal = {d: Fraction(remaining) * ratio[d] / weight
                 for d in open_domains}
        capped = [d for d in open_domains if ideal[d] >= available[d]]
        if capped:
            for domain in capped:
                quotas[domain] = available[domain]
                remaining -= available[domain]
                open_domains.remove(domain)
            continue
        floors = {d: int(ideal[d]) for d in open_domains}
        leftover = remaining - sum(floors.values())
        by_remainder = sorted(open_domains,
                              key=lambda d: ideal[d] - floors[d],
                              reverse=True)
        for domain in open_domains:
            quotas[domain] = floors[domain]
        for domain in by_remainder[:leftover]:
            quotas[domain] += 1
        remaining = 0
    return quotas
