"""Content-addressed artifact store with append-only sample and round records.

Artifact bytes live under a two-level fan-out directory keyed by SHA-256
digest; sample and round records are appended as JSON lines to index files.
Nothing is ever mutated in place: record updates append a new version that
points at the old one through ``supersedes``.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional


class StoreError(Exception):
    """Base error for store failures."""


class EmptyPayloadError(StoreError):
    """put_artifact called with zero bytes."""


class DanglingRefError(StoreError):
    def __init__(self, missing: "ArtifactId"):
        self.missing = missing
        super().__init__(f"dangling ref: {missing}")


class DuplicateSampleError(StoreError):
    pass


class UnknownSampleError(StoreError):
    pass


class ArtifactKind(str, Enum):
    RGB_IMAGE = "rgb_image"
    MASK = "mask"
    DEPTH_MAP = "depth_map"
    NORMAL_MAP = "normal_map"
    MESH = "mesh"
    OBJECT_POSE = "object_pose"
    CAMERA_POSE = "camera_pose"
    TRAJECTORY = "trajectory"
    ACTION_PROGRAM = "action_program"
    REVIEW_TRACE = "review_trace"
    VERDICT_RECORD = "verdict_record"
    EXPORT_MANIFEST = "export_manifest"
    DIAGNOSTIC_LOG = "diagnostic_log"


@dataclass(frozen=True)
class ArtifactId:
    """Identity of one stored blob: SHA-256 digest plus its kind."""

    digest: str
    kind: ArtifactKind

    def __post_init__(self):
        if len(self.digest) != 64 or any(c not in "0123456789abcdef" for c in self.digest):
            raise ValueError(f"digest must be 64 lowercase hex chars, got {self.digest!r}")

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.digest}"

    @classmethod
    def parse(cls, text: str) -> "ArtifactId":
        kind, _, digest = text.partition(":")
        return cls(digest=digest, kind=ArtifactKind(kind))


def utc_now_iso() -> str:
    """RFC 3339 UTC timestamp, second resolution."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class SampleRecord:
    """One node of the artifact graph linking every piece of a sample."""

    sample_id: str
    round_id: int = 0
    scene_ref: Optional[ArtifactId] = None
    asset_refs: tuple[ArtifactId, ...] = ()
    action_ref: Optional[ArtifactId] = None
    render_refs: tuple[ArtifactId, ...] = ()
    geom_refs: tuple[ArtifactId, ...] = ()
    temporal_ref: Optional[ArtifactId] = None
    review_refs: tuple[ArtifactId, ...] = ()  # ordered by review round
    verdict_ref: Optional[ArtifactId] = None
    export_ref: Optional[ArtifactId] = None
    created_at: str = field(default_factory=utc_now_iso)
    supersedes: Optional[str] = None

    def all_refs(self) -> list[ArtifactId]:
        refs: list[ArtifactId] = []
        for single in (self.scene_ref, self.action_ref, self.temporal_ref,
                       self.verdict_ref, self.export_ref):
            if single is not None:
                refs.append(single)
        refs.extend(self.asset_refs)
        refs.extend(self.render_refs)
        refs.extend(self.geom_refs)
        refs.extend(self.review_refs)
        return refs

    def to_json(self) -> dict:
        def enc(ref):
            return str(ref) if ref is not None else None

        return {
            "sample_id": self.sample_id,
            "round_id": self.round_id,
            "refs": {
                "scene": enc(self.scene_ref),
                "assets": [str(r) for r in self.asset_refs],
                "action": enc(self.action_ref),
                "renders": [str(r) for r in self.render_refs],
                "geom": [str(r) for r in self.geom_refs],
                "temporal": enc(self.temporal_ref),
                "reviews": [str(r) for r in self.review_refs],
                "verdict": enc(self.verdict_ref),
                "export": enc(self.export_ref),
            },
            "created_at": self.created_at,
            "supersedes": self.supersedes,
        }

    @classmethod
    def from_json(cls, row: dict) -> "SampleRecord":
        refs = row["refs"]

        def dec(text):
            return ArtifactId.parse(text) if text else None

        return cls(
            sample_id=row["sample_id"],
            round_id=int(row["round_id"]),
            scene_ref=dec(refs.get("scene")),
            asset_refs=tuple(ArtifactId.parse(t) for t in refs.get("assets", [])),
            action_ref=dec(refs.get("action")),
            render_refs=tuple(ArtifactId.parse(t) for t in refs.get("renders", [])),
            geom_refs=tuple(ArtifactId.parse(t) for t in refs.get("geom", [])),
            temporal_ref=dec(refs.get("temporal")),
            review_refs=tuple(ArtifactId.parse(t) for t in refs.get("reviews", [])),
            verdict_ref=dec(refs.get("verdict")),
            export_ref=dec(refs.get("export")),
            created_at=row["created_at"],
            supersedes=row.get("supersedes"),
        )


@dataclass(frozen=True)
class RoundRecord:
    round_id: int
    config_ref: ArtifactId
    sample_ids: tuple[str, ...] = ()
    eval_report_ref: Optional[ArtifactId] = None
    verdict: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "round_id": self.round_id,
            "config_ref": str(self.config_ref),
            "sample_ids": list(self.sample_ids),
            "eval_report_ref": str(self.eval_report_ref) if self.eval_report_ref else None,
            "verdict": self.verdict,
        }

    @classmethod
    def from_json(cls, row: dict) -> "RoundRecord":
        return cls(
            round_id=int(row["round_id"]),
            config_ref=ArtifactId.parse(row["config_ref"]),
            sample_ids=tuple(row.get("sample_ids", [])),
            eval_report_ref=(ArtifactId.parse(row["eval_report_ref"])
                             if row.get("eval_report_ref") else None),
            verdict=row.get("verdict"),
        )


@dataclass(frozen=True)
class TraceEntry:
    review_round: int  # -1 for structural artifacts, 0..n-1 for review rounds
    artifact_id: ArtifactId
    role: str


@dataclass(frozen=True)
class SampleTrace:
    sample_id: str
    entries: tuple[TraceEntry, ...]
    open: bool  # no verdict recorded yet
    versions: tuple[str, ...]  # sample_id chain, oldest first

    def artifact_ids(self) -> set[ArtifactId]:
        return {e.artifact_id for e in self.entries}


@dataclass(frozen=True)
class CompletenessReport:
    complete: bool
    missing: tuple[ArtifactKind, ...]


# Canonical ordering of structural roles inside one review round slot.
_ROLE_ORDER = {
    "scene": 0, "asset": 1, "action": 2, "render": 3, "geom": 4,
    "temporal": 5, "review": 6, "verdict": 7, "export": 8,
}


class ArtifactStore:
    """Filesystem-backed store; safe for concurrent in-process writers.

    Layout under ``root``::

        objects/<d0d1>/<d2d3>/<digest>   artifact bytes
        samples.jsonl                    append-only sample records
        rounds.jsonl                     append-only round records
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.objects_dir = self.root / "objects"
        self.samples_path = self.root / "samples.jsonl"
        self.rounds_path = self.root / "rounds.jsonl"
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self._append_lock = threading.Lock()
        self._samples: dict[str, SampleRecord] = {}
        self._rounds: dict[int, RoundRecord] = {}
        self._load_indexes()

    # -- artifacts -----------------------------------------------------

    def put_artifact(self, data: bytes, kind: ArtifactKind) -> ArtifactId:
        if not data:
            raise EmptyPayloadError("refusing to store an empty artifact")
        digest = hashlib.sha256(data).hexdigest()
        aid = ArtifactId(digest=digest, kind=kind)
        path = self._object_path(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f".{digest}.{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)  # atomic publish
        return aid

    def get_artifact(self, artifact_id: ArtifactId) -> bytes:
        path = self._object_path(artifact_id.digest)
        if not path.exists():
            raise StoreError(f"unknown artifact: {artifact_id}")
        return path.read_bytes()

    def has_artifact(self, artifact_id: ArtifactId) -> bool:
        return self._object_path(artifact_id.digest).exists()

    def put_json(self, obj: object, kind: ArtifactKind) -> ArtifactId:
        data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return self.put_artifact(data, kind)

    def get_json(self, artifact_id: ArtifactId) -> object:
        return json.loads(self.get_artifact(artifact_id).decode("utf-8"))

    def _object_path(self, digest: str) -> Path:
        return self.objects_dir / digest[:2] / digest[2:4] / digest

    # -- sample records ------------------------------------------------

    def record_sample(self, record: SampleRecord) -> str:
        for ref in record.all_refs():
            if not self.has_artifact(ref):
                raise DanglingRefError(ref)
        if record.verdict_ref is not None and not record.review_refs:
            raise StoreError(f"sample {record.sample_id}: verdict without any review")
        if record.supersedes is not None and record.supersedes not in self._samples:
            raise UnknownSampleError(f"supersedes unknown sample {record.supersedes}")
        with self._append_lock:
            if record.sample_id in self._samples:
                raise DuplicateSampleError(f"duplicate sample_id {record.sample_id}")
            self._append_line(self.samples_path, record.to_json())
            self._samples[record.sample_id] = record
        return record.sample_id

    def get_sample(self, sample_id: str) -> SampleRecord:
        try:
            return self._samples[sample_id]
        except KeyError:
            raise UnknownSampleError(f"unknown sample {sample_id}") from None

    def sample_ids(self) -> list[str]:
        return list(self._samples)

    def get_trace(self, sample_id: str) -> SampleTrace:
        """Full ref closure of a sample, following the supersedes chain.

        Entries are ordered by review round and then by role; structural
        artifacts sort before the first review.
        """
        record = self.get_sample(sample_id)
        chain: list[SampleRecord] = [record]
        while chain[-1].supersedes is not None:
            chain.append(self.get_sample(chain[-1].supersedes))
        chain.reverse()  # oldest first

        entries: list[TraceEntry] = []
        seen: set[ArtifactId] = set()

        def add(round_idx: int, role: str, ref: Optional[ArtifactId]):
            if ref is not None and ref not in seen:
                seen.add(ref)
                entries.append(TraceEntry(round_idx, ref, role))

        for rec in chain:
            add(-1, "scene", rec.scene_ref)
            for r in rec.asset_refs:
                add(-1, "asset", r)
            add(-1, "action", rec.action_ref)
            for r in rec.render_refs:
                add(-1, "render", r)
            for r in rec.geom_refs:
                add(-1, "geom", r)
            add(-1, "temporal", rec.temporal_ref)
            for i, r in enumerate(rec.review_refs):
                add(i, "review", r)
            n_rounds = len(rec.review_refs)
            add(max(n_rounds - 1, 0), "verdict", rec.verdict_ref)
            add(max(n_rounds - 1, 0), "export", rec.export_ref)

        entries.sort(key=lambda e: (e.review_round, _ROLE_ORDER[e.role]))
        return SampleTrace(
            sample_id=sample_id,
            entries=tuple(entries),
            open=record.verdict_ref is None,
            versions=tuple(rec.sample_id for rec in chain),
        )

    def validate_completeness(
        self, sample_id: str, required: Iterable[ArtifactKind]
    ) -> CompletenessReport:
        record = self.get_sample(sample_id)
        present = {ref.kind for ref in record.all_refs() if self.has_artifact(ref)}
        missing = tuple(k for k in sorted(set(required), key=lambda k: k.value)
                        if k not in present)
        return CompletenessReport(complete=not missing, missing=missing)

    # -- round records ---------------------------------------------------

    def record_round(self, record: RoundRecord) -> int:
        if not self.has_artifact(record.config_ref):
            raise DanglingRefError(record.config_ref)
        with self._append_lock:
            prev = self._rounds.get(record.round_id)
            if prev is not None and prev.verdict is not None:
                raise StoreError(f"round {record.round_id} is already closed")
            self._append_line(self.rounds_path, record.to_json())
            self._rounds[record.round_id] = record
        return record.round_id

    def get_round(self, round_id: int) -> RoundRecord:
        try:
            return self._rounds[round_id]
        except KeyError:
            raise StoreError(f"unknown round {round_id}") from None

    def round_ids(self) -> list[int]:
        return sorted(self._rounds)

    # -- internals -------------------------------------------------------

    def _append_line(self, path: Path, row: dict) -> None:
        line = json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()

    def _load_indexes(self) -> None:
        for record in self._iter_jsonl(self.samples_path):
            rec = SampleRecord.from_json(record)
            self._samples[rec.sample_id] = rec
        for record in self._iter_jsonl(self.rounds_path):
            rec = RoundRecord.from_json(record)
            self._rounds[rec.round_id] = rec

    @staticmethod
    def _iter_jsonl(path: Path) -> Iterator[dict]:
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"{path.name}:{lineno}: corrupt record: {exc}") from exc
