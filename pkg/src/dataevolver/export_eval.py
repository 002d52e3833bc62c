"""Split construction, dataset export writers, image metrics, and audit math.

Splits are object-disjoint and seeded. The image-pair exporter emits one
manifest per split with seven fields per row; the front-equivalent 360 slot
never becomes a training pair. PSNR and SSIM are computed in-process;
neural metrics arrive from an external CSV with declared directions and flow
through the same aggregation as computed ones.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from io import StringIO
from typing import Iterable, Optional, Sequence

import numpy as np

from .scene import CONTACT_TOL_M, PENETRATION_TOL_M
from .store import ArtifactKind, ArtifactStore


class ExportError(Exception):
    pass


TRAIN_TARGET_ANGLES = (45, 90, 135, 180, 225, 270, 315)
FRONT_ANGLE = 0
FRONT_EQUIVALENT_ANGLE = 360

VIEW_NAMES = {
    45: "right-front",
    90: "right-side",
    135: "right-back",
    180: "back",
    225: "left-back",
    270: "left-side",
    315: "left-front",
}

DEFAULT_INSTRUCTION_TEMPLATE = (
    "Rotate the {object_name} from the front view to the {view_name} view.")

MANIFEST_SCHEMA_VERSION = 1


# -- splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    n_train_objects: int = 35
    n_val_objects: int = 7
    n_test_objects: int = 8
    target_views_per_object: int = 7


@dataclass(frozen=True)
class Splits:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def of(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)


def build_splits(objects: Sequence[str], spec: SplitSpec) -> Splits:
    """Seeded, object-disjoint partition with exact counts."""
    needed = spec.n_train_objects + spec.n_val_objects + spec.n_test_objects
    unique = list(dict.fromkeys(objects))
    if len(unique) != len(objects):
        raise ExportError("object list contains duplicates")
    if len(unique) < needed:
        raise ExportError(
            f"need {needed} objects for the requested splits, got {len(unique)}")
    shuffled = list(unique)
    random.Random(spec.seed).shuffle(shuffled)
    train = shuffled[:spec.n_train_objects]
    val = shuffled[spec.n_train_objects:spec.n_train_objects + spec.n_val_objects]
    test = shuffled[spec.n_train_objects + spec.n_val_objects:needed]
    return Splits(train=tuple(train), val=tuple(val), test=tuple(test))


# -- pair manifests ----------------------------------------------------------------

@dataclass(frozen=True)
class PairManifestRow:
    source_image: str
    target_image: str
    instruction: str
    target_rotation: int
    object_id: str
    object_name: str
    prompt_version: str

    def __post_init__(self):
        for name in ("source_image", "target_image", "instruction",
                     "object_id", "object_name", "prompt_version"):
            if not getattr(self, name):
                raise ExportError(f"manifest row field {name} must be non-empty")
        if self.target_rotation not in TRAIN_TARGET_ANGLES:
            raise ExportError(
                f"target_rotation must be one of {TRAIN_TARGET_ANGLES}, "
                f"got {self.target_rotation}")

    def to_json(self) -> dict:
        return {
            "source_image": self.source_image,
            "target_image": self.target_image,
            "instruction": self.instruction,
            "target_rotation": self.target_rotation,
            "object_id": self.object_id,
            "object_name": self.object_name,
            "prompt_version": self.prompt_version,
        }


@dataclass(frozen=True)
class Manifest:
    kind: str
    rows: tuple[dict, ...]
    skipped: tuple[str, ...] = ()

    def to_jsonl(self) -> str:
        head = {"schema": self.kind, "version": MANIFEST_SCHEMA_VERSION}
        lines = [json.dumps(head, sort_keys=True)]
        lines.extend(json.dumps(row, sort_keys=True) for row in self.rows)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Manifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ExportError("empty manifest")
        head = json.loads(lines[0])
        return cls(kind=head["schema"], rows=tuple(json.loads(ln) for ln in lines[1:]))


@dataclass(frozen=True)
class ExportSample:
    """Export-side view of one accepted object: refs per rendered angle."""

    object_id: str
    object_name: str
    view_renders: dict[int, str]  # angle -> artifact ref or path
    prompt_version: str = "v1"
    sample_ids: dict[int, str] = field(default_factory=dict, hash=False)


def export_image_pairs(
    samples: Sequence[ExportSample],
    splits: Splits,
    instruction_template: str = DEFAULT_INSTRUCTION_TEMPLATE,
) -> dict[str, Manifest]:
    """Build one pair manifest per split from canonical-front sources.

    Rows follow the seven-field schema; an object missing its front view is
    skipped whole, a missing target view skips that row, and both skips are
    logged on the manifest rather than fabricated.
    """
    by_object = {s.object_id: s for s in samples}
    manifests: dict[str, Manifest] = {}
    for split_name in ("train", "val", "test"):
        rows: list[dict] = []
        skipped: list[str] = []
        for object_id in splits.of(split_name):
            sample = by_object.get(object_id)
            if sample is None:
                skipped.append(f"{object_id}: no accepted sample")
                continue
            source = sample.view_renders.get(FRONT_ANGLE)
            if source is None:
                skipped.append(f"{object_id}: missing canonical front view")
                continue
            for angle in TRAIN_TARGET_ANGLES:
                target = sample.view_renders.get(angle)
                if target is None:
                    skipped.append(f"{object_id}: missing target view {angle}")
                    continue
                row = PairManifestRow(
                    source_image=source,
                    target_image=target,
                    instruction=instruction_template.format(
                        object_name=sample.object_name, view_name=VIEW_NAMES[angle]),
                    target_rotation=angle,
                    object_id=sample.object_id,
                    object_name=sample.object_name,
                    prompt_version=sample.prompt_version,
                )
                rows.append(row.to_json())
        manifests[split_name] = Manifest(kind="image_pairs", rows=tuple(rows),
                                         skipped=tuple(skipped))
    return manifests


EXPORT_MODES = ("multi_view", "video_sequence", "geometry_package",
                "trajectory", "preference", "diagnostics")


def export_other(mode: str, samples: Sequence[dict]) -> Manifest:
    """Mode-specific manifests over prepared sample dicts.

    Every row is validated for the artifact kinds its mode requires; rows
    missing a requirement are skipped and logged on the manifest.
    """
    if mode not in EXPORT_MODES:
        raise ExportError(f"unknown export mode {mode!r}")
    rows: list[dict] = []
    skipped: list[str] = []

    def require(sample: dict, keys: Sequence[str]) -> bool:
        missing = [k for k in keys if not sample.get(k)]
        if missing:
            skipped.append(f"{sample.get('sample_id', '?')}: missing {', '.join(missing)}")
            return False
        return True

    for sample in samples:
        if mode == "multi_view":
            if not require(sample, ("sample_id", "source_render", "target_renders")):
                continue
            rows.append({"sample_id": sample["sample_id"],
                         "source_render": sample["source_render"],
                         "target_renders": list(sample["target_renders"])})
        elif mode == "video_sequence":
            if not require(sample, ("sample_id", "frames", "instruction")):
                continue
            frames = list(sample["frames"])
            rows.append({"sample_id": sample["sample_id"],
                         "frames": frames,
                         "timestamps": [round(i / max(1, len(frames) - 1), 6)
                                        for i in range(len(frames))],
                         "instruction": sample["instruction"]})
        elif mode == "geometry_package":
            if not require(sample, ("sample_id", "rgb", "mask", "depth", "normal")):
                continue
            rows.append({"sample_id": sample["sample_id"],
                         "geometry_refs": [sample["rgb"], sample["mask"],
                                           sample["depth"], sample["normal"]]})
        elif mode == "trajectory":
            if not require(sample, ("sample_id", "frames", "poses")):
                continue
            if len(sample["frames"]) != len(sample["poses"]):
                skipped.append(f"{sample['sample_id']}: frame/pose length mismatch")
                continue
            rows.append({"sample_id": sample["sample_id"],
                         "frames": list(sample["frames"]),
                         "poses": list(sample["poses"])})
        elif mode == "preference":
            if not require(sample, ("request_id", "accepted", "rejected")):
                continue
            rows.append({"request_id": sample["request_id"],
                         "accepted": sample["accepted"],
                         "rejected": sample["rejected"]})
        else:  # diagnostics
            if not require(sample, ("sample_id", "verdict_ref", "log_refs")):
                continue
            rows.append({"sample_id": sample["sample_id"],
                         "verdict_ref": sample["verdict_ref"],
                         "log_refs": list(sample["log_refs"]),
                         "issue_tags": list(sample.get("issue_tags", []))})
    return Manifest(kind=mode, rows=tuple(rows), skipped=tuple(skipped))


# -- image metrics -----------------------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio over 8-bit rasters, capped at 99 dB."""
    if a.shape != b.shape:
        raise ExportError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0 ** 2 / mse))


_SSIM_WINDOW = 8
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    win = _SSIM_WINDOW
    h, w = a.shape
    va = np.lib.stride_tricks.sliding_window_view(a, (win, win)).reshape(-1, win * win)
    vb = np.lib.stride_tricks.sliding_window_view(b, (win, win)).reshape(-1, win * win)
    mu_a = va.mean(axis=1)
    mu_b = vb.mean(axis=1)
    var_a = va.var(axis=1)
    var_b = vb.var(axis=1)
    cov = (va * vb).mean(axis=1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM with 8x8 sliding windows and standard stabilizers."""
    if a.shape != b.shape:
        raise ExportError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ExportError(f"images must be at least {_SSIM_WINDOW} pixels per side")
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    if af.ndim == 2:
        return _ssim_single(af, bf)
    return float(np.mean([_ssim_single(af[:, :, c], bf[:, :, c])
                          for c in range(af.shape[2])]))


# -- metric records and audit math ----------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    metric: str
    direction: str  # "higher" | "lower"
    value: float
    angle_bin: int
    sample_id: str
    source: str = "computed"  # or "ingested"

    def __post_init__(self):
        if self.direction not in ("higher", "lower"):
            raise ExportError(f"direction must be higher|lower, got {self.direction!r}")
        if self.source not in ("computed", "ingested"):
            raise ExportError(f"source must be computed|ingested, got {self.source!r}")


class MetricDirections:
    """Per-run registry; each metric declares its direction exactly once."""

    def __init__(self):
        self._directions: dict[str, str] = {}

    def declare(self, metric: str, direction: str) -> None:
        if direction not in ("higher", "lower"):
            raise ExportError(f"direction must be higher|lower, got {direction!r}")
        known = self._directions.get(metric)
        if known is None:
            self._directions[metric] = direction
        elif known != direction:
            raise ExportError(
                f"metric {metric!r} already declared as {known}, got {direction}")

    def direction(self, metric: str) -> str:
        try:
            return self._directions[metric]
        except KeyError:
            raise ExportError(f"no direction declared for metric {metric!r}") from None


def normalize_direction(base: float, other: float, direction: str) -> float:
    """Signed improvement from base to other; positive always means better."""
    if direction == "higher":
        return other - base
    if direction == "lower":
        return base - other
    raise ExportError(f"direction must be higher|lower, got {direction!r}")


def vie_overall(score_view: float, score_cons: float) -> float:
    """Arithmetic mean of the view score and the consistency score."""
    for name, v in (("score_view", score_view), ("score_cons", score_cons)):
        if not (0.0 <= v <= 1.0):
            raise ExportError(f"{name} must be in [0, 1], got {v}")
    return (score_view + score_cons) / 2.0


def ingest_metrics_csv(text: str, registry: Optional[MetricDirections] = None) -> list[MetricRecord]:
    """Parse the external metric CSV (metric,direction,value,angle_bin,sample_id)."""
    registry = registry if registry is not None else MetricDirections()
    reader = csv.DictReader(StringIO(text))
    expected = {"metric", "direction", "value", "angle_bin", "sample_id"}
    if reader.fieldnames is None or set(reader.fieldnames) != expected:
        raise ExportError(
            f"metric CSV must have columns {sorted(expected)}, got {reader.fieldnames}")
    records: list[MetricRecord] = []
    for lineno, row in enumerate(reader, start=2):
        try:
            registry.declare(row["metric"], row["direction"])
            records.append(MetricRecord(
                metric=row["metric"],
                direction=row["direction"],
                value=float(row["value"]),
                angle_bin=int(row["angle_bin"]),
                sample_id=row["sample_id"],
                source="ingested",
            ))
        except (ValueError, ExportError) as exc:
            raise ExportError(f"metric CSV line {lineno}: {exc}") from exc
    return records


# -- engine report -----------------------------------------------------------------

@dataclass(frozen=True)
class EngineReport:
    render_success_rate: float
    artifact_completeness_rate: float
    mean_correction_rounds: float
    acceptance_rate: float
    geometry_validity_rate: float
    review_reliability: float

    def to_json(self) -> dict:
        return {
            "render_success_rate": self.render_success_rate,
            "artifact_completeness_rate": self.artifact_completeness_rate,
            "mean_correction_rounds": self.mean_correction_rounds,
            "acceptance_rate": self.acceptance_rate,
            "geometry_validity_rate": self.geometry_validity_rate,
            "review_reliability": self.review_reliability,
        }


def parse_log_lines(lines: Iterable[str]) -> list[dict]:
    """Parse JSONL round logs; corrupt lines report their line number."""
    rows: list[dict] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ExportError(f"log line {lineno}: corrupt record: {exc}") from exc
    return rows


GEOMETRY_REQUIRED_KINDS = (ArtifactKind.RGB_IMAGE, ArtifactKind.MASK,
                           ArtifactKind.DEPTH_MAP, ArtifactKind.NORMAL_MAP)


def engine_report(
    log_rows: Sequence[dict],
    verdicts: Sequence[dict],
    store: Optional[ArtifactStore] = None,
    required_kinds: Sequence[ArtifactKind] = GEOMETRY_REQUIRED_KINDS,
    reliability_tau: float = 0.8,
) -> EngineReport:
    """Engine-level rates recomputed from the persisted round logs.

    ``log_rows`` are parsed per-round log records; ``verdicts`` are the
    per-sample verdict payloads (sample_id, status, rounds_used).
    """
    requested = len(log_rows)
    rendered = sum(1 for row in log_rows if row.get("render_ref"))
    render_success = rendered / requested if requested else 1.0

    attempted = len(verdicts)
    accepted = [v for v in verdicts if v.get("status") == "accepted"]
    acceptance = len(accepted) / attempted if attempted else 0.0
    mean_rounds = (sum(v["rounds_used"] for v in accepted) / len(accepted)
                   if accepted else 0.0)

    completeness = 1.0
    if store is not None and accepted:
        complete = sum(
            1 for v in accepted
            if store.validate_completeness(v["sample_id"], required_kinds).complete)
        completeness = complete / len(accepted)

    final_states: dict[str, dict] = {}
    for row in log_rows:
        state = row.get("state")
        if state:
            final_states[row["sample_id"]] = state
    valid = 0
    for v in accepted:
        state = final_states.get(v["sample_id"])
        if state is None:
            continue
        z = state.get("z_offset", 0.0)
        if -PENETRATION_TOL_M <= z <= CONTACT_TOL_M:
            valid += 1
    geometry_validity = valid / len(accepted) if accepted else 1.0

    pairs = [(row["score"]["vlm_part"], row["score"]["cv_part"])
             for row in log_rows
             if row.get("score") and "vlm_part" in row["score"]]
    if pairs:
        agree = sum(1 for vp, cp in pairs
                    if (vp >= reliability_tau) == (cp >= reliability_tau))
        reliability = agree / len(pairs)
    else:
        reliability = 1.0

    return EngineReport(
        render_success_rate=render_success,
        artifact_completeness_rate=completeness,
        mean_correction_rounds=mean_rounds,
        acceptance_rate=acceptance,
        geometry_validity_rate=geometry_validity,
        review_reliability=reliability,
    )
