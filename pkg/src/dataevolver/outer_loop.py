"""Validation-time self-expansion across dataset rounds.

Per-angle evaluation tables feed weak-subset detection, weak bins receive
targeted expansion requests under a budget, gate configurations filter the
round's candidates, and regression guards turn metric movement between
rounds into a six-valued round verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence


class OuterLoopError(Exception):
    pass


ANGLE_BINS = (45, 90, 135, 180, 225, 270, 315, 360)
FRONT_EQUIVALENT_BIN = 360  # evaluated, never targeted for training expansion

# The reader-facing gate chain: feedback, inner gate, dual gate.
VALID_GATE_CHAIN = ((False, False, False), (True, False, False),
                    (True, True, False), (True, True, True))


class RoundVerdict(str, Enum):
    CONTINUE = "continue"
    INSPECT = "inspect"
    REGENERATE = "regenerate"
    REJECT = "reject"
    STOP_OR_REVERT = "stop_or_revert"
    NO_SIGNAL = "no_signal"


@dataclass(frozen=True)
class GuardSpec:
    metric: str
    direction: str  # "higher" | "lower"
    tolerance: float = 0.005  # relative, in the worsening direction

    def __post_init__(self):
        if self.direction not in ("higher", "lower"):
            raise OuterLoopError(f"guard direction must be higher|lower, got {self.direction!r}")
        if self.tolerance < 0:
            raise OuterLoopError("guard tolerance must be non-negative")


@dataclass(frozen=True)
class InnerGateConfig:
    enabled: bool = False
    threshold: float = 0.8


@dataclass(frozen=True)
class DualGateConfig:
    enabled: bool = False
    reviewer: str = "scripted"  # or an endpoint URL


@dataclass(frozen=True)
class RoundConfig:
    feedback_enabled: bool = False
    inner_gate: InnerGateConfig = field(default_factory=InnerGateConfig)
    dual_gate: DualGateConfig = field(default_factory=DualGateConfig)
    expansion_budget: int = 0
    guards: tuple[GuardSpec, ...] = ()
    allow_nonstandard_chain: bool = False

    def __post_init__(self):
        if self.expansion_budget < 0:
            raise OuterLoopError("expansion_budget must be >= 0")
        chain = (self.feedback_enabled, self.inner_gate.enabled, self.dual_gate.enabled)
        if chain not in VALID_GATE_CHAIN and not self.allow_nonstandard_chain:
            raise OuterLoopError(
                f"gate configuration {chain} is outside the supported chain; "
                "set allow_nonstandard_chain to override")

    def stage_name(self) -> str:
        if self.dual_gate.enabled:
            return "dual_gate"
        if self.inner_gate.enabled:
            return "inner_gate"
        if self.feedback_enabled:
            return "feedback"
        return "base"


@dataclass(frozen=True)
class EvalRecord:
    angle_bin: int
    metric: str
    value: float


@dataclass(frozen=True)
class BinStats:
    mean: Optional[float]
    count: int


@dataclass(frozen=True)
class PerAngleTable:
    """Per-bin metric means over the eight evaluation slots."""

    bins: dict[int, dict[str, BinStats]]

    def metrics(self) -> set[str]:
        names: set[str] = set()
        for stats in self.bins.values():
            names.update(stats)
        return names

    def stats(self, angle_bin: int, metric: str) -> BinStats:
        return self.bins[angle_bin].get(metric, BinStats(mean=None, count=0))

    def to_json(self) -> dict:
        return {
            str(b): {m: {"mean": s.mean, "count": s.count}
                     for m, s in stats.items()}
            for b, stats in self.bins.items()
        }

    @classmethod
    def from_json(cls, row: dict) -> "PerAngleTable":
        bins = {
            int(b): {m: BinStats(mean=s["mean"], count=int(s["count"]))
                     for m, s in stats.items()}
            for b, stats in row.items()
        }
        for b in ANGLE_BINS:
            bins.setdefault(b, {})
        return cls(bins=bins)


def evaluate_round(records: Sequence[EvalRecord]) -> PerAngleTable:
    """Group records into per-bin, per-metric means; empty bins carry count 0."""
    sums: dict[tuple[int, str], list[float]] = {}
    for rec in records:
        if rec.angle_bin not in ANGLE_BINS:
            raise OuterLoopError(f"unknown angle bin {rec.angle_bin}")
        sums.setdefault((rec.angle_bin, rec.metric), []).append(rec.value)
    bins: dict[int, dict[str, BinStats]] = {b: {} for b in ANGLE_BINS}
    for (b, metric), values in sums.items():
        bins[b][metric] = BinStats(mean=sum(values) / len(values), count=len(values))
    return PerAngleTable(bins=bins)


@dataclass(frozen=True)
class WeakBinPolicy:
    metric: str
    direction: str = "higher"
    mode: str = "below_mean_delta"  # or "bottom_k"
    delta: float = 0.0
    k: int = 1

    def __post_init__(self):
        if self.mode not in ("below_mean_delta", "bottom_k"):
            raise OuterLoopError(f"unknown weak-bin mode {self.mode!r}")
        if self.direction not in ("higher", "lower"):
            raise OuterLoopError("direction must be higher|lower")


def find_weak_subsets(table: PerAngleTable, policy: WeakBinPolicy) -> list[int]:
    """Weak bins for one metric, worst first; ties break on ascending label.

    ``below_mean_delta`` flags bins whose direction-adjusted mean trails the
    global mean of populated bins by more than delta; ``bottom_k`` flags the
    k worst populated bins.
    """
    if policy.metric not in table.metrics():
        raise OuterLoopError(f"metric {policy.metric!r} absent from table")
    sign = 1.0 if policy.direction == "higher" else -1.0
    adjusted: dict[int, float] = {}
    for b in ANGLE_BINS:
        stats = table.stats(b, policy.metric)
        if stats.count > 0 and stats.mean is not None:
            adjusted[b] = sign * stats.mean
    if not adjusted:
        return []
    if policy.mode == "below_mean_delta":
        global_mean = sum(adjusted.values()) / len(adjusted)
        weak = [b for b, v in adjusted.items() if global_mean - v > policy.delta]
    else:
        ordered = sorted(adjusted, key=lambda b: (adjusted[b], b))
        weak = ordered[:policy.k]
    return sorted(weak, key=lambda b: (adjusted[b], b))


@dataclass(frozen=True)
class ExpansionRequest:
    object_id: str
    angle_bin: int
    count: int = 1


@dataclass(frozen=True)
class ExpansionPlan:
    requests: tuple[ExpansionRequest, ...]

    def total(self) -> int:
        return sum(r.count for r in self.requests)

    def per_bin(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.requests:
            out[r.angle_bin] = out.get(r.angle_bin, 0) + r.count
        return out

    def to_json(self) -> dict:
        return {"requests": [{"object_id": r.object_id, "angle_bin": r.angle_bin,
                              "count": r.count} for r in self.requests]}


def plan_expansion(weak: Sequence[int], budget: int,
                   catalog: Sequence[str]) -> ExpansionPlan:
    """Split the budget over weak bins round-robin, largest shortfall first.

    ``weak`` is expected worst-first (find_weak_subsets order). The front-
    equivalent 360 bin is evaluated but never targeted, and an empty weak
    set or catalog yields an empty plan.
    """
    if budget < 0:
        raise OuterLoopError("budget must be >= 0")
    targets = [b for b in weak if b != FRONT_EQUIVALENT_BIN]
    if not targets or budget == 0 or not catalog:
        return ExpansionPlan(requests=())
    requests: list[ExpansionRequest] = []
    for i in range(budget):
        bin_label = targets[i % len(targets)]
        object_id = catalog[i % len(catalog)]
        requests.append(ExpansionRequest(object_id=object_id, angle_bin=bin_label))
    return ExpansionPlan(requests=tuple(requests))


# -- gates -------------------------------------------------------------------

@dataclass(frozen=True)
class GateCandidate:
    sample_id: str
    score: float  # final hybrid score
    payload: object = None  # opaque; handed to the post reviewer


@dataclass(frozen=True)
class GateLogEntry:
    sample_id: str
    inner_passed: Optional[bool]  # None when the inner gate is disabled
    post_passed: Optional[bool]   # None when the dual gate is disabled/skipped
    outcome: str                  # accepted | rejected_inner | rejected_post | inspect


PostReviewer = Callable[[GateCandidate], bool]


def apply_gates(
    candidates: Sequence[GateCandidate],
    config: RoundConfig,
    post_reviewer: Optional[PostReviewer] = None,
) -> tuple[list[GateCandidate], list[GateLogEntry]]:
    """Filter candidates through the inner threshold gate then the post gate.

    With both gates disabled the output equals the input. A post reviewer
    failure routes that sample to inspect rather than silently keeping it.
    """
    if config.dual_gate.enabled and post_reviewer is None:
        raise OuterLoopError("dual gate enabled but no post reviewer supplied")
    accepted: list[GateCandidate] = []
    log: list[GateLogEntry] = []
    for cand in candidates:
        inner_passed: Optional[bool] = None
        if config.inner_gate.enabled:
            inner_passed = cand.score >= config.inner_gate.threshold
            if not inner_passed:
                log.append(GateLogEntry(cand.sample_id, inner_passed, None,
                                        "rejected_inner"))
                continue
        post_passed: Optional[bool] = None
        if config.dual_gate.enabled:
            try:
                post_passed = bool(post_reviewer(cand))
            except Exception:
                log.append(GateLogEntry(cand.sample_id, inner_passed, None, "inspect"))
                continue
            if not post_passed:
                log.append(GateLogEntry(cand.sample_id, inner_passed, post_passed,
                                        "rejected_post"))
                continue
        accepted.append(cand)
        log.append(GateLogEntry(cand.sample_id, inner_passed, post_passed, "accepted"))
    return accepted, log


def escalate_gate_failures(
    log: Sequence[GateLogEntry],
    recoverable_routes: Optional[dict[str, bool]] = None,
) -> Optional[RoundVerdict]:
    """Round-level escalation when the gates reject everything.

    Returns regenerate when more than half of the failures are recoverable
    (act/inspect-style outcomes), reject when they are terminal, and None
    when at least one sample survived or there was nothing to gate.
    """
    if not log or any(e.outcome == "accepted" for e in log):
        return None
    recoverable = 0
    for entry in log:
        if recoverable_routes is not None and entry.sample_id in recoverable_routes:
            recoverable += 1 if recoverable_routes[entry.sample_id] else 0
        elif entry.outcome in ("rejected_inner", "inspect"):
            recoverable += 1
    return (RoundVerdict.REGENERATE if recoverable > len(log) / 2
            else RoundVerdict.REJECT)


# -- round verdict --------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    """Aggregate metric values for one round, keyed by metric name."""

    values: dict[str, float]

    def is_empty(self) -> bool:
        return not self.values


@dataclass(frozen=True)
class GuardOutcome:
    metric: str
    delta: float  # direction-normalized; positive is improvement
    improved: bool
    regressed: bool
    tolerance_abs: float


@dataclass(frozen=True)
class GuardReport:
    outcomes: tuple[GuardOutcome, ...]
    verdict: RoundVerdict


def round_verdict(
    current: Optional[MetricReport],
    previous: Optional[MetricReport],
    guards: Sequence[GuardSpec],
) -> GuardReport:
    """Map guarded metric movement between rounds onto a round verdict.

    No current evaluation yields no_signal; a first round with data is
    continue (nothing to regress against). With a previous report, any
    improvement with no beyond-tolerance regression is continue, mixed
    evidence is inspect, regression-only is stop_or_revert, and an
    all-flat round carries no improvement signal so it is inspect too.
    """
    if current is None or current.is_empty():
        return GuardReport(outcomes=(), verdict=RoundVerdict.NO_SIGNAL)
    if previous is None or previous.is_empty():
        return GuardReport(outcomes=(), verdict=RoundVerdict.CONTINUE)

    outcomes: list[GuardOutcome] = []
    for guard in guards:
        if guard.metric not in current.values or guard.metric not in previous.values:
            raise OuterLoopError(f"guard metric {guard.metric!r} missing from reports")
        base = previous.values[guard.metric]
        new = current.values[guard.metric]
        delta = (new - base) if guard.direction == "higher" else (base - new)
        tol_abs = guard.tolerance * abs(base)
        outcomes.append(GuardOutcome(
            metric=guard.metric,
            delta=delta,
            improved=delta > 0,
            regressed=delta < -tol_abs,
            tolerance_abs=tol_abs,
        ))

    any_improved = any(o.improved for o in outcomes)
    any_regressed = any(o.regressed for o in outcomes)
    if any_improved and not any_regressed:
        verdict = RoundVerdict.CONTINUE
    elif any_improved and any_regressed:
        verdict = RoundVerdict.INSPECT
    elif any_regressed:
        verdict = RoundVerdict.STOP_OR_REVERT
    else:
        verdict = RoundVerdict.INSPECT  # flat: no improvement evidence
    return GuardReport(outcomes=tuple(outcomes), verdict=verdict)
