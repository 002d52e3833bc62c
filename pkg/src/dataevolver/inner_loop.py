"""Generation-time self-correction loop: review, bounded action, verdict.

Each round renders the current control state, reviews it through both
channels, fuses the hybrid score, and routes. An ``act`` route picks one
bounded corrective action: the first valid reviewer suggestion, else the
deterministic fallback mapping from issue tags and diagnostics, else noop.
A safety filter drops moves that would leave the bound table or land inside
the bound margin, keeps task-locked parameters fixed, and freezes any
parameter whose action history oscillates.

The loop stops on acceptance, rejection, abandonment, a score plateau, or
the round cap, and every round persists a structured log line to the store.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import scene as sim
from .review import (
    CvSignals,
    ReviewConfig,
    ReviewRequest,
    Reviewer,
    ReviewError,
    SampleRoute,
    VlmReview,
    cv_review,
    hybrid_score,
    route,
)
from .scene import (
    ACTION_MAGNITUDE_CAPS,
    DEFAULT_STEPS,
    CIRCULAR_PARAMS,
    NOOP,
    PARAM_BOUNDS,
    RESCALE_FACTOR_RANGE,
    CorrectiveAction,
    RenderBundle,
    RenderFailure,
    SceneState,
    TARGET_BRIGHTNESS,
    brightness,
    signed_circular_diff_deg,
)
from .store import ArtifactId, ArtifactKind, ArtifactStore, SampleRecord


class LoopStatus(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    ABANDONED = "abandoned"
    PLATEAUED = "plateaued"
    ROUND_CAPPED = "round_capped"


@dataclass(frozen=True)
class LoopConfig:
    max_rounds: int = 5
    plateau_eps: float = 0.02
    plateau_k: int = 2
    flip_limit: int = 2
    render_size: int = 64
    masks_available: bool = True
    review: ReviewConfig = field(default_factory=ReviewConfig)

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.plateau_eps <= 0 or self.plateau_k < 2:
            raise ValueError("plateau needs eps > 0 and k >= 2")


@dataclass
class ActionHistory:
    entries: list[tuple[str, float, int]] = field(default_factory=list)

    def add(self, parameter: str, signed_delta: float, round_idx: int) -> None:
        if self.entries and round_idx < self.entries[-1][2]:
            raise ValueError("history rounds must be non-decreasing")
        self.entries.append((parameter, signed_delta, round_idx))

    def deltas_for(self, parameter: str) -> list[float]:
        return [d for p, d, _ in self.entries if p == parameter and d != 0.0]


@dataclass
class ControlState:
    scene: SceneState
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(PARAM_BOUNDS))
    frozen: frozenset[str] = frozenset()
    locked: frozenset[str] = frozenset({"camera"})
    round: int = 0


@dataclass(frozen=True)
class InnerLoopResult:
    status: LoopStatus
    final_state: SceneState
    rounds_used: int
    trace_refs: tuple[ArtifactId, ...]
    sample_id: Optional[str] = None
    frozen: frozenset[str] = frozenset()
    cause: Optional[str] = None
    final_score: float = 0.0


# Deterministic fallback mapping, consulted in this order when no reviewer
# suggestion validates. Values are candidate actions tried left to right.
DEFAULT_FALLBACK_MAP: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("floating_object", ("lower",)),
    ("penetrating", ("lift",)),
    ("wrong_yaw", ("yaw_correct",)),
    ("too_small", ("rescale",)),
    ("too_large", ("rescale",)),
    ("underexposed", ("inc_key_light",)),
    ("overexposed", ("material_adjust.value", "inc_env_strength")),
    ("flat_lighting", ("inc_contact_shadow",)),
)

# Diagnostics consulted after issue tags.
_DIAGNOSTIC_FALLBACKS: tuple[tuple[str, str, tuple[str, ...]], ...] = (
    ("physics_consistency", "floating", ("lower",)),
    ("physics_consistency", "penetrating", ("lift",)),
    ("lighting_diagnosis", "underexposed", ("inc_key_light",)),
    ("lighting_diagnosis", "overexposed", ("material_adjust.value", "inc_env_strength")),
)

_SUGGESTIBLE = frozenset(sim.ACTION_NAMES) | {
    f"material_adjust.{c}" for c in sim.MATERIAL_CHANNELS}


def _clamp(value: float, cap: float) -> float:
    return max(-cap, min(cap, value))


def _materialize(name: str, control: ControlState, cv: Optional[CvSignals]) -> CorrectiveAction:
    """Turn an action name into a parameterized action.

    Magnitudes close the measured residual, clamped to the per-action cap;
    when the residual is zero the parameter's default step is used so the
    suggestion still has an observable (and freezable) effect.
    """
    state = control.scene
    channel = None
    if name.startswith("material_adjust"):
        channel = name.split(".", 1)[1] if "." in name else "value"
        name = "material_adjust"

    if name == "noop":
        return NOOP
    if name in ("lower", "lift"):
        gap = cv.contact_gap if cv is not None else max(state.z_offset, 0.0)
        pen = cv.penetration if cv is not None else max(-state.z_offset, 0.0)
        residual = gap if name == "lower" else pen
        magnitude = min(residual, ACTION_MAGNITUDE_CAPS["z_offset"])
        if magnitude == 0.0:
            magnitude = DEFAULT_STEPS["z_offset"]
        return CorrectiveAction(name=name, delta=magnitude)
    if name == "yaw_correct":
        err = signed_circular_diff_deg(state.object_yaw_deg, state.target_yaw_deg)
        delta = _clamp(-err, ACTION_MAGNITUDE_CAPS["object_yaw_deg"])
        if delta == 0.0:
            delta = DEFAULT_STEPS["object_yaw_deg"]
        return CorrectiveAction(name=name, delta=delta)
    if name == "rescale":
        lo, hi = RESCALE_FACTOR_RANGE
        factor = max(lo, min(hi, 1.0 / state.scale))
        return CorrectiveAction(name=name, delta=factor)
    if name in ("inc_key_light", "inc_env_strength"):
        # brightness moves 0.25 per unit of either channel
        want = -4.0 * (brightness(state) - TARGET_BRIGHTNESS)
        param = "key_light" if name == "inc_key_light" else "env_strength"
        delta = _clamp(want, ACTION_MAGNITUDE_CAPS[param])
        if delta == 0.0:
            delta = DEFAULT_STEPS[param]
        return CorrectiveAction(name=name, delta=delta)
    if name == "material_adjust":
        if channel == "value":
            # brightness moves 0.1 per unit of material value
            want = -10.0 * (brightness(state) - TARGET_BRIGHTNESS)
        else:
            want = DEFAULT_STEPS[f"material.{channel}"]
        delta = _clamp(want, ACTION_MAGNITUDE_CAPS[f"material.{channel}"])
        if delta == 0.0:
            delta = DEFAULT_STEPS[f"material.{channel}"]
        return CorrectiveAction(name="material_adjust", delta=delta, channel=channel)
    if name == "rotate_env":
        return CorrectiveAction(name=name, delta=DEFAULT_STEPS["env_rotation_deg"])
    if name == "inc_contact_shadow":
        return CorrectiveAction(name=name, delta=DEFAULT_STEPS["contact_shadow"])
    raise ReviewError(f"unknown action name {name!r}")


def _move_allowed(action: CorrectiveAction, control: ControlState) -> bool:
    """Bounds plus margin check: the landing point must stay at least one
    default step inside the bound table. Circular parameters always pass."""
    param = action.parameter()
    if param is None:
        return True
    if param in CIRCULAR_PARAMS:
        return True
    current = control.scene.get_param(param)
    if action.name == "rescale":
        new_value = current * action.delta
    else:
        new_value = current + action.signed_delta()
    lo, hi = control.bounds.get(param, PARAM_BOUNDS[param])
    margin = DEFAULT_STEPS.get(param, 0.0)
    return (lo + margin) <= new_value <= (hi - margin)


def _valid(action: CorrectiveAction, control: ControlState) -> bool:
    param = action.parameter()
    if param is None:
        return False
    if param in control.locked or param in control.frozen:
        return False
    return _move_allowed(action, control)


def select_action(
    review: VlmReview,
    cv: Optional[CvSignals],
    control: ControlState,
    fallback_map: tuple[tuple[str, tuple[str, ...]], ...] = DEFAULT_FALLBACK_MAP,
) -> CorrectiveAction:
    """Pick one bounded action for this round.

    Reviewer suggestions win in list order when they are in vocabulary, not
    locked, not frozen, and inside bounds; otherwise the fallback map is
    scanned in priority order over the issue tags, then the diagnostics.
    Noop is the total fallback.
    """
    for name in review.suggested_actions:
        if name not in _SUGGESTIBLE:
            continue
        action = _materialize(name, control, cv)
        if _valid(action, control):
            return action
    tags = set(review.issue_tags)
    for tag, candidates in fallback_map:
        if tag not in tags:
            continue
        for name in candidates:
            action = _materialize(name, control, cv)
            if _valid(action, control):
                return action
    for key, value, candidates in _DIAGNOSTIC_FALLBACKS:
        if review.diagnostics.get(key) != value:
            continue
        for name in candidates:
            action = _materialize(name, control, cv)
            if _valid(action, control):
                return action
    return NOOP


def _flip_count(deltas: list[float]) -> int:
    flips = 0
    for a, b in zip(deltas, deltas[1:]):
        if a * b < 0:
            flips += 1
    return flips


def safety_filter(
    action: CorrectiveAction,
    history: ActionHistory,
    control: ControlState,
    flip_limit: int = 2,
) -> tuple[CorrectiveAction, frozenset[str]]:
    """Replace unsafe actions by noop and freeze oscillating parameters.

    Returns the (possibly replaced) action and the updated frozen set. A
    parameter freezes when the new delta would bring its sign-flip count up
    to the flip limit.
    """
    param = action.parameter()
    if param is None:
        return NOOP if action.name != "noop" else action, control.frozen
    if param in control.locked or param in control.frozen:
        return NOOP, control.frozen
    if not _move_allowed(action, control):
        return NOOP, control.frozen

    if action.name == "rescale":
        new_delta = math.log(action.delta)
    else:
        new_delta = action.signed_delta()
    if new_delta != 0.0:
        deltas = history.deltas_for(param) + [new_delta]
        if _flip_count(deltas) >= flip_limit:
            return NOOP, control.frozen | {param}
    return action, control.frozen


def detect_plateau(score_history: list[float], eps: float, k: int) -> bool:
    """True when the best of the last k scores beats the best before them
    by less than eps. Fewer than k+1 entries can never plateau."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(score_history) < k + 1:
        return False
    return max(score_history[-k:]) - max(score_history[:-k]) < eps


@dataclass(frozen=True)
class LogRecord:
    sample_id: str
    round: int
    state: dict
    score: dict
    issue_tags: tuple[str, ...]
    action: dict
    route: str
    frozen: tuple[str, ...]
    cause: Optional[str] = None
    render_ref: Optional[str] = None
    review_ref: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "round": self.round,
            "state": self.state,
            "score": self.score,
            "issue_tags": list(self.issue_tags),
            "action": self.action,
            "route": self.route,
            "frozen": list(self.frozen),
            "cause": self.cause,
            "render_ref": self.render_ref,
            "review_ref": self.review_ref,
        }


@dataclass
class LoopState:
    control: ControlState
    history: ActionHistory = field(default_factory=ActionHistory)
    score_history: list[float] = field(default_factory=list)
    previous_bundle: Optional[RenderBundle] = None
    previous_scene: Optional[SceneState] = None
    log_refs: list[ArtifactId] = field(default_factory=list)
    review_refs: list[ArtifactId] = field(default_factory=list)
    render_refs: list[ArtifactId] = field(default_factory=list)
    routes: list[SampleRoute] = field(default_factory=list)
    terminal: Optional[LoopStatus] = None
    cause: Optional[str] = None
    last_value: float = 0.0


class InnerLoop:
    """Drives one sample through review/act/verdict rounds against a store."""

    def __init__(self, store: ArtifactStore, reviewer: Reviewer,
                 config: LoopConfig = LoopConfig()):
        self.store = store
        self.reviewer = reviewer
        self.config = config

    def step(self, sample_id: str, ls: LoopState) -> LogRecord:
        if ls.terminal is not None:
            raise RuntimeError("loop already terminated")
        cfg = self.config
        ls.control.round += 1
        rnd = ls.control.round
        state = ls.control.scene

        try:
            bundle = sim.render(state, size=cfg.render_size)
        except RenderFailure as exc:
            ls.terminal = LoopStatus.REJECTED
            ls.cause = "render_failure"
            record = self._log(sample_id, rnd, ls, state, None, None, None,
                              SampleRoute.REJECT_SAMPLE, NOOP, cause=str(exc))
            ls.routes.append(SampleRoute.REJECT_SAMPLE)
            return record

        cv = cv_review(bundle, masks_available=cfg.masks_available)
        try:
            vlm = self.reviewer.review(ReviewRequest(
                current=bundle, previous=ls.previous_bundle,
                scene_state=state, previous_state=ls.previous_scene))
        except ReviewError as exc:
            # reviewer failures are surfaced as inspect, never defaulted
            record = self._log(sample_id, rnd, ls, state, bundle, cv, None,
                              SampleRoute.INSPECT, NOOP, cause=f"reviewer_error: {exc}")
            ls.routes.append(SampleRoute.INSPECT)
            self._post_round(ls, bundle, state, raw_score=0.0)
            self._check_stop(ls, rnd)
            return record

        score = hybrid_score(vlm, cv, cfg.review)
        decision = route(score, vlm, cfg.review)
        ls.routes.append(decision)
        ls.last_value = score.value
        raw = score.raw_value(cfg.review)

        action = NOOP
        if decision == SampleRoute.PASS:
            ls.terminal = LoopStatus.ACCEPTED
        elif decision == SampleRoute.ABANDON_ASSET:
            ls.terminal = LoopStatus.ABANDONED
        elif decision == SampleRoute.REJECT_SAMPLE:
            ls.terminal = LoopStatus.REJECTED
            ls.cause = "low_score"
        elif decision == SampleRoute.ACT:
            action = select_action(vlm, cv, ls.control)
            action, frozen = safety_filter(action, ls.history, ls.control,
                                           flip_limit=cfg.flip_limit)
            ls.control.frozen = frozen
            if action.name != "noop":
                param = action.parameter()
                delta = (math.log(action.delta) if action.name == "rescale"
                         else action.signed_delta())
                ls.history.add(param, delta, rnd)
                ls.control.scene = sim.apply_action(
                    state, action, bounds=ls.control.bounds, locked=ls.control.locked)

        record = self._log(sample_id, rnd, ls, state, bundle, cv, (vlm, score),
                          decision, action)
        self._post_round(ls, bundle, state, raw)
        self._check_stop(ls, rnd)
        return record

    def _check_stop(self, ls: LoopState, rnd: int) -> None:
        if ls.terminal is not None:
            return
        cfg = self.config
        if detect_plateau(ls.score_history, cfg.plateau_eps, cfg.plateau_k):
            ls.terminal = LoopStatus.PLATEAUED
        elif rnd >= cfg.max_rounds:
            ls.terminal = LoopStatus.ROUND_CAPPED

    def run(self, initial_state: SceneState, sample_id: str,
            locked: frozenset[str] = frozenset({"camera"}),
            action_program_text: Optional[str] = None,
            round_id: int = 0,
            angle_bin: Optional[int] = None) -> InnerLoopResult:
        ls = LoopState(control=ControlState(scene=initial_state, locked=locked))
        while ls.terminal is None:
            self.step(sample_id, ls)

        verdict_ref = self.store.put_json(
            {"sample_id": sample_id, "status": ls.terminal.value,
             "rounds_used": ls.control.round, "cause": ls.cause,
             "routes": [r.value for r in ls.routes],
             "frozen": sorted(ls.control.frozen),
             "final_score": ls.last_value,
             "object_id": initial_state.object_id,
             "angle_bin": angle_bin,
             "log_refs": [str(r) for r in ls.log_refs]},
            ArtifactKind.VERDICT_RECORD)

        scene_ref = None
        geom_refs: tuple[ArtifactId, ...] = ()
        if ls.terminal == LoopStatus.ACCEPTED:
            # canonical accepted state plus the full geometry bundle
            scene_ref = self.store.put_json(
                {"schema": "scene_state", **ls.control.scene.to_json()},
                ArtifactKind.OBJECT_POSE)
            bundle = sim.render(ls.control.scene, size=self.config.render_size)
            geom_refs = (
                self.store.put_artifact(sim.mask_to_png(bundle.mask), ArtifactKind.MASK),
                self.store.put_artifact(sim.float_raster_to_bytes(bundle.depth),
                                        ArtifactKind.DEPTH_MAP),
                self.store.put_artifact(sim.float_raster_to_bytes(bundle.normal),
                                        ArtifactKind.NORMAL_MAP),
                self.store.put_artifact(sim.pose_to_bytes(bundle.object_pose),
                                        ArtifactKind.OBJECT_POSE),
                self.store.put_artifact(sim.pose_to_bytes(bundle.camera_pose),
                                        ArtifactKind.CAMERA_POSE),
            )

        action_ref = None
        if action_program_text:
            action_ref = self.store.put_artifact(
                action_program_text.encode("utf-8"), ArtifactKind.ACTION_PROGRAM)

        self.store.record_sample(SampleRecord(
            sample_id=sample_id,
            round_id=round_id,
            scene_ref=scene_ref,
            action_ref=action_ref,
            render_refs=tuple(ls.render_refs),
            geom_refs=geom_refs,
            review_refs=tuple(ls.review_refs),
            verdict_ref=verdict_ref,
        ))
        return InnerLoopResult(
            status=ls.terminal,
            final_state=ls.control.scene,
            rounds_used=ls.control.round,
            trace_refs=tuple(ls.log_refs),
            sample_id=sample_id,
            frozen=ls.control.frozen,
            cause=ls.cause,
            final_score=ls.last_value,
        )

    # -- helpers ---------------------------------------------------------

    def _post_round(self, ls: LoopState, bundle: RenderBundle,
                    state: SceneState, raw_score: float) -> None:
        ls.score_history.append(raw_score)
        ls.previous_bundle = bundle
        ls.previous_scene = state

    def _log(self, sample_id: str, rnd: int, ls: LoopState, state: SceneState,
             bundle: Optional[RenderBundle], cv: Optional[CvSignals],
             reviewed: Optional[tuple], decision: SampleRoute,
             action: CorrectiveAction, cause: Optional[str] = None) -> LogRecord:
        render_ref = None
        if bundle is not None:
            render_ref = self.store.put_artifact(
                sim.rgb_to_png(bundle.rgb), ArtifactKind.RGB_IMAGE)
            ls.render_refs.append(render_ref)

        score_fields: dict = {}
        tags: tuple[str, ...] = ()
        if reviewed is not None:
            vlm, score = reviewed
            score_fields = {
                "value": score.value, "capped": score.capped,
                "vlm_part": score.vlm_part, "cv_part": score.cv_part,
                "raw": score.raw_value(self.config.review),
                "vlm_scores": vlm.scores.to_json(),
            }
            tags = vlm.issue_tags
        elif cv is not None:
            score_fields = {"cv_part": cv.cv_score}
        # the review trace records whatever the channels produced this round,
        # including render or reviewer failures
        review_ref = self.store.put_json(
            {"round": rnd,
             "vlm": reviewed[0].to_json() if reviewed else None,
             "cv": cv.to_json() if cv else None,
             "score": score_fields,
             "cause": cause},
            ArtifactKind.REVIEW_TRACE)
        ls.review_refs.append(review_ref)

        record = LogRecord(
            sample_id=sample_id,
            round=rnd,
            state=state.to_json(),
            score=score_fields,
            issue_tags=tags,
            action=action.to_json(),
            route=decision.value,
            frozen=tuple(sorted(ls.control.frozen)),
            cause=cause,
            render_ref=str(render_ref) if render_ref else None,
            review_ref=str(review_ref) if review_ref else None,
        )
        log_ref = self.store.put_artifact(
            (json.dumps(record.to_json(), sort_keys=True) + "\n").encode("utf-8"),
            ArtifactKind.DIAGNOSTIC_LOG)
        ls.log_refs.append(log_ref)
        return record
