"""Review channels and their fusion: CV measurements, VLM reviews, hybrid score.

Two channels look at every render. ``cv_review`` measures the raster
directly (exposure, edge sharpness, mask framing, contact physics). The VLM
channel is pluggable: ``ScriptedReviewer`` derives a deterministic review
from the simulator's quality oracle, ``RemoteReviewer`` posts the render to
an HTTP endpoint and parses the structured response into the same type.

Fusion follows a fixed recipe: the five integer scores average into the VLM
part, the weighted 0.70/0.30 combination gives the hybrid value, and hard
caps pull the value down when object integrity, composition, or semantic
render quality is very low. Routing turns score plus review into one of
five sample-level outcomes.
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .scene import (
    CONTACT_TOL_M,
    EXPOSURE_TOL,
    PENETRATION_TOL_M,
    RenderBundle,
    SceneState,
    TARGET_BRIGHTNESS,
    brightness,
    circular_diff_deg,
    rgb_to_png,
    true_quality,
)


class ReviewError(Exception):
    pass


class ReviewerTransportError(ReviewError):
    """Remote reviewer unreachable or returned a non-success status."""


class ReviewerResponseError(ReviewError):
    """Remote reviewer answered with a malformed or incomplete payload."""


# -- CV channel ----------------------------------------------------------------

# Object-local edge energy of a defect-free render comfortably exceeds this,
# so clean sharpness clamps to 1.0 while box blur pulls it down fast.
SHARPNESS_EDGE_REF = 0.115

# cv_score weights; renormalized when the mask/framing term is withheld.
CV_WEIGHTS = {"exposure": 0.25, "sharpness": 0.25, "mask_framing": 0.20, "physics": 0.30}
PHYSICS_SCORE_RANGE_M = 0.2  # physics component decays over this distance
MASK_AREA_BAND = (0.02, 0.5)


@dataclass(frozen=True)
class CvSignals:
    exposure: float
    sharpness: float
    mask_framing: Optional[float]
    contact_gap: float
    penetration: float
    physics_ok: bool
    cv_score: float

    def to_json(self) -> dict:
        return {
            "exposure": self.exposure,
            "sharpness": self.sharpness,
            "mask_framing": self.mask_framing,
            "contact_gap": self.contact_gap,
            "penetration": self.penetration,
            "physics_ok": self.physics_ok,
            "cv_score": self.cv_score,
        }


def _object_edge_energy(gray: np.ndarray, mask: np.ndarray) -> float:
    """Mean gradient magnitude over the object footprint (dilated 2 px);
    independent of object size, crushed by blur."""
    gy = np.abs(np.diff(gray, axis=0))
    gx = np.abs(np.diff(gray, axis=1))
    grad = np.zeros_like(gray)
    grad[:-1, :] += gy
    grad[1:, :] += gy
    grad[:, :-1] += gx
    grad[:, 1:] += gx
    region = mask.copy()
    for _ in range(2):
        region = (region | np.roll(region, 1, 0) | np.roll(region, -1, 0)
                  | np.roll(region, 1, 1) | np.roll(region, -1, 1))
    return float(grad[region].mean()) if region.any() else 0.0


def cv_review(bundle: RenderBundle, masks_available: bool = True) -> CvSignals:
    """Deterministic raster measurements plus programmatic physics checks."""
    rgb = bundle.rgb
    if rgb.shape[:2] != bundle.mask.shape:
        raise ReviewError(
            f"raster dimension mismatch: rgb {rgb.shape[:2]} vs mask {bundle.mask.shape}")

    gray = rgb.astype(np.float64).mean(axis=2) / 255.0
    exposure = max(0.0, 1.0 - abs(float(gray.mean()) - TARGET_BRIGHTNESS) / EXPOSURE_TOL)

    sharpness = min(1.0, _object_edge_energy(gray, bundle.mask) / SHARPNESS_EDGE_REF)

    mask_framing: Optional[float] = None
    if masks_available:
        area = float(bundle.mask.mean())
        lo, hi = MASK_AREA_BAND
        if area < lo:
            mask_framing = area / lo
        elif area > hi:
            mask_framing = max(0.0, 1.0 - (area - hi) / 0.3)
        else:
            mask_framing = 1.0

    contact_gap = max(float(bundle.object_pose.z_offset), 0.0)
    penetration = max(-float(bundle.object_pose.z_offset), 0.0)
    physics_ok = bool(contact_gap <= CONTACT_TOL_M and penetration <= PENETRATION_TOL_M)
    physics_component = max(0.0, 1.0 - (contact_gap + penetration) / PHYSICS_SCORE_RANGE_M)

    components = {"exposure": exposure, "sharpness": sharpness, "physics": physics_component}
    if mask_framing is not None:
        components["mask_framing"] = mask_framing
    total_w = sum(CV_WEIGHTS[k] for k in components)
    cv_score = float(sum(CV_WEIGHTS[k] * v for k, v in components.items()) / total_w)

    return CvSignals(
        exposure=float(exposure),
        sharpness=float(sharpness),
        mask_framing=mask_framing,
        contact_gap=contact_gap,
        penetration=penetration,
        physics_ok=physics_ok,
        cv_score=cv_score,
    )


# -- VLM channel ----------------------------------------------------------------

class PairwisePreference(str, Enum):
    BETTER = "better"
    WORSE = "worse"
    TIE = "tie"
    NOT_APPLICABLE = "not_applicable"


SCORE_DIMENSIONS = ("lighting", "object_integrity", "composition",
                    "render_quality", "overall")


@dataclass(frozen=True)
class VlmScores:
    lighting: int
    object_integrity: int
    composition: int
    render_quality: int
    overall: int

    def __post_init__(self):
        for name in SCORE_DIMENSIONS:
            v = getattr(self, name)
            if not isinstance(v, int) or not (0 <= v <= 10):
                raise ReviewError(f"score {name} must be an integer in 0..10, got {v!r}")

    def mean(self) -> float:
        return (self.lighting + self.object_integrity + self.composition
                + self.render_quality + self.overall) / 5.0

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in SCORE_DIMENSIONS}


@dataclass(frozen=True)
class VlmReview:
    scores: VlmScores
    confidence: float
    issue_tags: tuple[str, ...] = ()
    suggested_actions: tuple[str, ...] = ()
    diagnostics: dict[str, str] = field(default_factory=dict, hash=False)
    pairwise_preference: PairwisePreference = PairwisePreference.NOT_APPLICABLE
    asset_viable: bool = True
    freeform_verdict: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "scores": self.scores.to_json(),
            "confidence": self.confidence,
            "issue_tags": list(self.issue_tags),
            "suggested_actions": list(self.suggested_actions),
            "diagnostics": dict(self.diagnostics),
            "pairwise_preference": self.pairwise_preference.value,
            "asset_viable": self.asset_viable,
            "freeform_verdict": self.freeform_verdict,
        }


@dataclass(frozen=True)
class ReviewRequest:
    """Everything a reviewer may look at for one round."""

    current: RenderBundle
    previous: Optional[RenderBundle] = None
    scene_state: Optional[SceneState] = None
    previous_state: Optional[SceneState] = None
    object_reference: Optional[bytes] = None
    pseudo_reference: Optional[bytes] = None
    mode: str = "scene_insertion"
    schema_version: str = "1"


class Reviewer(Protocol):
    def review(self, request: ReviewRequest) -> VlmReview: ...


# Scripted scoring: each dimension blends a strict near-acceptance term with
# a long-range residual term, so scores stay informative across the whole
# correctable range yet collapse quickly once a component leaves ~0.95.
STRICT_SLOPE = 20.0
RESIDUAL_RANGES = {"z": 0.2, "yaw": 60.0, "scale": 1.5, "exposure": 0.5, "blur": 1.0}
KEEP_THRESHOLD = 0.97

# Issue tags fire while a residual is still worth acting on; thresholds sit
# just inside the acceptance region so a sample is never simultaneously
# unacceptable and suggestion-free.
TAG_Z_M = 0.002
TAG_YAW_DEG = 0.4
TAG_SCALE_DEV = 0.008
TAG_BRIGHTNESS_DEV = 0.012


def _dim_score(component: float, residual_frac: float) -> int:
    strict = max(0.0, 1.0 - STRICT_SLOPE * (1.0 - component))
    tail = 1.0 - min(1.0, max(0.0, residual_frac))
    return int(10.0 * (0.7 * strict + 0.3 * tail) + 0.5)


class ScriptedReviewer:
    """Deterministic reviewer driven by the simulator's quality oracle.

    ``viability_floor`` marks the asset non-viable whenever the oracle
    overall drops below it; the default never triggers.
    """

    def __init__(self, viability_floor: float = 0.0):
        self.viability_floor = viability_floor

    def review(self, request: ReviewRequest) -> VlmReview:
        state = request.scene_state
        if state is None:
            raise ReviewError("scripted reviewer needs the scene state")
        q = true_quality(state)
        b_err = brightness(state) - TARGET_BRIGHTNESS
        yaw_err = circular_diff_deg(state.object_yaw_deg, state.target_yaw_deg)

        rho = {
            "exposure": abs(b_err) / RESIDUAL_RANGES["exposure"],
            "blur": state.blur / RESIDUAL_RANGES["blur"],
            "z": abs(state.z_offset) / RESIDUAL_RANGES["z"],
            "yaw": yaw_err / RESIDUAL_RANGES["yaw"],
            "scale": abs(state.scale - 1.0) / RESIDUAL_RANGES["scale"],
        }
        scores = VlmScores(
            lighting=_dim_score(q.exposure_score, rho["exposure"]),
            object_integrity=_dim_score(min(q.scale_score, q.sharpness),
                                        max(rho["scale"], rho["blur"])),
            composition=_dim_score(min(q.grounding_score, q.yaw_score),
                                   max(rho["z"], rho["yaw"])),
            render_quality=_dim_score(min(q.sharpness, q.exposure_score),
                                      max(rho["blur"], rho["exposure"])),
            overall=_dim_score(q.overall, max(rho.values())),
        )

        tags: list[str] = []
        suggestions: list[str] = []
        if state.z_offset > TAG_Z_M:
            tags.append("floating_object")
            suggestions.append("lower")
        elif state.z_offset < -TAG_Z_M:
            tags.append("penetrating")
            suggestions.append("lift")
        if yaw_err > TAG_YAW_DEG:
            tags.append("wrong_yaw")
            suggestions.append("yaw_correct")
        if state.scale < 1.0 - TAG_SCALE_DEV:
            tags.append("too_small")
            suggestions.append("rescale")
        elif state.scale > 1.0 + TAG_SCALE_DEV:
            tags.append("too_large")
            suggestions.append("rescale")
        if b_err < -TAG_BRIGHTNESS_DEV:
            tags.append("underexposed")
            suggestions.append("inc_key_light")
        elif b_err > TAG_BRIGHTNESS_DEV:
            tags.append("overexposed")
            suggestions.append("inc_key_light")
        if state.blur > 0.1:
            tags.append("blurry")
        if state.contact_shadow < 0.1:
            tags.append("flat_lighting")
            suggestions.append("inc_contact_shadow")

        diagnostics = {
            "lighting_diagnosis": ("underexposed" if b_err < -0.05 else
                                   "overexposed" if b_err > 0.05 else "balanced"),
            "structure_consistency": ("degraded" if q.scale_score < 1.0 or q.sharpness < 1.0
                                      else "stable"),
            "color_consistency": "consistent",
            "physics_consistency": ("floating" if state.z_offset > CONTACT_TOL_M else
                                    "penetrating" if state.z_offset < -PENETRATION_TOL_M
                                    else "grounded"),
        }

        pairwise = PairwisePreference.NOT_APPLICABLE
        if request.previous is not None and request.previous_state is not None:
            prev_overall = true_quality(request.previous_state).overall
            if abs(q.overall - prev_overall) < 1e-9:
                pairwise = PairwisePreference.TIE
            elif q.overall > prev_overall:
                pairwise = PairwisePreference.BETTER
            else:
                pairwise = PairwisePreference.WORSE

        return VlmReview(
            scores=scores,
            confidence=0.6 + 0.4 * q.overall,
            issue_tags=tuple(tags),
            suggested_actions=tuple(suggestions),
            diagnostics=diagnostics,
            pairwise_preference=pairwise,
            asset_viable=q.overall >= self.viability_floor,
            freeform_verdict="keep" if q.overall >= KEEP_THRESHOLD else None,
        )


# -- remote VLM backend ------------------------------------------------------------

Transport = Callable[[str, bytes, float], tuple[int, bytes]]


def _urllib_transport(endpoint: str, payload: bytes, timeout: float) -> tuple[int, bytes]:
    req = urllib.request.Request(
        endpoint, data=payload, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
    except (urllib.error.URLError, OSError) as exc:
        raise ReviewerTransportError(f"reviewer endpoint unreachable: {exc}") from exc


def parse_vlm_response(obj: object) -> VlmReview:
    """Strictly validate a wire response; any shape error raises."""
    if not isinstance(obj, dict):
        raise ReviewerResponseError("response must be a JSON object")
    try:
        raw_scores = obj["scores"]
        scores = VlmScores(**{name: int(raw_scores[name]) for name in SCORE_DIMENSIONS})
        confidence = float(obj["confidence"])
        if not (0.0 <= confidence <= 1.0):
            raise ReviewerResponseError(f"confidence out of range: {confidence}")
        pairwise = PairwisePreference(obj.get("pairwise_preference", "not_applicable"))
        review = VlmReview(
            scores=scores,
            confidence=confidence,
            issue_tags=tuple(str(t) for t in obj.get("issue_tags", [])),
            suggested_actions=tuple(str(a) for a in obj.get("suggested_actions", [])),
            diagnostics={str(k): str(v) for k, v in obj.get("diagnostics", {}).items()},
            pairwise_preference=pairwise,
            asset_viable=bool(obj["asset_viable"]),
            freeform_verdict=(str(obj["freeform_verdict"])
                              if obj.get("freeform_verdict") is not None else None),
        )
    except ReviewerResponseError:
        raise
    except (KeyError, TypeError, ValueError, ReviewError) as exc:
        raise ReviewerResponseError(f"malformed reviewer response: {exc}") from exc
    return review


class RemoteReviewer:
    """HTTP-backed reviewer speaking the published wire contract.

    Requests carry base64 PNG images plus the schema version and mode; the
    response must match ``VlmReview`` field names exactly. Failures raise,
    they are never silently defaulted.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2,
                 parallelism: int = 4, transport: Optional[Transport] = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.parallelism = parallelism
        self.transport = transport or _urllib_transport

    def review(self, request: ReviewRequest) -> VlmReview:
        payload = self._encode_request(request)
        last_error: Optional[Exception] = None
        for _ in range(self.retries + 1):
            try:
                status, body = self.transport(self.endpoint, payload, self.timeout)
            except ReviewerTransportError as exc:
                last_error = exc
                continue
            if status != 200:
                last_error = ReviewerTransportError(
                    f"reviewer endpoint returned status {status}")
                continue
            try:
                obj = json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ReviewerResponseError(f"response is not valid JSON: {exc}") from exc
            return parse_vlm_response(obj)
        assert last_error is not None
        raise last_error

    def _encode_request(self, request: ReviewRequest) -> bytes:
        def b64(data: Optional[bytes]) -> Optional[str]:
            return base64.b64encode(data).decode("ascii") if data else None

        images = {"current": b64(rgb_to_png(request.current.rgb))}
        if request.previous is not None:
            images["previous"] = b64(rgb_to_png(request.previous.rgb))
        if request.object_reference is not None:
            images["object_reference"] = b64(request.object_reference)
        if request.pseudo_reference is not None:
            images["pseudo_reference"] = b64(request.pseudo_reference)
        body = {
            "schema_version": request.schema_version,
            "mode": request.mode,
            "has_previous": request.previous is not None,
            "images": images,
        }
        return json.dumps(body, sort_keys=True).encode("utf-8")


# -- fusion and routing --------------------------------------------------------------

@dataclass(frozen=True)
class ReviewConfig:
    w_vlm: float = 0.70
    w_cv: float = 0.30
    cap_trigger: int = 3
    cap_value: float = 0.40
    tau_pass: float = 0.80
    tau_reject: float = 0.40
    disagreement_margin: float = 0.5

    def __post_init__(self):
        if self.w_vlm < 0 or self.w_cv < 0:
            raise ReviewError("weights must be non-negative")
        if abs(self.w_vlm + self.w_cv - 1.0) > 1e-9:
            raise ReviewError("weights must sum to 1")
        if not (self.tau_reject < self.tau_pass):
            raise ReviewError("thresholds must satisfy reject < pass")


@dataclass(frozen=True)
class HybridScore:
    value: float
    capped: bool
    per_view: tuple[float, ...]
    vlm_part: float
    cv_part: float

    def raw_value(self, cfg: ReviewConfig) -> float:
        """Weighted combination before caps; plateau tracking uses this."""
        return cfg.w_vlm * self.vlm_part + cfg.w_cv * self.cv_part


class SampleRoute(str, Enum):
    PASS = "pass"
    ACT = "act"
    REJECT_SAMPLE = "reject_sample"
    ABANDON_ASSET = "abandon_asset"
    INSPECT = "inspect"


def hybrid_score(vlm: VlmReview, cv: CvSignals, cfg: ReviewConfig = ReviewConfig()) -> HybridScore:
    vlm_part = vlm.scores.mean() / 10.0
    raw = cfg.w_vlm * vlm_part + cfg.w_cv * cv.cv_score
    cap_hit = min(vlm.scores.object_integrity, vlm.scores.composition,
                  vlm.scores.render_quality) <= cfg.cap_trigger
    value = min(raw, cfg.cap_value) if cap_hit else raw
    return HybridScore(value=value, capped=cap_hit, per_view=(value,),
                       vlm_part=vlm_part, cv_part=cv.cv_score)


def aggregate_views(per_view: Sequence[float]) -> float:
    """Combine per-view scores: 0.7 * mean + 0.3 * worst."""
    if not per_view:
        raise ReviewError("aggregate_views requires at least one view")
    return 0.7 * (sum(per_view) / len(per_view)) + 0.3 * min(per_view)


def route(score: HybridScore, vlm: VlmReview, cfg: ReviewConfig = ReviewConfig()) -> SampleRoute:
    """Sample-level routing. Non-viable assets are abandoned regardless of
    score; a keep verdict or a passing value accepts; very low values reject;
    strong channel disagreement parks the sample for inspection."""
    if not vlm.asset_viable:
        return SampleRoute.ABANDON_ASSET
    if score.value >= cfg.tau_pass or vlm.freeform_verdict == "keep":
        return SampleRoute.PASS
    if score.value < cfg.tau_reject:
        return SampleRoute.REJECT_SAMPLE
    if abs(score.vlm_part - score.cv_part) > cfg.disagreement_margin:
        return SampleRoute.INSPECT
    return SampleRoute.ACT


def review_reliability(channel_pairs: Sequence[tuple[float, float]],
                       tau: float = 0.8) -> float:
    """Fraction of rounds where the two channels agree on pass/fail."""
    if not channel_pairs:
        return 1.0
    agree = sum(1 for v, c in channel_pairs if (v >= tau) == (c >= tau))
    return agree / len(channel_pairs)
