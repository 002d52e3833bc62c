"""Deterministic synthetic scene model, painter renderer, and quality oracle.

The scene is a single object resting on a support plane in front of a fixed
camera. Rendering is a pure function of SceneState onto small rasters, so
every review signal downstream of it is analytically predictable:

* mean image brightness follows ``brightness(state)``, an affine clamp of
  key light, environment strength, and material value;
* the object is an ellipse whose silhouette and marker rotate with yaw;
* grounding defects move the object off the support line by ``z_offset``.

Quality curves are piecewise linear, ``max(0, 1 - |defect| / tolerance)``,
with documented per-channel tolerances; the overall score is the minimum.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from io import BytesIO
from typing import Optional

import numpy as np
from PIL import Image


class SceneError(Exception):
    pass


class RenderFailure(SceneError):
    """Object too small to leave any pixel."""


class DefectError(SceneError):
    pass


class LockedParameterError(SceneError):
    pass


class BoundsError(SceneError):
    pass


# Quality-curve tolerances: score hits zero at this defect magnitude.
GROUNDING_TOL_M = 0.05
YAW_TOL_DEG = 10.0
EXPOSURE_TOL = 0.3
BLUR_TOL = 0.5
SCALE_TOL = 0.2

# Physics acceptance thresholds (stricter than the quality curves).
CONTACT_TOL_M = 0.01
PENETRATION_TOL_M = 0.01

TARGET_BRIGHTNESS = 0.5  # defect-free mean, mid-gray

# Parameters a corrective action may touch, with hard bounds.
# Circular parameters wrap mod 360 and have no saturating bound.
PARAM_BOUNDS: dict[str, tuple[float, float]] = {
    "z_offset": (-0.2, 0.2),
    "key_light": (0.0, 2.0),
    "env_strength": (0.0, 2.0),
    "contact_shadow": (0.0, 1.0),
    "scale": (0.2, 3.0),
    "material.value": (0.0, 1.0),
    "material.saturation": (0.0, 1.0),
    "material.hue": (0.0, 1.0),
    "material.roughness": (0.0, 1.0),
}
CIRCULAR_PARAMS = frozenset({"object_yaw_deg", "env_rotation_deg"})

# Default per-round step sizes; also the bound margin used by safety checks.
DEFAULT_STEPS: dict[str, float] = {
    "z_offset": 0.02,
    "object_yaw_deg": 5.0,
    "key_light": 0.1,
    "env_strength": 0.1,
    "env_rotation_deg": 15.0,
    "contact_shadow": 0.1,
    "scale": 0.1,
    "material.value": 0.1,
    "material.saturation": 0.1,
    "material.hue": 0.1,
    "material.roughness": 0.1,
}

# Largest magnitude a single action may carry (2.5x the default step, so a
# full-range defect stays correctable inside the round cap).
ACTION_MAGNITUDE_CAPS: dict[str, float] = {
    name: 2.5 * step for name, step in DEFAULT_STEPS.items()
}
RESCALE_FACTOR_RANGE = (0.8, 1.25)  # per-action multiplicative cap


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float] = (0.0, 1.2, 3.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_deg: float = 40.0

    def to_json(self) -> dict:
        return {"position": list(self.position), "look_at": list(self.look_at),
                "fov_deg": self.fov_deg}


@dataclass(frozen=True)
class Material:
    value: float = 0.5
    saturation: float = 0.5
    hue: float = 0.5
    roughness: float = 0.5

    def __post_init__(self):
        for name in ("value", "saturation", "hue", "roughness"):
            v = getattr(self, name)
            object.__setattr__(self, name, min(1.0, max(0.0, float(v))))


@dataclass(frozen=True)
class SceneState:
    object_id: str = "object"
    object_yaw_deg: float = 0.0
    target_yaw_deg: float = 0.0
    z_offset: float = 0.0  # positive floats, negative penetrates
    scale: float = 1.0
    key_light: float = 1.0
    env_rotation_deg: float = 0.0
    env_strength: float = 1.0
    contact_shadow: float = 0.5
    material: Material = field(default_factory=Material)
    blur: float = 0.0
    camera: CameraPose = field(default_factory=CameraPose)

    def __post_init__(self):
        if self.scale <= 0:
            raise SceneError("scale must be positive")
        object.__setattr__(self, "object_yaw_deg", float(self.object_yaw_deg) % 360.0)
        object.__setattr__(self, "target_yaw_deg", float(self.target_yaw_deg) % 360.0)
        object.__setattr__(self, "env_rotation_deg", float(self.env_rotation_deg) % 360.0)
        object.__setattr__(self, "contact_shadow", min(1.0, max(0.0, float(self.contact_shadow))))
        object.__setattr__(self, "blur", min(1.0, max(0.0, float(self.blur))))

    def get_param(self, name: str) -> float:
        if name.startswith("material."):
            return getattr(self.material, name.split(".", 1)[1])
        return getattr(self, name)

    def with_param(self, name: str, value: float) -> "SceneState":
        if name.startswith("material."):
            channel = name.split(".", 1)[1]
            return replace(self, material=replace(self.material, **{channel: value}))
        return replace(self, **{name: value})

    def to_json(self) -> dict:
        return {
            "object_id": self.object_id,
            "object_yaw_deg": self.object_yaw_deg,
            "target_yaw_deg": self.target_yaw_deg,
            "z_offset": self.z_offset,
            "scale": self.scale,
            "key_light": self.key_light,
            "env_rotation_deg": self.env_rotation_deg,
            "env_strength": self.env_strength,
            "contact_shadow": self.contact_shadow,
            "material": {"value": self.material.value,
                         "saturation": self.material.saturation,
                         "hue": self.material.hue,
                         "roughness": self.material.roughness},
            "blur": self.blur,
            "camera": self.camera.to_json(),
        }

    @classmethod
    def from_json(cls, row: dict) -> "SceneState":
        mat = row.get("material", {})
        cam = row.get("camera", {})
        return cls(
            object_id=row["object_id"],
            object_yaw_deg=row["object_yaw_deg"],
            target_yaw_deg=row["target_yaw_deg"],
            z_offset=row["z_offset"],
            scale=row["scale"],
            key_light=row["key_light"],
            env_rotation_deg=row["env_rotation_deg"],
            env_strength=row["env_strength"],
            contact_shadow=row["contact_shadow"],
            material=Material(**mat),
            blur=row["blur"],
            camera=CameraPose(position=tuple(cam.get("position", (0.0, 1.2, 3.0))),
                              look_at=tuple(cam.get("look_at", (0.0, 0.0, 0.0))),
                              fov_deg=cam.get("fov_deg", 40.0)),
        )


@dataclass(frozen=True)
class ObjectPose:
    yaw_deg: float
    z_offset: float
    scale: float

    def to_json(self) -> dict:
        return {"yaw_deg": self.yaw_deg, "z_offset": self.z_offset, "scale": self.scale}


@dataclass(frozen=True)
class RenderBundle:
    rgb: np.ndarray      # HxWx3 uint8
    mask: np.ndarray     # HxW bool
    depth: np.ndarray    # HxW float32, meters
    normal: np.ndarray   # HxWx3 float32, unit inside mask
    object_pose: ObjectPose
    camera_pose: CameraPose


@dataclass(frozen=True)
class DefectSpec:
    grounding_gap: float = 0.0
    penetration: float = 0.0
    scale_error: float = 1.0
    yaw_error: float = 0.0
    exposure_error: float = 0.0
    blur: float = 0.0

    def __post_init__(self):
        if self.grounding_gap < 0 or self.penetration < 0:
            raise DefectError("grounding_gap and penetration must be non-negative")
        if self.grounding_gap > 0 and self.penetration > 0:
            raise DefectError("grounding_gap and penetration are mutually exclusive")
        if self.scale_error <= 0:
            raise DefectError("scale_error must be positive")


@dataclass(frozen=True)
class QualityVector:
    exposure_score: float
    sharpness: float
    grounding_score: float
    scale_score: float
    yaw_score: float

    @property
    def overall(self) -> float:
        return min(self.exposure_score, self.sharpness, self.grounding_score,
                   self.scale_score, self.yaw_score)


def _linear_score(magnitude: float, tolerance: float) -> float:
    return max(0.0, 1.0 - abs(magnitude) / tolerance)


def circular_diff_deg(a: float, b: float) -> float:
    """Smallest absolute angular distance between a and b, in [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def signed_circular_diff_deg(a: float, b: float) -> float:
    """Signed shortest rotation from b to a, in (-180, 180]."""
    d = (a - b) % 360.0
    return d - 360.0 if d > 180.0 else d


def brightness(state: SceneState) -> float:
    """Model mean image brightness in [0, 1]; 0.5 at the default state."""
    raw = (0.25 * state.key_light + 0.25 * state.env_strength
           + 0.1 * (state.material.value - 0.5))
    return min(1.0, max(0.0, raw))


def true_quality(state: SceneState) -> QualityVector:
    """Analytic quality of a state; all components 1.0 iff defect-free."""
    return QualityVector(
        exposure_score=_linear_score(brightness(state) - TARGET_BRIGHTNESS, EXPOSURE_TOL),
        sharpness=_linear_score(state.blur, BLUR_TOL),
        grounding_score=_linear_score(state.z_offset, GROUNDING_TOL_M),
        scale_score=_linear_score(state.scale - 1.0, SCALE_TOL),
        yaw_score=_linear_score(
            circular_diff_deg(state.object_yaw_deg, state.target_yaw_deg), YAW_TOL_DEG),
    )


def inject_defects(state: SceneState, defects: DefectSpec, seed: int = 0) -> SceneState:
    """Apply exact defect magnitudes to a state.

    The seed is reserved for jitter terms; the current painter is jitter-free
    so identical inputs always produce identical outputs.
    """
    del seed
    out = state
    if defects.grounding_gap > 0:
        out = replace(out, z_offset=defects.grounding_gap)
    elif defects.penetration > 0:
        out = replace(out, z_offset=-defects.penetration)
    if defects.scale_error != 1.0:
        new_scale = out.scale * defects.scale_error
        lo, hi = PARAM_BOUNDS["scale"]
        if not (lo <= new_scale <= hi):
            raise DefectError(f"scale_error lands outside bounds: {new_scale:.3f}")
        out = replace(out, scale=new_scale)
    if defects.yaw_error != 0.0:
        out = replace(out, object_yaw_deg=out.object_yaw_deg + defects.yaw_error)
    if defects.exposure_error != 0.0:
        # brightness is 0.25 per key-light unit, so shift by 4x the error
        new_key = out.key_light + 4.0 * defects.exposure_error
        lo, hi = PARAM_BOUNDS["key_light"]
        if not (lo <= new_key <= hi):
            raise DefectError(f"exposure_error lands outside key_light bounds: {new_key:.3f}")
        out = replace(out, key_light=new_key)
    if defects.blur > 0.0:
        out = replace(out, blur=min(1.0, defects.blur))
    return out


# -- corrective actions --------------------------------------------------------

ACTION_NAMES = (
    "inc_key_light", "rotate_env", "inc_env_strength", "inc_contact_shadow",
    "lift", "lower", "yaw_correct", "rescale", "material_adjust", "noop",
)

MATERIAL_CHANNELS = ("value", "saturation", "hue", "roughness")


@dataclass(frozen=True)
class CorrectiveAction:
    """One bounded parameter move. ``delta`` is the rescale factor for
    ``rescale``, a signed magnitude otherwise, and unused for ``noop``."""

    name: str
    delta: float = 0.0
    channel: Optional[str] = None

    def __post_init__(self):
        if self.name not in ACTION_NAMES:
            raise SceneError(f"unknown action {self.name!r}")
        if self.name == "material_adjust" and self.channel not in MATERIAL_CHANNELS:
            raise SceneError(f"material_adjust needs a channel, got {self.channel!r}")
        if self.name == "noop" and self.delta:
            raise SceneError("noop carries no magnitude")

    def parameter(self) -> Optional[str]:
        """Name of the scene parameter this action moves, or None for noop."""
        mapping = {
            "inc_key_light": "key_light",
            "rotate_env": "env_rotation_deg",
            "inc_env_strength": "env_strength",
            "inc_contact_shadow": "contact_shadow",
            "lift": "z_offset",
            "lower": "z_offset",
            "yaw_correct": "object_yaw_deg",
            "rescale": "scale",
        }
        if self.name == "material_adjust":
            return f"material.{self.channel}"
        return mapping.get(self.name)

    def signed_delta(self) -> float:
        if self.name == "lower":
            return -self.delta
        return self.delta

    def to_json(self) -> dict:
        return {"name": self.name, "delta": self.delta, "channel": self.channel}

    @classmethod
    def from_json(cls, row: dict) -> "CorrectiveAction":
        return cls(name=row["name"], delta=row.get("delta", 0.0),
                   channel=row.get("channel"))


NOOP = CorrectiveAction(name="noop")


def apply_action(
    state: SceneState,
    action: CorrectiveAction,
    bounds: Optional[dict[str, tuple[float, float]]] = None,
    locked: frozenset[str] = frozenset(),
) -> SceneState:
    """Apply one bounded action; exactly one parameter group changes.

    Raises on locked parameters and on moves that leave the bound table;
    callers are expected to pre-filter, so both are hard errors here.
    """
    if action.name == "noop":
        return state
    param = action.parameter()
    assert param is not None
    if param in locked or "camera" in locked and param == "camera":
        raise LockedParameterError(f"parameter {param} is locked")
    bounds = bounds or PARAM_BOUNDS
    current = state.get_param(param)
    if action.name == "rescale":
        new_value = current * action.delta
    else:
        new_value = current + action.signed_delta()
    if param in CIRCULAR_PARAMS:
        new_value %= 360.0
    else:
        lo, hi = bounds.get(param, PARAM_BOUNDS[param])
        if not (lo <= new_value <= hi):
            raise BoundsError(
                f"{action.name} would move {param} to {new_value:.4f}, "
                f"outside [{lo}, {hi}]")
    return state.with_param(param, new_value)


# -- renderer -------------------------------------------------------------------

RASTER_SIZE = 64
_SUPPORT_ROW_FRAC = 0.72       # support line height in the image
_PIXELS_PER_METER = 80.0
_BASE_RADIUS_FRAC = 0.145      # object radius at scale 1, fraction of size


def render(state: SceneState, size: int = RASTER_SIZE) -> RenderBundle:
    """Paint the scene onto rasters; deterministic in the state.

    Raises RenderFailure when the object footprint is under one pixel.
    """
    w = h = int(size)
    support_y = _SUPPORT_ROW_FRAC * h
    radius = _BASE_RADIUS_FRAC * h * state.scale
    if radius < 0.75:
        raise RenderFailure(
            f"object scale {state.scale:.4f} leaves no pixel at size {size}")

    b = brightness(state)
    yaw = math.radians(state.object_yaw_deg)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rgb = np.empty((h, w, 3), dtype=np.float64)

    # sky above the support line, floor below; weights chosen so the image
    # mean tracks the model brightness with near-zero bias
    sky = np.clip(b * 1.03, 0.0, 1.0)
    floor = np.clip(b * 0.923, 0.0, 1.0)
    rgb[:, :, :] = sky
    rgb[ys >= support_y] = floor
    # environment rotation slides a zero-mean horizontal ripple across the sky
    ripple = 0.03 * state.env_strength * np.sin(
        2.0 * math.pi * (xs / w + state.env_rotation_deg / 360.0))
    rgb[ys < support_y] += ripple[ys < support_y][:, None]

    # object ellipse: silhouette elongates with yaw, center rises with z_offset
    cx = w / 2.0
    z_px = state.z_offset * _PIXELS_PER_METER * (h / RASTER_SIZE)
    rx = radius * (0.80 + 0.20 * abs(math.cos(yaw)))
    ry = radius * 0.80
    cy = support_y - ry - z_px
    u = (xs - cx) / rx
    v = (ys - cy) / ry
    rr = u * u + v * v
    mask = rr <= 1.0
    if not mask.any():
        raise RenderFailure("object projected outside the image")

    obj_base = np.clip(b * (0.4 + 1.2 * state.material.value), 0.0, 1.0)
    hue_angle = 2.0 * math.pi * state.material.hue
    tint = 0.35 * state.material.saturation
    channel_gain = np.array([
        1.0 + tint * math.cos(hue_angle),
        1.0 + tint * math.cos(hue_angle - 2.0 * math.pi / 3.0),
        1.0 + tint * math.cos(hue_angle + 2.0 * math.pi / 3.0),
    ])
    shade = 1.0 - 0.25 * np.sqrt(np.clip(rr, 0.0, 1.0))  # limb darkening
    # fine stripe texture aligned with yaw, fixed 4-pixel period: makes blur
    # measurable on the raster regardless of object size and keeps opposite
    # yaws visually distinct
    stripe_axis = (xs - cx) * math.cos(yaw) + (ys - cy) * math.sin(yaw)
    stripes = 1.0 + 0.15 * np.sign(np.sin(2.0 * math.pi * stripe_axis / 4.0 + yaw))
    shade = shade * stripes
    for c in range(3):
        rgb[:, :, c][mask] = np.clip(obj_base * channel_gain[c] * shade[mask], 0.0, 1.0)

    # yaw marker: a bright dot riding the rim, dark counter-dot opposite
    marker_r = max(1.5, radius * 0.30)
    for angle, lum in ((yaw, 0.35), (yaw + math.pi, -0.25)):
        mx = cx + 0.55 * rx * math.cos(angle)
        my = cy - 0.55 * ry * math.sin(angle)
        dot = (xs - mx) ** 2 + (ys - my) ** 2 <= marker_r ** 2
        dot &= mask
        rgb[dot] = np.clip(obj_base + lum, 0.0, 1.0)

    # specular highlight shrinks with roughness
    spec = (xs - (cx - 0.3 * rx)) ** 2 + (ys - (cy - 0.3 * ry)) ** 2 <= (radius * 0.15) ** 2
    spec &= mask
    rgb[spec] = np.clip(rgb[spec] + 0.2 * (1.0 - state.material.roughness), 0.0, 1.0)

    # contact shadow under the object on the support plane
    if state.contact_shadow > 0:
        sv = (ys - support_y) / max(2.0, 0.22 * radius)
        su = (xs - cx) / (rx * 1.1)
        shadow = (su * su + sv * sv <= 1.0) & (ys >= support_y) & ~mask
        rgb[shadow] *= 1.0 - 0.5 * state.contact_shadow

    if state.blur > 0:
        rgb = _box_blur(rgb, int(round(state.blur * 4)))

    rgb8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)

    depth = np.empty((h, w), dtype=np.float32)
    depth[:, :] = 6.0
    floor_rows = ys >= support_y
    depth[floor_rows] = (3.0 + 2.0 * (h - ys[floor_rows]) / max(1.0, h - support_y)).astype(np.float32)
    bulge = np.sqrt(np.clip(1.0 - rr, 0.0, 1.0))
    depth[mask] = (2.5 - 0.3 * bulge[mask]).astype(np.float32)

    normal = np.zeros((h, w, 3), dtype=np.float32)
    normal[:, :, 2] = 1.0
    normal[floor_rows] = (0.0, 1.0, 0.0)
    sphere_n = np.stack([u, -v, bulge], axis=-1)
    norms = np.linalg.norm(sphere_n, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    sphere_n = sphere_n / norms
    normal[mask] = sphere_n[mask].astype(np.float32)

    return RenderBundle(
        rgb=rgb8,
        mask=mask,
        depth=depth,
        normal=normal,
        object_pose=ObjectPose(yaw_deg=state.object_yaw_deg,
                               z_offset=state.z_offset, scale=state.scale),
        camera_pose=state.camera,
    )


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / (k * k)


# -- raster serialization ---------------------------------------------------------

_FLOAT_MAGIC = b"DEF1"


def rgb_to_png(rgb: np.ndarray) -> bytes:
    buf = BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_to_png(mask: np.ndarray) -> bytes:
    buf = BytesIO()
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_to_array(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(BytesIO(data)))


def float_raster_to_bytes(arr: np.ndarray) -> bytes:
    """16-byte header (magic, width, height, channels) + little-endian f32."""
    if arr.ndim == 2:
        h, w = arr.shape
        c = 1
    else:
        h, w, c = arr.shape
    header = _FLOAT_MAGIC + struct.pack("<III", w, h, c)
    return header + arr.astype("<f4").tobytes()


def bytes_to_float_raster(data: bytes) -> np.ndarray:
    if data[:4] != _FLOAT_MAGIC:
        raise SceneError("bad float raster magic")
    w, h, c = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data[16:], dtype="<f4").reshape(
        (h, w) if c == 1 else (h, w, c))
    return arr.copy()


def pose_to_bytes(pose: ObjectPose | CameraPose) -> bytes:
    return json.dumps(pose.to_json(), sort_keys=True).encode("utf-8")
