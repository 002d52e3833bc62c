"""Scene simulator: renderer determinism, defect injection, quality oracle."""

import random

import numpy as np
import pytest

from dataevolver.scene import (
    ACTION_MAGNITUDE_CAPS,
    BoundsError,
    CorrectiveAction,
    DefectError,
    DefectSpec,
    LockedParameterError,
    Material,
    PARAM_BOUNDS,
    RESCALE_FACTOR_RANGE,
    RenderFailure,
    SceneState,
    apply_action,
    brightness,
    bytes_to_float_raster,
    float_raster_to_bytes,
    inject_defects,
    mask_to_png,
    png_to_array,
    render,
    rgb_to_png,
    signed_circular_diff_deg,
    true_quality,
)


def test_default_render_satisfies_bundle_invariants():
    state = SceneState()
    bundle = render(state)
    assert bundle.mask.any()
    assert np.isfinite(bundle.depth[bundle.mask]).all()
    norms = np.linalg.norm(bundle.normal[bundle.mask], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    assert bundle.object_pose.yaw_deg == state.object_yaw_deg
    assert bundle.rgb.shape[:2] == bundle.mask.shape == bundle.depth.shape


def test_opposite_yaws_differ_in_at_least_one_percent_of_pixels():
    a = render(SceneState(object_yaw_deg=0))
    b = render(SceneState(object_yaw_deg=180, target_yaw_deg=180))
    frac = (a.rgb != b.rgb).any(axis=2).mean()
    assert frac >= 0.01


def test_render_is_deterministic():
    a = render(SceneState(object_yaw_deg=33, z_offset=0.03, blur=0.2))
    b = render(SceneState(object_yaw_deg=33, z_offset=0.03, blur=0.2))
    assert (a.rgb == b.rgb).all()
    assert (a.mask == b.mask).all()
    assert (a.depth == b.depth).all()
    assert (a.normal == b.normal).all()


def test_brightness_monotone_in_lighting_channels():
    means = [render(SceneState(key_light=k)).rgb.mean() for k in (0.4, 0.8, 1.2, 1.6)]
    assert means == sorted(means)
    means = [render(SceneState(env_strength=e)).rgb.mean() for e in (0.4, 0.8, 1.2, 1.6)]
    assert means == sorted(means)


def test_degenerate_scale_is_a_render_failure():
    with pytest.raises(RenderFailure):
        render(SceneState(scale=0.01))


def test_camera_pose_copies_state_camera():
    state = SceneState()
    assert render(state).camera_pose == state.camera


# -- defects ---------------------------------------------------------------------

def test_grounding_gap_sets_positive_offset():
    out = inject_defects(SceneState(), DefectSpec(grounding_gap=0.05))
    assert out.z_offset == 0.05


def test_penetration_sets_negative_offset():
    out = inject_defects(SceneState(), DefectSpec(penetration=0.02))
    assert out.z_offset == -0.02


def test_injection_is_deterministic():
    spec = DefectSpec(yaw_error=7.5, scale_error=1.2, blur=0.3)
    a = inject_defects(SceneState(), spec, seed=9)
    b = inject_defects(SceneState(), spec, seed=9)
    assert a == b


def test_contradictory_defects_rejected():
    with pytest.raises(DefectError):
        DefectSpec(grounding_gap=0.05, penetration=0.02)


def test_exposure_error_moves_brightness_exactly():
    out = inject_defects(SceneState(), DefectSpec(exposure_error=0.1))
    assert brightness(out) == pytest.approx(0.6)


# -- quality oracle ----------------------------------------------------------------

def test_clean_state_scores_all_ones():
    q = true_quality(SceneState())
    assert (q.exposure_score, q.sharpness, q.grounding_score,
            q.scale_score, q.yaw_score) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert q.overall == 1.0


def test_grounding_curve_midpoint():
    # documented curve: max(0, 1 - |z| / 0.05)
    state = inject_defects(SceneState(), DefectSpec(grounding_gap=0.025))
    assert true_quality(state).grounding_score == pytest.approx(0.5)
    state = inject_defects(SceneState(), DefectSpec(grounding_gap=0.05))
    assert true_quality(state).grounding_score < 1.0


def test_yaw_scale_exposure_curve_midpoints():
    assert true_quality(
        inject_defects(SceneState(), DefectSpec(yaw_error=5))).yaw_score == pytest.approx(0.5)
    assert true_quality(
        inject_defects(SceneState(), DefectSpec(scale_error=1.1))).scale_score == pytest.approx(0.5)
    assert true_quality(
        inject_defects(SceneState(), DefectSpec(exposure_error=0.15))).exposure_score == pytest.approx(0.5)


def test_blur_strictly_decreases_sharpness():
    values = [true_quality(SceneState(blur=b)).sharpness
              for b in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_oracle_all_ones_iff_no_defect():
    rng = random.Random(23)
    for _ in range(200):
        spec = DefectSpec(
            grounding_gap=rng.choice([0.0, rng.uniform(0.001, 0.1)]),
            yaw_error=rng.choice([0.0, rng.uniform(0.1, 30)]),
            scale_error=rng.choice([1.0, rng.uniform(0.7, 1.4)]),
            exposure_error=rng.choice([0.0, rng.uniform(0.01, 0.2)]),
            blur=rng.choice([0.0, rng.uniform(0.05, 1.0)]),
        )
        state = inject_defects(SceneState(), spec)
        zero = (spec.grounding_gap == 0 and spec.penetration == 0
                and spec.yaw_error == 0 and spec.scale_error == 1.0
                and spec.exposure_error == 0 and spec.blur == 0)
        assert (true_quality(state).overall == 1.0) == zero


# -- corrective actions ---------------------------------------------------------------

def test_lower_cancels_matching_offset():
    state = SceneState(z_offset=0.05)
    out = apply_action(state, CorrectiveAction(name="lower", delta=0.05))
    assert out.z_offset == 0.0


def test_action_touches_exactly_one_parameter():
    state = SceneState()
    out = apply_action(state, CorrectiveAction(name="inc_key_light", delta=0.1))
    assert out.key_light == pytest.approx(1.1)
    assert out == SceneState(key_light=out.key_light)


def test_yaw_correct_arithmetic():
    state = SceneState(object_yaw_deg=95, target_yaw_deg=90)
    out = apply_action(state, CorrectiveAction(name="yaw_correct", delta=-5))
    assert out.object_yaw_deg == pytest.approx(90.0)


def test_rescale_is_multiplicative():
    out = apply_action(SceneState(scale=2.0), CorrectiveAction(name="rescale", delta=0.8))
    assert out.scale == pytest.approx(1.6)


def test_material_adjust_touches_named_channel():
    act = CorrectiveAction(name="material_adjust", delta=0.1, channel="roughness")
    out = apply_action(SceneState(), act)
    assert out.material.roughness == pytest.approx(0.6)
    assert out.material.value == 0.5


def test_locked_parameter_is_a_hard_error():
    with pytest.raises(LockedParameterError):
        apply_action(SceneState(), CorrectiveAction(name="lift", delta=0.01),
                     locked=frozenset({"z_offset"}))


def test_out_of_bounds_move_is_a_hard_error():
    with pytest.raises(BoundsError):
        apply_action(SceneState(key_light=1.95),
                     CorrectiveAction(name="inc_key_light", delta=0.2))


def test_noop_changes_nothing():
    state = SceneState(z_offset=0.01)
    assert apply_action(state, CorrectiveAction(name="noop")) == state


def test_noop_carries_no_magnitude():
    with pytest.raises(Exception):
        CorrectiveAction(name="noop", delta=0.1)


def test_correctability_within_five_bounded_actions():
    """Greedy search over the bounded action set fixes any single defect on
    the magnitude grid in at most five actions."""
    caps = ACTION_MAGNITUDE_CAPS

    def candidates(state):
        acts = []
        if state.z_offset > 0:
            acts.append(CorrectiveAction(
                name="lower", delta=min(state.z_offset, caps["z_offset"])))
        if state.z_offset < 0:
            acts.append(CorrectiveAction(
                name="lift", delta=min(-state.z_offset, caps["z_offset"])))
        err = signed_circular_diff_deg(state.object_yaw_deg, state.target_yaw_deg)
        if err != 0:
            acts.append(CorrectiveAction(
                name="yaw_correct",
                delta=max(-caps["object_yaw_deg"], min(caps["object_yaw_deg"], -err))))
        if state.scale != 1.0:
            lo, hi = RESCALE_FACTOR_RANGE
            acts.append(CorrectiveAction(
                name="rescale", delta=max(lo, min(hi, 1.0 / state.scale))))
        db = brightness(state) - 0.5
        if db != 0:
            acts.append(CorrectiveAction(
                name="inc_key_light",
                delta=max(-caps["key_light"], min(caps["key_light"], -4.0 * db))))
        return acts

    grid = []
    for gap in np.linspace(0.01, 0.18, 6):
        grid.append(DefectSpec(grounding_gap=float(gap)))
        grid.append(DefectSpec(penetration=float(gap)))
    for err in np.linspace(2, 45, 6):
        grid.append(DefectSpec(yaw_error=float(err)))
    for se in (0.6, 0.85, 1.15, 1.6):
        grid.append(DefectSpec(scale_error=se))
    for e in (-0.18, -0.05, 0.05, 0.18):
        grid.append(DefectSpec(exposure_error=e))

    for spec in grid:
        state = inject_defects(SceneState(), spec)
        for _ in range(5):
            if true_quality(state).overall >= 0.95:
                break
            options = candidates(state)
            assert options, f"no candidate action for {spec}"
            state = max(
                (apply_action(state, a) for a in options),
                key=lambda s: true_quality(s).overall)
        assert true_quality(state).overall >= 0.95, f"not corrected: {spec}"


def test_bounds_cover_every_actionable_parameter():
    for param in ("z_offset", "key_light", "env_strength", "contact_shadow",
                  "scale", "material.value"):
        lo, hi = PARAM_BOUNDS[param]
        assert lo < hi


# -- serialization -----------------------------------------------------------------

def test_png_round_trip():
    bundle = render(SceneState())
    rgb = png_to_array(rgb_to_png(bundle.rgb))
    assert (rgb == bundle.rgb).all()
    mask = png_to_array(mask_to_png(bundle.mask))
    assert ((mask > 0) == bundle.mask).all()


def test_float_raster_round_trip():
    bundle = render(SceneState())
    depth = bytes_to_float_raster(float_raster_to_bytes(bundle.depth))
    assert (depth == bundle.depth).all()
    normal = bytes_to_float_raster(float_raster_to_bytes(bundle.normal))
    assert (normal == bundle.normal).all()


def test_float_raster_header_is_16_bytes():
    data = float_raster_to_bytes(np.zeros((4, 6), dtype=np.float32))
    assert len(data) == 16 + 4 * 6 * 4


def test_material_channels_clamp_to_unit_interval():
    mat = Material(value=1.5, saturation=-0.2, hue=0.5, roughness=2.0)
    assert mat.value == 1.0
    assert mat.saturation == 0.0
    assert mat.roughness == 1.0
