"""Action DSL: parsing, canonical printing, validation, state sampling."""

import math
import random

import pytest

from dataevolver.actions import (
    ActionSyntaxError,
    ActionValidationError,
    CameraMotion,
    Composition,
    ImageEndpoints,
    Rotation,
    Scaling,
    SceneManifest,
    Translation,
    VideoDense,
    parse_program,
    print_program,
    sample_states,
    validate_program,
)


def test_parse_rotate_call():
    program = parse_program("rotate(object, yaw=90)")
    assert program.root == Rotation(object="object", yaw_deg=90.0)


def test_parse_compose_with_defaulted_children():
    program = parse_program("compose([rotate, translate])")
    assert isinstance(program.root, Composition)
    assert program.root.children == (Rotation(), Translation())


def test_negative_scale_factor_rejected():
    with pytest.raises(ActionSyntaxError, match="factor must be positive"):
        parse_program("scale(object, factor=-1)")


def test_canonicalization_normalizes_case_and_spacing():
    program = parse_program("ROTATE( obj ,yaw = 90 )")
    assert print_program(program) == "rotate(obj, yaw=90)"


def test_kwargs_accepted_in_any_order():
    a = parse_program("translate(obj, dz=3, dx=1, dy=2)")
    b = parse_program("translate(obj, 1, 2, 3)")
    assert a.root == b.root == Translation(object="obj", dx=1.0, dy=2.0, dz=3.0)


def test_composition_prints_bracketed_children():
    text = "compose([rotate(obj, yaw=45), translate(obj, dx=1, dy=0, dz=0)])"
    assert print_program(parse_program(text)) == text


def _random_primitive(rng: random.Random, depth: int):
    kind = rng.choice(["rotate", "translate", "scale", "camera", "compose"]
                      if depth < 3 else ["rotate", "translate", "scale", "camera"])
    name = f"obj{rng.randint(0, 9)}"
    if kind == "rotate":
        return Rotation(object=name, yaw_deg=rng.choice([-180, -45, 0, 15, 90, 270, 33.5]))
    if kind == "translate":
        return Translation(object=name, dx=round(rng.uniform(-2, 2), 3),
                           dy=round(rng.uniform(-2, 2), 3), dz=round(rng.uniform(-2, 2), 3))
    if kind == "scale":
        return Scaling(object=name, factor=round(rng.uniform(0.1, 3.0), 3))
    if kind == "camera":
        if rng.random() < 0.5:
            return CameraMotion(path=f"path{rng.randint(0, 5)}")
        return CameraMotion(path=tuple(round(rng.uniform(-1, 1), 2) for _ in range(3)))
    return Composition(children=tuple(
        _random_primitive(rng, depth + 1) for _ in range(rng.randint(1, 3))))


def test_round_trip_on_200_generated_programs():
    from dataevolver.actions import ActionProgram

    rng = random.Random(42)
    for _ in range(200):
        root = _random_primitive(rng, 0)
        canonical = print_program(ActionProgram(root=root))
        reparsed = parse_program(canonical)
        assert reparsed.root == root
        assert print_program(reparsed) == canonical


def test_print_is_deterministic():
    program = parse_program("compose([rotate(a, yaw=30), scale(b, factor=1.5)])")
    assert print_program(program) == print_program(program)


def test_syntax_error_carries_position():
    with pytest.raises(ActionSyntaxError) as err:
        parse_program("rotate(obj,\n  yaw=&)")
    assert err.value.line == 2
    assert err.value.column > 0


def test_unknown_primitive_rejected():
    with pytest.raises(ActionSyntaxError, match="unknown primitive"):
        parse_program("frobnicate(obj)")


def test_non_numeric_argument_rejected():
    with pytest.raises(ActionSyntaxError, match="must be numeric"):
        parse_program("rotate(obj, yaw=sideways)")


def test_trailing_input_rejected():
    with pytest.raises(ActionSyntaxError, match="trailing"):
        parse_program("rotate(obj, yaw=90) rotate(obj, yaw=1)")


def test_compose_depth_capped_at_four():
    text = "compose([" * 5 + "rotate" + "])" * 5
    with pytest.raises(ActionSyntaxError, match="depth"):
        parse_program(text)
    ok = "compose([" * 4 + "rotate" + "])" * 4
    parse_program(ok)


def test_empty_compose_rejected():
    with pytest.raises(ActionSyntaxError):
        parse_program("compose([])")


# -- sampling ------------------------------------------------------------------

def test_video_dense_step_15_yields_seven_states():
    program = parse_program("rotate(object, yaw=90)")
    deltas = sample_states(program, VideoDense(step_deg=15))
    yaws = [d.yaw_of("object") for d in deltas]
    assert yaws == [0, 15, 30, 45, 60, 75, 90]
    assert not any(d.clamped for d in deltas)


def test_image_endpoints_yields_identity_and_terminal():
    program = parse_program("rotate(object, yaw=90)")
    deltas = sample_states(program, ImageEndpoints())
    assert len(deltas) == 2
    assert deltas[0].yaw_of("object") == 0.0
    assert deltas[0].fraction == 0.0
    assert deltas[1].yaw_of("object") == 90.0


def test_step_equal_to_sweep_yields_two_states():
    program = parse_program("rotate(object, yaw=90)")
    deltas = sample_states(program, VideoDense(step_deg=90))
    assert [d.yaw_of("object") for d in deltas] == [0, 90]


def test_non_dividing_step_clamps_final_state():
    program = parse_program("rotate(object, yaw=90)")
    deltas = sample_states(program, VideoDense(step_deg=40))
    yaws = [d.yaw_of("object") for d in deltas]
    assert yaws == [0, 40, 80, 90]
    assert deltas[-1].clamped
    assert len(deltas) == math.ceil(90 / 40) + 1


def test_sampling_cardinality_invariant():
    rng = random.Random(5)
    for _ in range(100):
        sweep = rng.choice([30, 45, 90, 180, 270, 360])
        step = rng.uniform(1, sweep * 1.5)
        program = parse_program(f"rotate(object, yaw={sweep})")
        deltas = sample_states(program, VideoDense(step_deg=step))
        assert len(deltas) == math.ceil(sweep / step) + 1
        yaws = [d.yaw_of("object") for d in deltas]
        assert yaws == sorted(yaws)
        assert all(b > a for a, b in zip(yaws, yaws[1:]))
        assert yaws[-1] == pytest.approx(sweep)


def test_zero_step_rejected():
    with pytest.raises(ActionValidationError):
        VideoDense(step_deg=0)


def test_camera_motion_rejected_when_camera_locked():
    program = parse_program("move_camera(path=orbit)")
    with pytest.raises(ActionValidationError, match="camera"):
        sample_states(program, ImageEndpoints(), locked=frozenset({"camera"}))


def test_dense_sampling_requires_angular_sweep():
    program = parse_program("translate(obj, dx=1, dy=0, dz=0)")
    with pytest.raises(ActionValidationError, match="sweep"):
        sample_states(program, VideoDense(step_deg=10))


def test_composition_interpolates_all_children():
    program = parse_program("compose([rotate(a, yaw=90), translate(a, dx=1, dy=0, dz=0)])")
    deltas = sample_states(program, VideoDense(step_deg=45))
    assert [d.yaw_of("a") for d in deltas] == [0, 45, 90]
    assert [d.changes[("a", "dx")] for d in deltas] == [0.0, 0.5, 1.0]


# -- validation -----------------------------------------------------------------

MANIFEST = SceneManifest(objects=frozenset({"mug", "chair"}),
                         locked=frozenset({"camera"}))


def test_validate_known_object_ok():
    assert validate_program(parse_program("rotate(mug, yaw=90)"), MANIFEST) == []


def test_validate_unknown_object():
    violations = validate_program(parse_program("rotate(ghost, yaw=90)"), MANIFEST)
    assert violations == ["unknown object ghost"]


def test_validate_locked_camera():
    violations = validate_program(parse_program("move_camera(path=orbit)"), MANIFEST)
    assert violations == ["task-locked parameter: camera"]


def test_validate_out_of_range_scale():
    violations = validate_program(parse_program("scale(mug, factor=9)"), MANIFEST)
    assert any("out-of-range" in v for v in violations)
