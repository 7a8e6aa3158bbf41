from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from anomaloop.commands import (
    AnomalyLabel,
    FaultAssignment,
    FaultDegree,
    InterventionCommand,
    PlanParseError,
    PlanValidationError,
    ResolutionPlan,
    SpeedChange,
    ValidationKind,
    Verb,
    parse,
    serialize,
    validate,
)
from anomaloop.observation import observe
from conftest import make_vehicle, make_world

GHOST_JAM_TEXT = (
    "PLAN ghost_jam\n"
    "ACTION v-0 move_forward speed=increase\n"
    "ACTION v-2 move_forward speed=maintain\n"
    "ACTION v-1 move_forward speed=increase"
)

DEADLOCK_TEXT = (
    "PLAN deadlock\n"
    "ACTION v-8 move_backward distance_m=5 speed=increase\n"
    "ACTION v-0 move_backward distance_m=6\n"
    "ACTION v-3 move_backward distance_m=5\n"
    "ACTION v-6 move_forward speed=maintain"
)

ACCIDENT_TEXT = (
    "PLAN accident\n"
    "FAULT v-9 primary\n"
    "FAULT v-0 none\n"
    "ACTION v-9 relocate distance_m=8\n"
    "ACTION v-0 relocate distance_m=8"
)


class TestParseReferencePlans:
    def test_ghost_jam_plan(self):
        plan = parse(GHOST_JAM_TEXT)
        assert plan.label is AnomalyLabel.GHOST_JAM
        assert plan.faults == ()
        assert plan.commands == (
            InterventionCommand("v-0", Verb.MOVE_FORWARD, None, SpeedChange.INCREASE),
            InterventionCommand("v-2", Verb.MOVE_FORWARD, None, SpeedChange.MAINTAIN),
            InterventionCommand("v-1", Verb.MOVE_FORWARD, None, SpeedChange.INCREASE),
        )

    def test_deadlock_plan(self):
        plan = parse(DEADLOCK_TEXT)
        assert plan.label is AnomalyLabel.DEADLOCK
        assert plan.commands == (
            InterventionCommand("v-8", Verb.MOVE_BACKWARD, 5.0, SpeedChange.INCREASE),
            InterventionCommand("v-0", Verb.MOVE_BACKWARD, 6.0, None),
            InterventionCommand("v-3", Verb.MOVE_BACKWARD, 5.0, None),
            InterventionCommand("v-6", Verb.MOVE_FORWARD, None, SpeedChange.MAINTAIN),
        )

    def test_accident_plan(self):
        plan = parse(ACCIDENT_TEXT)
        assert plan.label is AnomalyLabel.ACCIDENT
        assert plan.faults == (
            FaultAssignment("v-9", FaultDegree.PRIMARY),
            FaultAssignment("v-0", FaultDegree.NONE),
        )
        assert plan.commands == (
            InterventionCommand("v-9", Verb.RELOCATE, 8.0, None),
            InterventionCommand("v-0", Verb.RELOCATE, 8.0, None),
        )


class TestParseDiagnostics:
    def test_unknown_verb_names_token(self):
        with pytest.raises(PlanParseError) as ei:
            parse("PLAN normal\nACTION v-0 fly")
        err = ei.value
        assert err.found == "fly"
        assert err.line == 2
        assert err.column == 12

    def test_unknown_label(self):
        with pytest.raises(PlanParseError) as ei:
            parse("PLAN gridlock")
        assert ei.value.found == "gridlock"

    def test_missing_required_distance(self):
        with pytest.raises(PlanParseError):
            parse("PLAN deadlock\nACTION v-1 move_backward")

    def test_speed_rejected_on_stop(self):
        with pytest.raises(PlanParseError):
            parse("PLAN normal\nACTION v-1 stop speed=increase")

    def test_distance_rejected_on_forward(self):
        with pytest.raises(PlanParseError):
            parse("PLAN normal\nACTION v-1 move_forward distance_m=5")

    def test_fault_outside_accident(self):
        with pytest.raises(PlanParseError):
            parse("PLAN deadlock\nFAULT v-1 primary")

    def test_accident_requires_fault(self):
        with pytest.raises(PlanParseError):
            parse("PLAN accident\nACTION v-1 relocate distance_m=8")

    def test_two_primaries_rejected(self):
        with pytest.raises(PlanParseError):
            parse("PLAN accident\nFAULT v-1 primary\nFAULT v-2 primary")

    def test_case_insensitive_keywords(self):
        plan = parse("plan GHOST_JAM\naction V-0 Move_Forward SPEED=Increase")
        assert plan.label is AnomalyLabel.GHOST_JAM
        assert plan.commands[0].vehicle == "v-0"
        assert plan.commands[0].speed is SpeedChange.INCREASE

    def test_format_header_version_1(self):
        plan = parse("FORMAT 1\nPLAN normal")
        assert plan.label is AnomalyLabel.NORMAL
        with pytest.raises(PlanParseError):
            parse("FORMAT 2\nPLAN normal")

    def test_whitespace_insensitive(self):
        plan = parse("  PLAN   normal  \n\n   ACTION\tv-1   stop   ")
        assert plan.commands[0].verb is Verb.STOP

    def test_bytes_input(self):
        plan = parse(b"PLAN normal")
        assert plan.label is AnomalyLabel.NORMAL


class TestSerialize:
    def test_empty_normal_plan_single_line(self):
        assert serialize(ResolutionPlan(AnomalyLabel.NORMAL)) == "PLAN normal"

    @pytest.mark.parametrize("text", [GHOST_JAM_TEXT, DEADLOCK_TEXT, ACCIDENT_TEXT])
    def test_round_trip_reference_plans(self, text):
        plan = parse(text)
        assert parse(serialize(plan)) == plan

    def test_canonical_output_matches_reference(self):
        # Faults serialize before actions; reference accident text is canonical.
        assert serialize(parse(ACCIDENT_TEXT)) == ACCIDENT_TEXT


_vid = st.integers(min_value=0, max_value=30).map(lambda n: f"v-{n}")
_distance = st.integers(min_value=1, max_value=200).map(lambda n: n / 10.0)


@st.composite
def plans(draw) -> ResolutionPlan:
    label = draw(st.sampled_from(list(AnomalyLabel)))
    n = draw(st.integers(min_value=0, max_value=6))
    vids = draw(st.lists(_vid, min_size=n, max_size=n, unique=True))
    commands = []
    for vid in vids:
        verb = draw(st.sampled_from(list(Verb)))
        distance = draw(_distance) if verb in (Verb.MOVE_BACKWARD, Verb.RELOCATE) else None
        speed = (
            draw(st.one_of(st.none(), st.sampled_from(list(SpeedChange))))
            if verb in (Verb.MOVE_FORWARD, Verb.MOVE_BACKWARD)
            else None
        )
        commands.append(InterventionCommand(vid, verb, distance, speed))
    faults = ()
    if label is AnomalyLabel.ACCIDENT:
        fault_vids = draw(st.lists(_vid, min_size=1, max_size=4, unique=True))
        degrees = draw(
            st.lists(st.sampled_from([FaultDegree.SECONDARY, FaultDegree.NONE]), min_size=len(fault_vids), max_size=len(fault_vids))
        )
        degrees[0] = FaultDegree.PRIMARY
        faults = tuple(FaultAssignment(v, d) for v, d in zip(fault_vids, degrees))
    return ResolutionPlan(label, tuple(commands), faults)


class TestProperties:
    @given(plans())
    def test_round_trip_identity(self, plan):
        assert parse(serialize(plan)) == plan

    @given(st.binary(max_size=60))
    def test_parser_total_on_bytes(self, blob):
        try:
            parse(blob)
        except PlanParseError:
            pass

    @given(st.text(max_size=60))
    def test_parser_total_on_text(self, text):
        try:
            parse(text)
        except PlanParseError:
            pass


def _scene(road, cfg, wrecked=()):
    vehicles = [make_vehicle(f"v-{i}", s=20.0 + 15.0 * i) for i in range(4)]
    for veh in vehicles:
        if veh.id in wrecked:
            veh.wrecked = True
            veh.v = 0.0
    return observe(make_world(road, cfg, vehicles))


class TestValidate:
    def test_unknown_vehicle(self, road, cfg):
        obs = _scene(road, cfg)
        plan = parse("PLAN normal\nACTION v-99 stop")
        with pytest.raises(PlanValidationError) as ei:
            validate(plan, obs)
        assert ei.value.kind is ValidationKind.UNKNOWN_VEHICLE
        assert "v-99" in str(ei.value)

    def test_distance_out_of_range(self, road, cfg):
        obs = _scene(road, cfg, wrecked=("v-1",))
        plan = parse("PLAN normal\nACTION v-1 relocate distance_m=50")
        with pytest.raises(PlanValidationError) as ei:
            validate(plan, obs)
        assert ei.value.kind is ValidationKind.OUT_OF_RANGE

    def test_relocate_requires_wreck(self, road, cfg):
        obs = _scene(road, cfg)
        plan = parse("PLAN normal\nACTION v-1 relocate distance_m=8")
        with pytest.raises(PlanValidationError) as ei:
            validate(plan, obs)
        assert ei.value.kind is ValidationKind.ILLEGAL_VERB_FOR_STATE

    def test_drive_command_on_wreck_rejected(self, road, cfg):
        obs = _scene(road, cfg, wrecked=("v-2",))
        plan = parse("PLAN normal\nACTION v-2 move_forward speed=increase")
        with pytest.raises(PlanValidationError) as ei:
            validate(plan, obs)
        assert ei.value.kind is ValidationKind.ILLEGAL_VERB_FOR_STATE

    def test_duplicate_target(self, road, cfg):
        obs = _scene(road, cfg)
        plan = parse("PLAN normal\nACTION v-1 stop\nACTION v-1 move_forward")
        with pytest.raises(PlanValidationError) as ei:
            validate(plan, obs)
        assert ei.value.kind is ValidationKind.DUPLICATE_TARGET

    def test_stamps_tick_and_digest(self, road, cfg):
        obs = _scene(road, cfg)
        vp = validate(parse("PLAN normal"), obs)
        assert vp.tick == obs.tick
        assert vp.obs_digest == obs.digest()
