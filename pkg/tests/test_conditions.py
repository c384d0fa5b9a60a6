import pytest

from edgerules.conditions import (CHANGE, DECR, EVALUATOR, EXIST, INCR, CondAnd, CondOr,
                                  CondTerm, format_condition, parse_condition,
                                  referenced_resources)
from edgerules.errors import EmptyCondition, InvalidComparator, SourceError


def test_two_block_condition():
    expr = parse_condition("[MultiSensorA]Temp > 25° C AND [DoorSensorB]isOpen == True")
    assert expr == CondAnd(
        CondTerm(EVALUATOR, "MultiSensorA", "Temp", ">", 25.0),
        CondTerm(EVALUATOR, "DoorSensorB", "isOpen", "==", True))


def test_unit_suffix_is_discarded():
    with_unit = parse_condition("[A]Temp > 25° C")
    without = parse_condition("[A]Temp > 25")
    assert with_unit == without


def test_exist_condition():
    expr = parse_condition("@exist[SensorA] == True")
    assert expr == CondTerm(EXIST, "SensorA", None, "==", True)


def test_exist_sensor11():
    expr = parse_condition("@exist[Sensor11] == True")
    assert expr == CondTerm(EXIST, "Sensor11", None, "==", True)


def test_change_condition():
    expr = parse_condition("@change[DoorSensor1]State == True")
    assert expr == CondTerm(CHANGE, "DoorSensor1", "State", "==", True)


def test_incr_decr_conditions():
    assert parse_condition("@incr[SensorA]Temp == True") == \
        CondTerm(INCR, "SensorA", "Temp", "==", True)
    assert parse_condition("@decr[SensorA]Temp == True") == \
        CondTerm(DECR, "SensorA", "Temp", "==", True)


def test_equals_alias():
    assert parse_condition("[A]Mode = 3") == parse_condition("[A]Mode == 3")


def test_and_binds_tighter_than_or():
    expr = parse_condition("[A]x == 1 or [B]y == 2 and [C]z == 3")
    assert isinstance(expr, CondOr)
    assert isinstance(expr.right, CondAnd)


def test_parentheses_group():
    expr = parse_condition("([A]x == 1 OR [B]y == 2) AND [C]z == 3")
    assert isinstance(expr, CondAnd)
    assert isinstance(expr.left, CondOr)


def test_boolean_literal_casings():
    for text in ("True", "true", "False", "false"):
        expr = parse_condition(f"@exist[S] == {text}")
        assert expr.literal is (text.lower() == "true")


def test_string_literal():
    expr = parse_condition('[A]Mode == "eco"')
    assert expr.literal == "eco"


def test_empty_condition():
    with pytest.raises(EmptyCondition):
        parse_condition("   ")


def test_edge_kinds_reject_ordering_comparators():
    with pytest.raises(InvalidComparator):
        parse_condition("@exist[S] > 1")
    with pytest.raises(SourceError):
        parse_condition("@change[S]Cap == 5")


def test_exist_rejects_capability():
    with pytest.raises(SourceError):
        parse_condition("@exist[S]Temp == True")


def test_evaluator_requires_capability_and_comparator():
    with pytest.raises(SourceError):
        parse_condition("[S] == True")
    with pytest.raises(SourceError):
        parse_condition("[S]Temp")


def test_error_position_points_into_source():
    with pytest.raises(SourceError) as exc:
        parse_condition("[A]Temp >")
    err = exc.value
    assert err.line == 1 and 1 <= err.column <= len("[A]Temp >") + 1


def test_referenced_resources():
    expr = parse_condition("[A]x == 1 AND (@exist[B] == True OR [A]y == 2)")
    assert referenced_resources(expr) == {"A", "B"}


def test_format_condition_roundtrip():
    samples = [
        "[MultiSensorA]Temp > 25 AND [DoorSensorB]isOpen == True",
        "@exist[Sensor11] == True",
        "(@change[D]State == True OR [A]x <= -4.5) AND @decr[B]Level == False",
        '[M]Mode != "eco \\"quoted\\""',
    ]
    for text in samples:
        expr = parse_condition(text)
        assert parse_condition(format_condition(expr)) == expr


def test_format_uses_explicit_parens():
    expr = CondOr(CondAnd(CondTerm(EVALUATOR, "A", "x", "==", 1.0),
                          CondTerm(EVALUATOR, "B", "y", "==", 2.0)),
                  CondTerm(EVALUATOR, "C", "z", "==", 3.0))
    assert format_condition(expr) == "([A]x == 1 AND [B]y == 2) OR [C]z == 3"
