import math
import os

import numpy as np
import pytest

from isaclab import reward as dsl
from isaclab.config import RewardShaping
from isaclab.reward import EvalError, ParseError, ParseErrorKind, evaluate, parse
from isaclab.selftest import check_byte_fuzz, check_round_trip, random_ast

slow = pytest.mark.skipif(not os.environ.get("ISACLAB_SLOW"), reason="set ISACLAB_SLOW=1")


def features(**overrides):
    values = {"rate": 10.0, "crb": 1e-4, "log10_crb": -4.0, "min_user_rate": 4.0,
              "power_used": 0.1, "power_budget": 0.1, "power_ratio": 1.0, "step_frac": 0.5}
    values.update(overrides)
    return values


def kind_of(source):
    with pytest.raises(ParseError) as info:
        parse(source)
    return info.value.kind


def test_precedence():
    assert evaluate(parse("1 + 2 * 3"), {}) == 7
    assert parse("2 ^ 3 ^ 2").ast == dsl.Pow(dsl.Constant(2.0),
                                              dsl.Pow(dsl.Constant(3.0), dsl.Constant(2.0)))
    assert evaluate(parse("2 ^ 1 ^ 3"), {}) == 2
    assert evaluate(parse("(1+2)*3"), {}) == 9
    assert evaluate(parse("2 ** 3"), {}) == 8
    assert evaluate(parse("-2 ^ 2"), {}) == 4
    assert evaluate(parse("10 - 4 - 3"), {}) == 3
    assert evaluate(parse("8 / 4 / 2"), {}) == 1


def test_canonical_form():
    assert parse("rate/10-log10( crb )/10").canonical() == "rate / 10 - log10(crb) / 10"
    assert parse("(rate - 1) - (2 - crb)").canonical() == "rate - 1 - (2 - crb)"
    assert parse("(2 ^ 3) ^ 2").canonical() == "(2 ^ 3) ^ 2"
    assert parse("clip(rate, -1, 1e3)").canonical() == "clip(rate, -1, 1000)"
    assert parse("0.5 * rate").canonical() == "0.5 * rate"


def test_functions():
    f = features()
    assert evaluate(parse("min(rate, 3)"), f) == 3
    assert evaluate(parse("max(rate, 3)"), f) == 10
    assert evaluate(parse("clip(rate, 0, 2)"), f) == 2
    assert evaluate(parse("abs(-rate)"), f) == 10
    assert evaluate(parse("ln(exp(2))"), f) == pytest.approx(2)
    assert evaluate(parse("tanh(0)"), f) == 0
    assert evaluate(parse("log10(crb)"), f) == pytest.approx(-4)


def test_result_is_clipped():
    assert evaluate(parse("rate * 1000"), features()) == 100
    assert evaluate(parse("-rate * 1000"), features()) == -100


def test_errors_carry_kind():
    assert kind_of("rate $ 2") is ParseErrorKind.LEX
    assert kind_of("rate +") is ParseErrorKind.SYNTAX
    assert kind_of("speed * 2") is ParseErrorKind.UNKNOWN_FEATURE
    assert kind_of("min(rate)") is ParseErrorKind.ARITY
    assert kind_of("log10(rate, crb)") is ParseErrorKind.ARITY
    assert kind_of("clip(rate, 2, 1)") is ParseErrorKind.SYNTAX
    assert kind_of("clip(rate, crb, 1)") is ParseErrorKind.SYNTAX
    assert kind_of("sqrt(rate)") is ParseErrorKind.SYNTAX
    assert kind_of("") is ParseErrorKind.SYNTAX


def test_error_position():
    with pytest.raises(ParseError) as info:
        parse("rate + foo")
    assert info.value.position == 7
    with pytest.raises(ParseError) as info:
        parse("rate + ")
    assert info.value.position == 7
    assert info.value.kind is ParseErrorKind.SYNTAX


def test_grammar_example_tree():
    rate, crb = dsl.Feature("rate"), dsl.Feature("crb")
    expected = dsl.Sub(dsl.Mul(dsl.Constant(0.5), rate),
                       dsl.Mul(dsl.Constant(0.1), dsl.Log10(crb)))
    assert parse("0.5*rate - 0.1*log10(crb)").ast == expected


def test_limits():
    assert kind_of("1" + " + 1" * 600) is ParseErrorKind.LIMIT_EXCEEDED
    assert kind_of("-" * 40 + "rate") is ParseErrorKind.LIMIT_EXCEEDED
    assert kind_of("(" * 200 + "rate" + ")" * 200) is ParseErrorKind.LIMIT_EXCEEDED
    assert kind_of("rate" + " " * dsl.MAX_SOURCE_LEN) is ParseErrorKind.LIMIT_EXCEEDED
    assert kind_of("1e999") is ParseErrorKind.LEX


def test_bytes_input():
    assert parse(b"rate * 2").canonical() == "rate * 2"
    assert kind_of(b"rate \xff") is ParseErrorKind.LEX
    assert kind_of("rate ١") is ParseErrorKind.LEX


def test_strict_evaluation():
    with pytest.raises(EvalError) as info:
        evaluate(parse("rate / (crb - crb)"), features())
    assert info.value.path == ()
    with pytest.raises(EvalError):
        evaluate(parse("log10(rate - rate)"), features())
    with pytest.raises(EvalError):
        evaluate(parse("exp(1000)"), features())
    with pytest.raises(EvalError):
        evaluate(parse("(0 - 8) ^ 0.5"), features())
    with pytest.raises(EvalError):
        evaluate(parse("rate"), {})
    with pytest.raises(EvalError):
        evaluate(parse("rate"), features(rate=math.inf))


def test_features_listed():
    expr = parse("rate / 10 - log10(crb) + 0 * power_ratio")
    assert expr.features() == {"rate", "crb", "power_ratio"}


def test_validate_hand_built():
    ok = dsl.validate(dsl.Add(dsl.Feature("rate"), dsl.Constant(1.0)))
    assert ok.canonical() == "rate + 1"
    with pytest.raises(ParseError):
        dsl.validate(dsl.Feature("nope"))
    with pytest.raises(ParseError):
        dsl.validate(dsl.Clip(dsl.Feature("rate"), 1.0, 0.0))
    deep = dsl.Feature("rate")
    for _ in range(dsl.MAX_DEPTH):
        deep = dsl.Abs(deep)
    with pytest.raises(ParseError):
        dsl.validate(deep)


def test_negative_constant_prints_parenthesized():
    expr = dsl.validate(dsl.Mul(dsl.Constant(-2.0), dsl.Feature("rate")))
    text = expr.canonical()
    assert text == "(-2) * rate"
    assert evaluate(parse(text), features()) == evaluate(expr, features())


def test_round_trip_random_trees():
    rng = np.random.default_rng(11)
    for _ in range(100):
        expr = dsl.validate(random_ast(rng))
        assert parse(expr.canonical()) == expr
    assert check_round_trip(n_cases=1000, seed=1).passed


def test_byte_fuzz_only_raises_parse_errors():
    assert check_byte_fuzz(n_cases=500, max_len=64, seed=2).passed
    assert check_byte_fuzz(n_cases=200, seed=3).passed


@slow
def test_byte_fuzz_full():
    assert check_byte_fuzz().passed


def test_manual_reward():
    expr = dsl.builtin_manual_reward()
    assert expr.canonical() == "rate / 10 - log10(crb) / 10"
    assert evaluate(expr, features()) == pytest.approx(1.4)


def test_normalized_reward_calibration_point():
    expr = dsl.builtin_normalized_reward()
    assert evaluate(expr, features()) == pytest.approx(0.0, abs=1e-12)
    # better rate and better crb both raise the reward
    assert evaluate(expr, features(rate=12.0)) > 0
    assert evaluate(expr, features(crb=1e-5)) > 0


def test_normalized_reward_shaping():
    shaping = RewardShaping(rate_ref=5.0, c_ref=-3.0, c_scale=1.0, beta=2.0, gamma=1.0)
    expr = dsl.builtin_normalized_reward(shaping)
    assert evaluate(expr, features(rate=5.0, crb=1e-3)) == pytest.approx(0.0, abs=1e-12)
    assert evaluate(expr, features(rate=5.0, crb=1e-4)) == pytest.approx(2.0)
    assert evaluate(expr, features(rate=1e6)) == 10


def test_feature_reference_lists_each_feature_once():
    lines = dsl.feature_reference()
    assert [line.split(":")[0] for line in lines] == list(dsl.FEATURE_NAMES)
