import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softeq.coeffexpr import (
    Binary,
    Const,
    DomainError,
    ParseError,
    UnboundVariable,
    Unary,
    UnknownIdentifier,
    Var,
    evaluate,
    parse,
    to_source,
    variables,
)


def test_exp_of_zero():
    assert evaluate(parse("exp(-x^2)"), {"x": 0.0}) == 1.0


def test_plain_arithmetic():
    # the logistic-map style product a*(1-a)
    assert evaluate(parse("a*(1 - a)"), {"a": 0.3}) == pytest.approx(0.21, abs=1e-15)


def test_names_outside_the_fixed_set_are_rejected():
    with pytest.raises(UnknownIdentifier):
        parse("a*(c - a)")
    with pytest.raises(UnknownIdentifier):
        parse("foo(x)")


def test_parse_error_carries_byte_offset():
    with pytest.raises(ParseError) as exc:
        parse("1 + * 2")
    assert exc.value.offset == 4


def test_hyperbolic_discount_by_hand():
    e = parse("1/(1+0.1*(s - tau))")
    assert evaluate(e, {"s": 1.0, "tau": 0.0}) == pytest.approx(1 / 1.1, abs=1e-15)


def test_clamp():
    e = parse("min(1, max(0, x))")
    assert evaluate(e, {"x": -3.0}) == 0.0
    assert evaluate(e, {"x": 0.4}) == pytest.approx(0.4)
    assert evaluate(e, {"x": 7.0}) == 1.0


def test_log_of_negative_raises():
    with pytest.raises(DomainError):
        evaluate(parse("ln(x)"), {"x": -1.0})


def test_sqrt_of_negative_raises():
    with pytest.raises(DomainError):
        evaluate(parse("sqrt(x)"), {"x": -4.0})


def test_precedence():
    assert evaluate(parse("2+3*4"), {}) == 14.0
    assert evaluate(parse("2^3^2"), {}) == 512.0
    assert evaluate(parse("-x^2"), {"x": 3.0}) == -9.0
    assert evaluate(parse("2*x^2"), {"x": 3.0}) == 18.0


def test_whitespace_insensitive():
    assert to_source(parse(" 1+ 2 *x ")) == to_source(parse("1+2*x"))


def test_unbound_variable():
    with pytest.raises(UnboundVariable):
        evaluate(parse("x + y"), {"x": 1.0})


def test_negative_base_fractional_exponent():
    with pytest.raises(DomainError):
        evaluate(parse("x^0.5"), {"x": -2.0})
    assert evaluate(parse("x^2"), {"x": -2.0}) == 4.0


def test_nan_is_never_propagated():
    with pytest.raises(DomainError):
        evaluate(parse("x/x"), {"x": 0.0})
    # IEEE infinities are allowed
    assert evaluate(parse("1/x"), {"x": 0.0}) == math.inf


def test_no_implicit_multiplication():
    with pytest.raises(ParseError):
        parse("2x")


def test_array_bindings_broadcast():
    e = parse("x*a")
    out = evaluate(e, {"x": np.array([1.0, 2.0]), "a": 3.0})
    assert np.array_equal(out, np.array([3.0, 6.0]))


def test_variables():
    assert variables(parse("exp(t) + x*a - tau")) == {"t", "x", "a", "tau"}


_leaf = st.one_of(
    st.floats(min_value=0.0, max_value=100.0, allow_nan=False).map(Const),
    st.sampled_from(["t", "x", "a", "y", "s", "z", "tau"]).map(Var),
)


def _tree(children):
    unary = st.tuples(
        st.sampled_from(["neg", "exp", "sin", "cos", "tanh", "arctan", "abs"]), children
    ).map(lambda p: Unary(p[0], p[1]))
    binary = st.tuples(
        st.sampled_from(["+", "-", "*", "min", "max"]), children, children
    ).map(lambda p: Binary(p[0], p[1], p[2]))
    return st.one_of(unary, binary)


_exprs = st.recursive(_leaf, _tree, max_leaves=25)


@given(_exprs)
@settings(max_examples=200)
def test_roundtrip_parse_of_printed_tree(tree):
    text = to_source(tree)
    reparsed = parse(text)
    assert reparsed == tree
    assert to_source(reparsed) == text


@given(_exprs, st.floats(min_value=-3, max_value=3, allow_nan=False))
@settings(max_examples=100)
def test_eval_is_deterministic(tree, v):
    bindings = {name: v for name in ("t", "x", "a", "y", "s", "z", "tau")}
    try:
        first = evaluate(tree, bindings)
    except DomainError:
        return
    second = evaluate(tree, bindings)
    assert first == second and isinstance(first, float)


def test_division_and_power_roundtrip():
    for text in ("x / (y / z)", "x / y / z", "2.0 ^ x ^ 2.0", "(2.0 ^ x) ^ 2.0", "-(x + y)"):
        canon = to_source(parse(text))
        assert to_source(parse(canon)) == canon
        a = evaluate(parse(text), {"x": 2.0, "y": 3.0, "z": 5.0})
        b = evaluate(parse(canon), {"x": 2.0, "y": 3.0, "z": 5.0})
        assert a == b
