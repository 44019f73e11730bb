import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtune.errors import ConfigurationError, DomainError
from flowtune.metrics import (
    DEFAULT_BASELINES,
    MISSING,
    Baseline,
    MetricRecord,
    Objective,
    ObjectiveValue,
    check_constraints,
    check_pdp,
    co_opt_average,
    derive_pdp,
    dump_baselines,
    geometric_mean,
    get_baseline,
    load_baselines,
    normalized_loss,
)

SONNET_CO_OPT = [0.865, 0.823, 0.816, 0.866, 0.937, 0.828]
KIMI_CO_OPT = [0.865, 0.822, 0.816, 0.865, 0.936, 0.828]


def rec(**kw):
    kw.setdefault("status", "complete" if "wl" in kw and "ecp" in kw else "timeout")
    return MetricRecord(**kw)


def test_single_wl_normalization(ibex):
    v = normalized_loss(rec(wl=99537, ecp=1300), Objective.single("WL", ibex))
    assert v.value == pytest.approx(0.8634, abs=1e-4)
    assert not v.surrogate_used


def test_single_ecp_normalization(ibex):
    v = normalized_loss(rec(wl=99537, ecp=1181), Objective.single("ECP", ibex))
    assert v.value == pytest.approx(0.8677, abs=1e-4)


def test_co_optimize_at_baseline_is_two(ibex):
    assert normalized_loss(ibex.as_record(), Objective.co_optimize(ibex)).value == 2.0
    assert co_opt_average(ibex.as_record(), ibex).value == 1.0


def test_surrogate_at_own_baseline(ibex):
    v = normalized_loss(rec(cts_wl=93005), Objective.single("WL", ibex))
    assert v.value == 1.0 and v.surrogate_used


def test_weighted_sum(ibex):
    obj = Objective.weighted_sum([("WL", 0.5), ("ECP", 0.5)], ibex)
    v = normalized_loss(rec(wl=99537, ecp=1181), obj)
    assert v.value == pytest.approx(0.5 * 99537 / 115285 + 0.5 * 1181 / 1361, abs=1e-12)
    assert v.value == pytest.approx(0.8655, abs=1e-4)


def test_missing_terms_and_source_forcing(ibex):
    obj = Objective.co_optimize(ibex)
    assert normalized_loss(rec(area=10.0), obj).missing
    r = rec(wl=115285, ecp=1361, cts_wl=93005 * 0.9, cts_ecp=1308)
    assert normalized_loss(r, obj, source="surrogate").value == pytest.approx(1.9)
    assert normalized_loss(rec(cts_wl=93005, cts_ecp=1308), obj, source="routed").missing


def test_table6_ecp_violation(ibex):
    r = rec(wl=100000, ecp=1361 * 1.0251)
    report = check_constraints(r, ibex, [("ECP", 2.0)])
    assert report.violations == ["ecp"]


def test_constraints_at_baseline_pass(ibex):
    for leeway in (0.0, 2.0, 4.0):
        cons = [(m, leeway) for m in ("area", "count", "power", "pdp")]
        assert check_constraints(ibex.as_record(), ibex, cons).verified_ok


def test_constraint_boundary(ibex):
    ok = rec(wl=1.0, ecp=1.0, power=0.057 * 1.039999)
    bad = rec(wl=1.0, ecp=1.0, power=0.057 * 1.040001)
    assert check_constraints(ok, ibex, [("power", 4.0)]).ok
    assert check_constraints(bad, ibex, [("power", 4.0)]).violations == ["power"]


def test_unverifiable_constraint(ibex):
    r = check_constraints(rec(cts_wl=1.0), ibex, [("power", 2.0)])
    assert r.ok and not r.verified_ok and r.unverifiable == ["power"]


def test_constrained_objective_penalty(ibex):
    obj = Objective.constrained(Objective.single("wl", ibex), [("area", 2.0)])
    good = normalized_loss(rec(wl=115285, ecp=1361, area=2729), obj)
    bad = normalized_loss(rec(wl=115285, ecp=1361, area=2729 * 1.05), obj)
    assert good.value == 1.0 and not good.violations
    assert bad.value == pytest.approx(1.0 + obj.penalty) and bad.violations == ("area",)


def test_geometric_means():
    assert geometric_mean(SONNET_CO_OPT) == pytest.approx(0.855, abs=1e-3)
    assert geometric_mean(KIMI_CO_OPT) == pytest.approx(0.854, abs=1e-3)
    assert geometric_mean([0.7]) == 0.7
    assert geometric_mean([2, 8]) == pytest.approx(4.0, abs=1e-15)
    with pytest.raises(DomainError):
        geometric_mean([])
    with pytest.raises(DomainError):
        geometric_mean([1.0, 0.0])


def test_derive_pdp():
    assert derive_pdp(rec(wl=1.0, ecp=1361, power=0.057)).pdp == pytest.approx(77.577)
    assert round(derive_pdp(rec(wl=1.0, ecp=1361, power=0.057)).pdp, 2) == 77.58
    assert derive_pdp(rec(wl=1.0, ecp=1361)).pdp is None
    assert derive_pdp(rec(wl=1.0, ecp=460, power=0.149)).pdp == pytest.approx(68.54)


def test_check_pdp_mismatch_fails_record():
    assert check_pdp(rec(wl=1.0, ecp=10.0, power=2.0, pdp=25.0)).status == "failed"
    assert check_pdp(rec(wl=1.0, ecp=10.0, power=2.0)).pdp == 20.0


def test_baseline_table_values():
    b = get_baseline("asap7", "ibex")
    assert (b.wl_alpha, b.ecp_alpha, b.cts_wl_alpha, b.power_alpha, b.pdp_alpha) == (115285, 1361, 93005, 0.057, 77.58)
    assert get_baseline("ASAP7", "AES").pdp_alpha == 68.54
    with pytest.raises(ConfigurationError):
        get_baseline("ASAP7", "RISCV")


def test_baseline_dump_load_round_trip():
    assert load_baselines(dump_baselines(DEFAULT_BASELINES)) == DEFAULT_BASELINES
    with pytest.raises(ConfigurationError):
        load_baselines(json.dumps({"X": {"Y": {"wl_alpha": 1}}}))


def test_metric_record_validation():
    with pytest.raises(DomainError):
        MetricRecord(wl=-1.0, ecp=1.0)
    with pytest.raises(DomainError):
        MetricRecord(wl=1.0)
    with pytest.raises(ConfigurationError):
        Objective.single("slack", get_baseline("ASAP7", "IBEX"))


_pos = st.floats(1e-3, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=150, deadline=None)
@given(wl=_pos, ecp=_pos, a=_pos, b=_pos, k=st.floats(1e-3, 1e3))
def test_property_scale_consistency(wl, ecp, a, b, k):
    base = Baseline("C", "P", a, b, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    scaled = Baseline("C", "P", a * k, b * k, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    v1 = normalized_loss(rec(wl=wl, ecp=ecp), Objective.co_optimize(base)).value
    v2 = normalized_loss(rec(wl=wl * k, ecp=ecp * k), Objective.co_optimize(scaled)).value
    assert math.isclose(v1, v2, rel_tol=1e-12)


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=20), n_missing=st.integers(1, 5))
def test_property_missing_ranks_last(vals, n_missing):
    items = [ObjectiveValue(v) for v in vals] + [MISSING] * n_missing
    ranked = sorted(items, key=lambda o: o.rank_key())
    assert all(o.missing for o in ranked[len(vals):])
    assert not any(o.missing for o in ranked[:len(vals)])


@settings(max_examples=150, deadline=None)
@given(change=st.floats(-20, 20), l1=st.floats(0, 10), extra=st.floats(0, 10))
def test_property_constraint_monotone(change, l1, extra):
    b = get_baseline("ASAP7", "IBEX")
    r = rec(wl=1.0, ecp=1.0, area=b.area_alpha * (1 + change / 100))
    if check_constraints(r, b, [("area", l1)]).ok:
        assert check_constraints(r, b, [("area", l1 + extra)]).ok


@settings(max_examples=150, deadline=None)
@given(vals=st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=30))
def test_property_geometric_mean_bounds(vals):
    g = geometric_mean(vals)
    assert min(vals) * (1 - 1e-12) <= g <= max(vals) * (1 + 1e-12)
