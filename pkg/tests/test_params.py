import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtune.errors import ConfigurationError, DomainError
from flowtune.params import (
    BINARY,
    CONTINUOUS,
    INTEGER,
    ParamSpace,
    ParamSpec,
    ParamVector,
    build_preset_space,
    grid_decode,
    grid_encode,
    sample_uniform,
)


def test_four_param_preset(four):
    assert [s.name for s in four.specs] == ["clock_period", "core_utilization", "tns_end_percent",
                                            "density_margin_addon"]
    clk, util, tns, dens = four.specs
    assert clk.kind == CONTINUOUS and clk.min > 0
    assert (util.kind, util.min, util.max) == (INTEGER, 20, 99)
    assert (tns.kind, tns.min, tns.max) == (INTEGER, 0, 100)
    assert (dens.kind, dens.min, dens.max) == (CONTINUOUS, 0.0, 0.99)


def test_twelve_param_preset():
    sp = build_preset_space("twelve_param", 1361)
    assert sp.dim == 12
    cts = sp.spec("cts_cluster_size")
    assert (cts.kind, cts.min, cts.max) == (INTEGER, 10, 40)


def test_custom_preset_rejected():
    with pytest.raises(ConfigurationError):
        build_preset_space("custom")


def test_presets_structurally_equal_and_frozen():
    a, b = build_preset_space("twelve_param", 1361), build_preset_space("twelve_param", 1361)
    assert a == b
    with pytest.raises(Exception):
        a.specs[0].min = 3


def test_grid_encode_examples(four):
    dens = four.spec("density_margin_addon")
    assert grid_encode(dens, 0.25) == 25
    assert grid_encode(four.spec("core_utilization"), 20) == 20
    s = ParamSpec("adj", CONTINUOUS, 0.2, 0.7, 100)
    assert grid_encode(s, 0.437) == 44
    assert grid_decode(s, 44) == 0.44
    assert grid_decode(dens, 25) == 0.25
    assert grid_decode(ParamSpec("b", BINARY, 0, 1), 1) == 1


def test_grid_round_trip_sweep():
    s = ParamSpec("adj", CONTINUOUS, 0.2, 0.7, 100)
    for x in np.arange(0.2, 0.7 + 1e-12, 0.001):
        x = min(float(x), 0.7)
        assert abs(grid_decode(s, grid_encode(s, x)) - x) <= 0.5 / 100 + 1e-12


def test_twelve_param_round_trip_uniform():
    rng = np.random.default_rng(0)
    for s in build_preset_space("twelve_param", 1361).specs:
        for x in rng.uniform(s.min, s.max, 1000):
            if s.kind == CONTINUOUS:
                assert abs(grid_decode(s, grid_encode(s, x)) - x) <= 1 / (2 * s.grid_scale) + 1e-12
            else:
                v = int(round(x))
                assert grid_decode(s, grid_encode(s, v)) == v


def test_grid_domain_errors(four):
    with pytest.raises(DomainError):
        grid_encode(four.spec("core_utilization"), 100)
    with pytest.raises(DomainError):
        grid_decode(four.spec("density_margin_addon"), 100)


def test_sample_uniform_single_and_deterministic(four):
    (v,) = sample_uniform(four, 1, 99)
    four.validate(v)
    assert sample_uniform(four, 50, 3) == sample_uniform(four, 50, 3)


def test_sample_uniform_means(four):
    pts = sample_uniform(four, 10000, 11)
    for s in four.specs:
        vals = np.array([p[s.name] for p in pts], dtype=float)
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - (s.min + s.max) / 2) < 3 * se


def test_param_vector_immutable_and_hashable():
    v = ParamVector({"a": 1, "b": 2.0})
    with pytest.raises(AttributeError):
        v.a = 3
    assert hash(v) == hash(ParamVector([("a", 1), ("b", 2.0)]))


def test_coerce_and_validate(four):
    v = four.coerce({"clock_period": 1000.0, "core_utilization": 40.0, "tns_end_percent": 10,
                     "density_margin_addon": 0.3})
    assert isinstance(v["core_utilization"], int)
    with pytest.raises(DomainError):
        four.coerce({"clock_period": 1000.0, "core_utilization": 40.5, "tns_end_percent": 10,
                     "density_margin_addon": 0.3})
    with pytest.raises(DomainError):
        four.validate({"clock_period": 1000.0})


def test_space_json_round_trip(four):
    assert ParamSpace.from_json(four.to_json(), "four_param") == four
    with pytest.raises(ConfigurationError):
        ParamSpace.from_json("[{\"name\": \"x\"}]")


def test_spec_rejects_bad_domains():
    with pytest.raises(ConfigurationError):
        ParamSpec("x", INTEGER, 5, 1)
    with pytest.raises(ConfigurationError):
        ParamSpec("b", BINARY, 0, 2)
    with pytest.raises(ConfigurationError):
        ParamSpec("c", CONTINUOUS, 0.0, 0.01, 100)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 40))
def test_property_samples_and_unit_maps_validate(seed, n):
    sp = build_preset_space("twelve_param", 1361)
    for v in sample_uniform(sp, n, seed):
        sp.validate(v)
        u = sp.to_unit(v)
        assert np.all((u >= 0) & (u <= 1))
        sp.validate(sp.from_unit(u))


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0.0, 0.99, allow_nan=False))
def test_property_continuous_round_trip(x):
    s = ParamSpec("density_margin_addon", CONTINUOUS, 0.0, 0.99, 100)
    assert abs(grid_decode(s, grid_encode(s, x)) - x) <= 1 / 200 + 1e-12


@settings(max_examples=100, deadline=None)
@given(v=st.integers(20, 99))
def test_property_integer_round_trip_exact(v):
    s = ParamSpec("core_utilization", INTEGER, 20, 99)
    assert grid_decode(s, grid_encode(s, v)) == v
