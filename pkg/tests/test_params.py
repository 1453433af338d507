import numpy as np
import pytest

from cfkit.params import ParameterSet, load_parameters, save_parameters
from cfkit.types import ShapeMismatchError


def make_params():
    rng = np.random.default_rng(0)
    return ParameterSet(
        {
            "backbone.proj": rng.normal(size=(4, 6)),
            "head.weight": rng.normal(size=(3, 4)),
            "head.bias": rng.normal(size=3),
        },
        frozenset({"head.weight", "head.bias"}),
    )


def test_head_must_be_subset_of_groups():
    with pytest.raises(ShapeMismatchError):
        ParameterSet({"a": np.zeros(2)}, frozenset({"missing"}))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        ParameterSet({"a": np.array([1.0, np.nan])})


def test_body_group_names():
    assert make_params().body_group_names() == ["backbone.proj"]


def test_copy_is_independent():
    params = make_params()
    clone = params.copy()
    clone.groups["head.bias"][0] += 1.0
    assert params.groups["head.bias"][0] != clone.groups["head.bias"][0]


def test_same_structure():
    a, b = make_params(), make_params()
    assert a.same_structure(b)
    c = ParameterSet({"head.weight": np.zeros((3, 4))})
    assert not a.same_structure(c)


def test_save_load_round_trip(tmp_path):
    params = make_params()
    save_parameters(params, tmp_path / "params")
    loaded = load_parameters(tmp_path / "params")
    assert set(loaded.groups) == set(params.groups)
    assert loaded.head_groups == params.head_groups
    for name in params.groups:
        assert np.array_equal(loaded.groups[name], params.groups[name])
