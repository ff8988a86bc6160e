import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camtopo.core import GaussianModel, PipelineConfig, TransitionDistribution, ValidationError
from camtopo.evaluation import (
    EvalReport,
    LinkRow,
    bhattacharyya,
    bhattacharyya_coefficient,
    benchmark_matching,
    cmc,
    discretize,
    exhaustive_match,
    forest_match,
    gaussian_bhattacharyya,
    link_detection,
    numeric_gaussian_bhattacharyya,
    rank1,
    read_link_table,
    transition_time_error,
    write_report,
)
from camtopo.evaluation import _bench_data
from camtopo.topology import distribution_from_samples


def test_rank1_examples():
    truth = [(("a", i), ("b", i)) for i in range(10)]
    half = [(("a", i), ("b", i if i < 5 else i + 100)) for i in range(10)]
    assert rank1(half, truth) == 0.5
    assert rank1(truth, truth) == 1.0
    assert rank1(truth[:3], truth) == 0.3
    with pytest.raises(ValidationError):
        rank1([], [])


def test_cmc():
    rankings = [["x", "y", "z"], ["y", "x", "z"], ["z", "y", "x"]]
    curve = cmc(rankings, ["x", "x", "x"], max_rank=3)
    np.testing.assert_allclose(curve, [1 / 3, 2 / 3, 1.0])
    assert np.all(np.diff(curve) >= 0)


def test_transition_time_error():
    assert transition_time_error({"l": 34.4}, {"l": 34.7}) == pytest.approx(0.3)
    assert transition_time_error({"l": 30.0}, {"l": 30.0}) == 0.0
    assert transition_time_error({"a": 10.3, "b": 20.5}, {"a": 10.0, "b": 20.0}) == pytest.approx(0.4)


def test_bhattacharyya_examples():
    p = distribution_from_samples([1.0, 2.0, 2.0, 3.0])
    assert bhattacharyya(p, p) == pytest.approx(0.0, abs=1e-12)
    far = distribution_from_samples([10.0])
    assert bhattacharyya(p, far) == math.inf
    a = gaussian_bhattacharyya(GaussianModel(34.4, 6.25), GaussianModel(34.7, 6.04))
    assert a == pytest.approx(5.9e-4, rel=0.05)
    assert gaussian_bhattacharyya(GaussianModel(0, 1), GaussianModel(10, 1)) == pytest.approx(12.5)


@given(st.lists(st.integers(0, 30), min_size=1, max_size=30), st.lists(st.integers(0, 30), min_size=1, max_size=30))
def test_bhattacharyya_symmetric_and_bounded(x, y):
    p, q = distribution_from_samples(x), distribution_from_samples(y)
    bc = bhattacharyya_coefficient(p, q)
    assert 0.0 <= bc <= 1.0 + 1e-12
    assert bc == pytest.approx(bhattacharyya_coefficient(q, p))
    assert bhattacharyya(p, q) >= -1e-12


def test_numeric_matches_closed_form_on_grid():
    mus = [0.0, 3.0, 20.0, -7.5]
    sigmas = [(1.0, 1.0), (2.0, 5.0), (6.25, 6.04), (0.5, 3.0), (10.0, 8.0)]
    for (m, (s1, s2)) in itertools.product(mus, sigmas):
        a, b = GaussianModel(30.0, s1), GaussianModel(30.0 + m, s2)
        assert abs(numeric_gaussian_bhattacharyya(a, b) - gaussian_bhattacharyya(a, b)) <= 1e-6


def test_discretize_normalized():
    d = discretize(GaussianModel(30, 5), 1.0, (0, 100))
    assert abs(d.bins.sum() - 1.0) <= 1e-9
    assert d.mean == pytest.approx(30.0, abs=1e-3)


def test_link_detection():
    det = link_detection(["a", "b", "x"], ["a", "b", "c"])
    assert det.recovered == 2 and det.spurious == ["x"] and det.missing == ["c"]
    assert det.precision == pytest.approx(2 / 3) and det.recall == pytest.approx(2 / 3)


def test_report_round_trip(tmp_path):
    row = LinkRow("cam0:1->cam1:0", 30.1, 30.0, 5.0, 5.1, 0.001, 0.8, 40)
    report = EvalReport(0.8, [0.8, 0.9], 0.1, 0.001, [row], {"recovered": 1})
    write_report(report, tmp_path / "r.json", tmp_path / "links.csv")
    rows = read_link_table(tmp_path / "links.csv")
    assert rows[0]["link"] == "cam0:1->cam1:0"
    assert float(rows[0]["mu"]) == 30.1


def test_forest_and_exhaustive_agree_on_separable_data():
    rng = np.random.default_rng(0)
    g, p, y = _bench_data(60, 5, 32, rng, noise=0.05)
    ex = exhaustive_match(g, y, p, y)
    fo = forest_match(g, y, p, y, PipelineConfig())
    assert np.mean(ex == np.unique(y)) == 1.0
    assert np.mean(np.asarray(ex) == np.asarray(fo)) >= 0.95


def test_benchmark_rows():
    rows = benchmark_matching([1, 2], K=1, repeats=1, dim=8)
    assert {r["path"] for r in rows} == {"forest", "exhaustive"}
    assert all(r["median_s"] >= 0 for r in rows)
