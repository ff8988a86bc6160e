import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camtopo.core import EmptyGallery, FeatureDimMismatch, PipelineConfig, make_tracklet, normalize_rows
from camtopo.forest import (
    DecisionTree,
    RandomForestReID,
    _best_split,
    build_series,
    query_nearest,
    query_series,
    similarity,
)


def _clusters(n_classes=3, per=20, d=6, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, d)) * 3
    y = np.repeat(np.arange(n_classes), per)
    X = centers[y] + rng.normal(scale=spread, size=(y.size, d))
    return X, y, centers


def test_single_label_gallery():
    X = np.random.default_rng(0).normal(size=(5, 4))
    f = RandomForestReID(random_state=0).fit(X, [7] * 5)
    label, post = f.predict_multishot(np.ones((2, 4)))
    assert label == 7 and post.tolist() == [1.0]


def test_orthogonal_labels():
    X = np.eye(4)[:2]
    f = RandomForestReID(random_state=0, max_features=4).fit(np.repeat(X, 3, axis=0), [0, 0, 0, 1, 1, 1])
    assert f.predict(X[:1])[0] == 0
    assert f.predict(X[1:])[0] == 1


def test_determinism():
    X, y, _ = _clusters()
    probes = X + 0.3
    a = RandomForestReID(random_state=5).fit(X, y).predict_proba(probes)
    b = RandomForestReID(random_state=5).fit(X, y).predict_proba(probes)
    assert np.array_equal(a, b)


def test_posterior_is_mean_over_trees():
    X, y, _ = _clusters()
    f = RandomForestReID(n_estimators=4, random_state=1).fit(X, y)
    manual = np.mean([t.predict_proba(X[:3]) for t in f.estimators_], axis=0)
    np.testing.assert_allclose(f.predict_proba(X[:3]), manual)
    np.testing.assert_allclose(f.predict_proba(X).sum(axis=1), 1.0)


def test_two_tree_mean():
    f = RandomForestReID(n_estimators=2).fit(np.array([[0.0], [1.0]]), [0, 1])
    t1, t2 = DecisionTree(), DecisionTree()
    for t, lab in ((t1, 0), (t2, 1)):
        t.fit(np.array([[0.0]]), np.array([lab]), 2, np.random.default_rng(0))
    f.estimators_ = [t1, t2]
    np.testing.assert_allclose(f.predict_proba([[0.5]])[0], [0.5, 0.5])


def test_forest_agrees_with_nearest_neighbour():
    X, y, centers = _clusters(per=15, spread=0.3, seed=3)
    probes = centers[y] + np.random.default_rng(9).normal(scale=0.3, size=X.shape)
    pred = RandomForestReID(random_state=0).fit(X, y).predict(probes)
    nn = y[np.argmin(((probes[:, None] - X[None]) ** 2).sum(-1), axis=1)]
    assert np.mean(pred == nn) >= 0.9


def test_multishot_single_equals_single():
    X, y, _ = _clusters()
    f = RandomForestReID(random_state=0).fit(X, y)
    _, post = f.predict_multishot(X[4])
    np.testing.assert_allclose(post, f.predict_single(X[4]))


def test_multishot_tie_goes_to_first_label():
    f = RandomForestReID(n_estimators=1).fit(np.array([[0.0], [1.0]]), ["a", "b"])
    tree = f.estimators_[0]
    tree.feature_ = np.array([0, -1, -1])
    tree.threshold_ = np.array([0.5, 0.0, 0.0])
    tree.left_ = np.array([1, -1, -1])
    tree.right_ = np.array([2, -1, -1])
    tree.leaf_ptr_ = np.array([0, 0, 2, 4])
    tree.leaf_labels_ = np.array([0, 1, 0, 1])
    tree.leaf_probs_ = np.array([0.8, 0.2, 0.2, 0.8])
    tree.depth_ = 1
    label, post = f.predict_multishot([[0.0], [1.0]])
    np.testing.assert_allclose(post, [0.5, 0.5])
    assert label == "a"


def test_multishot_thirty_appearances():
    X, y, _ = _clusters(per=10)
    f = RandomForestReID(random_state=2).fit(X, y)
    probe = X[:30] + 0.01
    _, post = f.predict_multishot(probe)
    manual = np.mean([f.predict_single(v) for v in probe], axis=0)
    np.testing.assert_allclose(post, manual, atol=1e-12)


def test_forest_errors():
    with pytest.raises(EmptyGallery):
        RandomForestReID().fit(np.empty((0, 3)), [])
    f = RandomForestReID().fit(np.eye(3), [0, 1, 2])
    with pytest.raises(FeatureDimMismatch):
        f.predict_proba(np.ones((1, 4)))


@pytest.mark.parametrize("criterion", ["gini", "entropy"])
def test_best_split_matches_brute_force(criterion):
    rng = np.random.default_rng(4)
    X = rng.integers(0, 5, size=(30, 3)).astype(float)
    y = rng.integers(0, 4, 30)

    def impurity(labels):
        p = np.bincount(labels, minlength=4) / labels.size
        if criterion == "gini":
            return 1.0 - (p ** 2).sum()
        nz = p[p > 0]
        return -(nz * np.log(nz)).sum()

    best = np.inf
    for col in range(3):
        for thr in np.unique(X[:, col])[:-1]:
            m = X[:, col] <= thr
            cost = m.sum() * impurity(y[m]) + (~m).sum() * impurity(y[~m])
            best = min(best, cost)
    col, thr, gain = _best_split(X, y, 4, criterion)
    m = X[:, col] <= thr
    got = m.sum() * impurity(y[m]) + (~m).sum() * impurity(y[~m])
    assert got == pytest.approx(best, abs=1e-9)
    assert gain == pytest.approx(30 * impurity(y) - best, abs=1e-9)


def test_similarity_identical_vector():
    a = np.eye(3)
    assert similarity(a, np.vstack([a[1], [0.5, 0.5, 0.7]])) == 1.0


def test_similarity_value():
    a = np.array([[1.0, 0.0]])
    ang = 2 * np.arcsin(0.357 / 2)
    b = np.array([[np.cos(ang), np.sin(ang)]])
    assert similarity(a, b) == pytest.approx(np.exp(-0.357), abs=1e-12)
    # e^-0.357 = 0.69977, i.e. 0.6999 only to about three decimals
    assert similarity(a, b) == pytest.approx(0.6999, abs=3e-4)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_similarity_superset_never_smaller(seed):
    rng = np.random.default_rng(seed)
    a, b = normalize_rows(rng.normal(size=(3, 5))), normalize_rows(rng.normal(size=(2, 5)))
    extra = normalize_rows(rng.normal(size=(1, 5)))
    s = similarity(a, b)
    assert similarity(np.vstack([a, extra]), b) >= s
    assert similarity(a, np.vstack([b, extra])) >= s


def _tracklets(times, d=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i, t in enumerate(times):
        out.append(make_tracklet("g", i, [t, t + 1], normalize_rows(rng.normal(size=(2, d)))))
    return out


def test_window_centers():
    s = build_series(_tracklets([0.0, 99.0]), 60.0, 30.0, span=(0.0, 100.0))
    assert s.centers.tolist() == [30.0, 60.0, 90.0]
    assert s.windows[-1].end == 100.0


def test_single_tracklet_membership():
    s = build_series(_tracklets([10.0]), 60.0, 30.0, span=(0.0, 100.0))
    members = [w.index for w in s.windows if w.rows.size]
    assert members == [w.index for w in s.windows if w.start <= 10.0 <= w.end]


def test_window_covering_span():
    s = build_series(_tracklets([0.0, 50.0, 80.0]), 200.0, 100.0)
    assert len(s.windows) == 1
    assert s.windows[0].rows.size == 6


def test_query_returns_planted_identity():
    gallery = _tracklets([0.0, 40.0, 80.0, 120.0, 160.0], seed=1)
    s = build_series(gallery, 60.0, 30.0)
    target = gallery[2]
    probe = make_tracklet("p", 0, [50.0, 51.0], target.features)
    m = query_series(s, probe, (0.0, 200.0))
    assert m.similarity == 1.0
    assert m.matched == target.key
    assert m.delta_t == target.entry_time - probe.exit_time
    overlapping = [w for w in s.windows if target.key[1] in set(s.labels[w.rows])]
    assert len(overlapping) >= 2


def test_query_single_window_and_max_rule():
    gallery = _tracklets([0.0, 10.0, 20.0], seed=2)
    s = build_series(gallery, 100.0, 50.0)
    probe = make_tracklet("p", 0, [0.0], gallery[1].features[:1])
    w = s.windows[0]
    direct = s.match_in_window(w, probe, probe.features, lambda p, g: g.entry_time - p.exit_time)
    assert query_series(s, probe, (0.0, 30.0)).matched == direct.matched
    assert query_nearest(s, probe, 5.0).matched == direct.matched


def test_query_delta_range_filter():
    gallery = _tracklets([0.0, 100.0], seed=3)
    s = build_series(gallery, 300.0, 150.0)
    probe = make_tracklet("p", 0, [10.0], gallery[0].features[:1])
    assert query_series(s, probe, (0.0, 200.0)).matched == gallery[0].key
    m = query_series(s, probe, (0.0, 200.0), delta_range=(0.0, 200.0))
    assert m is None or m.matched != gallery[0].key


def test_series_is_deterministic():
    gallery = _tracklets(np.arange(0, 300, 15.0), seed=4)
    probe = make_tracklet("p", 0, [30.0], gallery[5].features[:1] + 0.01)
    a = query_series(build_series(gallery, 60.0, seed=3), probe, (0.0, 300.0))
    b = query_series(build_series(gallery, 60.0, seed=3), probe, (0.0, 300.0))
    assert (a.matched, a.similarity) == (b.matched, b.similarity)
