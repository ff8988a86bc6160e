"""Random-forest person classifier, multi-shot matching and windowed series."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_probe
from .core import EmptyGallery, Gallery, PipelineConfig, Tracklet, ValidationError
from .ingest import select_key_appearances


# --------------------------------------------------------------------------
# decision tree


def _occurrence_rank(labels: np.ndarray) -> np.ndarray:
    """For each column, how many earlier rows carry the same label."""
    n, F = labels.shape
    flat = (labels + (labels.max() + 1) * np.arange(F)[None, :]).T.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_keys = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    group_start = np.repeat(starts, np.diff(np.r_[starts, flat.size]))
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size) - group_start
    return rank.reshape(F, n).T


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    return x * np.log(np.where(x > 0, x, 1.0))


def _best_split(Xn: np.ndarray, y: np.ndarray, n_classes: int, criterion: str = "entropy",
                xlogx=None):
    """Impurity-optimal threshold over the columns of ``Xn``.

    Returns (column, threshold, gain) or None. Class counts on either side
    of every cut are never materialized: the occurrence rank of each sorted
    label is enough to update sum(c^2) (gini) or sum(c log c) (entropy).
    ``xlogx`` is an optional lookup table of x*log(x) for integer x.
    """
    n = Xn.shape[0]
    order = np.argsort(Xn, axis=0, kind="stable")
    vals = np.take_along_axis(Xn, order, axis=0)
    distinct = vals[1:] > vals[:-1]
    if not distinct.any():
        return None
    labs = y[order]
    occ = _occurrence_rank(labs)
    totals = np.bincount(y, minlength=n_classes)
    rem = totals[labs] - occ
    n_left = np.arange(1, n, dtype=float)[:, None]
    n_right = n - n_left
    if criterion == "gini":
        left = np.cumsum(2 * occ + 1, axis=0)[:-1]
        right = float((totals.astype(np.int64) ** 2).sum()) - np.cumsum(2 * rem - 1, axis=0)[:-1]
        # n * weighted gini = n - sum_L^2/n_L - sum_R^2/n_R
        cost = -(left / n_left + right / n_right)
        parent = -float((totals.astype(np.int64) ** 2).sum()) / n
    elif criterion == "entropy":
        tbl = xlogx if xlogx is not None and xlogx.size > n else _xlogx(np.arange(n + 1))
        step = np.diff(tbl)
        left = np.cumsum(step[occ], axis=0)[:-1]
        right = tbl[totals].sum() - np.cumsum(step[rem - 1], axis=0)[:-1]
        # n * weighted entropy = n_L log n_L - sum_L c log c + (same for R)
        cost = tbl[1:n, None] - left + tbl[n - 1:0:-1, None] - right
        parent = float(tbl[n] - tbl[totals].sum())
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    cost = np.where(distinct, cost, np.inf)
    flat = int(np.argmin(cost))
    k, col = divmod(flat, Xn.shape[1])
    gain = parent - float(cost[k, col])
    if gain <= 1e-9:
        return None
    threshold = 0.5 * (vals[k, col] + vals[k + 1, col])
    if not threshold < vals[k + 1, col]:
        threshold = vals[k, col]
    return col, float(threshold), gain


class DecisionTree:
    """Binary tree with axis-aligned splits and sparse leaf label distributions.

    Nodes are kept in flat arrays; leaf ``i`` owns
    ``leaf_labels[leaf_ptr[i]:leaf_ptr[i+1]]`` (class codes) with matching
    ``leaf_probs``.
    """

    def __init__(self, max_depth=12, min_samples_split=3, max_features=None, criterion="entropy"):
        self.criterion = criterion
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features

    def fit(self, X, y, n_classes, rng):
        n, d = X.shape
        F = self.max_features or max(1, int(np.sqrt(d)))
        F = min(F, d)
        feature, threshold, left, right = [], [], [], []
        leaf_labels, leaf_probs = [], []
        depth = []

        def new_node(dep):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            depth.append(dep)
            return len(feature) - 1

        def make_leaf(idx):
            labs, counts = np.unique(y[idx], return_counts=True)
            leaf_labels.append(labs)
            leaf_probs.append(counts / counts.sum())
            return labs.size

        tbl = _xlogx(np.arange(n + 1))
        root = new_node(0)
        stack = [(root, np.arange(n))]
        sizes = {}
        while stack:
            node, idx = stack.pop()
            dep = depth[node]
            split = None
            if dep < self.max_depth and idx.size >= self.min_samples_split:
                yi = y[idx]
                if yi.min() != yi.max():
                    cols = rng.choice(d, size=F, replace=False)
                    split = _best_split(X[np.ix_(idx, cols)], yi, n_classes, self.criterion, tbl)
                    if split is not None:
                        split = (int(cols[split[0]]), split[1])
            if split is None:
                sizes[node] = idx
                continue
            f, thr = split
            mask = X[idx, f] <= thr
            feature[node] = f
            threshold[node] = thr
            lnode = new_node(dep + 1)
            rnode = new_node(dep + 1)
            left[node], right[node] = lnode, rnode
            stack.append((rnode, idx[~mask]))
            stack.append((lnode, idx[mask]))

        # leaves laid out in node order so leaf_ptr indexes by node id
        counts = np.zeros(len(feature), dtype=np.int64)
        for node in range(len(feature)):
            if node in sizes:
                counts[node] = make_leaf(sizes[node])
            else:
                leaf_labels.append(np.empty(0, dtype=np.int64))
                leaf_probs.append(np.empty(0))
        self.feature_ = np.asarray(feature, dtype=np.int64)
        self.threshold_ = np.asarray(threshold, dtype=float)
        self.left_ = np.asarray(left, dtype=np.int64)
        self.right_ = np.asarray(right, dtype=np.int64)
        self.leaf_ptr_ = np.r_[0, np.cumsum(counts)]
        self.leaf_labels_ = np.concatenate(leaf_labels).astype(np.int64)
        self.leaf_probs_ = np.concatenate(leaf_probs)
        self.depth_ = int(max(depth))
        self.n_classes_ = n_classes
        return self

    @property
    def node_count(self) -> int:
        return int(self.feature_.size)

    def apply(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth_ + 1):
            f = self.feature_[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold_[node]
            node = np.where(internal, np.where(go_left, self.left_[node], self.right_[node]), node)
        return node

    def leaf_entries(self, leaves: np.ndarray):
        """Flattened (row, class code, prob) triples for the given leaves."""
        start = self.leaf_ptr_[leaves]
        length = self.leaf_ptr_[leaves + 1] - start
        rows = np.repeat(np.arange(leaves.size), length)
        pos = np.arange(length.sum()) - np.repeat(np.cumsum(length) - length, length)
        flat = np.repeat(start, length) + pos
        return rows, self.leaf_labels_[flat], self.leaf_probs_[flat]

    def predict_proba(self, X) -> np.ndarray:
        leaves = self.apply(X)
        rows, labs, probs = self.leaf_entries(leaves)
        out = np.zeros((X.shape[0], self.n_classes_))
        np.add.at(out, (rows, labs), probs)
        return out


# --------------------------------------------------------------------------
# forest


class RandomForestReID(ClassifierMixin, BaseEstimator):
    """Bagged Gini trees over appearance vectors, labels = person ids.

    Parameters
    ----------
    n_estimators : int
        Number of trees.
    max_depth, min_samples_split : int
        Growth limits for each tree.
    max_features : int or None
        Candidate features per node; ``None`` means ``sqrt(d)``.
    criterion : {"entropy", "gini"}
        Split impurity. Gini splits peel one class at a time when there are
        hundreds of labels, which exhausts ``max_depth`` long before the
        classes are separated.
    random_state : int
        Seed for bootstraps and feature sampling.
    """

    def __init__(self, n_estimators=10, max_depth=12, min_samples_split=3,
                 max_features=None, criterion="entropy", random_state=0):
        self.n_estimators = n_estimators
        self.criterion = criterion
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y).reshape(-1)
        if X.shape[0] == 0:
            raise EmptyGallery("cannot train a forest on an empty gallery")
        if y.size != X.shape[0]:
            raise ValidationError("X and y disagree in length")
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        seeds = rng.integers(0, 2**63 - 1, size=self.n_estimators)
        self.estimators_ = []
        n = X.shape[0]
        for seed in seeds:
            tree_rng = np.random.default_rng(int(seed))
            if self.classes_.size == 1:
                boot = np.arange(n)
            else:
                boot = tree_rng.integers(0, n, size=n)
            tree = DecisionTree(self.max_depth, self.min_samples_split, self.max_features, self.criterion)
            tree.fit(X[boot], codes[boot], self.classes_.size, tree_rng)
            self.estimators_.append(tree)
        return self

    def _check(self, X):
        check_is_fitted(self, "estimators_")
        return check_features(X, dim=self.n_features_in_)

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.zeros((X.shape[0], self.classes_.size))
        for tree in self.estimators_:
            out += tree.predict_proba(X)
        return out / len(self.estimators_)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predict_single(self, v) -> np.ndarray:
        return self.predict_proba(np.atleast_2d(v))[0]

    def predict_multishot(self, probe) -> Tuple[object, np.ndarray]:
        """Average the per-appearance posteriors of one probe person.

        Returns the arg-max label (ties go to the smallest label) and the
        posterior over ``classes_``.
        """
        P = check_probe(probe, dim=getattr(self, "n_features_in_", None))
        X = self._check(P)
        acc = np.zeros(self.classes_.size)
        for tree in self.estimators_:
            _, labs, probs = tree.leaf_entries(tree.apply(X))
            acc += np.bincount(labs, weights=probs, minlength=self.classes_.size)
        posterior = acc / (len(self.estimators_) * X.shape[0])
        return self.classes_[int(np.argmax(posterior))], posterior


def train_forest(gallery: Gallery, cfg: PipelineConfig, seed=0) -> RandomForestReID:
    if len(gallery) == 0:
        raise EmptyGallery("cannot train a forest on an empty gallery")
    forest = RandomForestReID(
        n_estimators=cfg.tree_count,
        max_depth=cfg.max_depth,
        min_samples_split=cfg.min_samples_split,
        random_state=seed,
    )
    return forest.fit(gallery.features, gallery.labels)


def predict_single(forest: RandomForestReID, v) -> np.ndarray:
    return forest.predict_single(v)


def predict_multishot(forest: RandomForestReID, probe):
    return forest.predict_multishot(probe)


# --------------------------------------------------------------------------
# similarity


def min_distance(a, b) -> float:
    a = check_probe(a)
    b = check_probe(b, dim=a.shape[1])
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    i, j = np.unravel_index(int(np.argmin(sq)), sq.shape)
    # recompute the winning pair directly so identical vectors give exactly 0
    return float(np.linalg.norm(a[i] - b[j]))


def similarity(a, b) -> float:
    """exp(-min pairwise L2 distance) between two appearance sets."""
    return float(np.exp(-min_distance(a, b)))


# --------------------------------------------------------------------------
# windowed series


@dataclass
class MatchResult:
    probe: Tuple[str, int]
    matched: Tuple[str, int]
    posterior: float
    similarity: float
    delta_t: float
    window_center: float
    path: str = "forest"
    label: int = -1


@dataclass
class Window:
    start: float
    end: float
    center: float
    index: int
    rows: np.ndarray
    seed: int
    _forest: Optional[RandomForestReID] = field(default=None, repr=False)

    def overlaps(self, lo: float, hi: float) -> bool:
        return self.start <= hi and lo <= self.end


class WindowedForestSeries:
    """Forests over overlapping time slots of a set of tracklets.

    Forests are trained lazily on first use; the result is the same as
    training all of them up front because every window has its own seed.
    """

    def __init__(self, tracklets: Sequence[Tracklet], window: float, stride: float,
                 cfg: PipelineConfig, seed=0, span=None):
        if not window > 0:
            raise ValidationError("window length must be positive")
        if not 0 < stride < window:
            raise ValidationError("stride must lie in (0, window)")
        self.tracklets = list(tracklets)
        self.window = float(window)
        self.stride = float(stride)
        self.cfg = cfg
        self.seed = seed
        feats, labels, times, owners = [], [], [], []
        self._keys = []
        for idx, t in enumerate(self.tracklets):
            kt = select_key_appearances(t, cfg.max_key_appearances)
            feats.append(kt.features)
            times.append(kt.timestamps)
            labels.append(np.full(kt.n_observations, idx))
            self._keys.append(kt.features)
        if feats:
            self.features = np.vstack(feats)
            self.labels = np.concatenate(labels)
            self.times = np.concatenate(times)
        else:
            self.features = np.empty((0, 0))
            self.labels = np.empty(0, dtype=np.int64)
            self.times = np.empty(0)
        if span is None:
            span = ((min(t.entry_time for t in self.tracklets), max(t.exit_time for t in self.tracklets))
                    if self.tracklets else (0.0, 0.0))
        self.span = span
        self.windows: List[Window] = []
        if self.times.size:
            # a tracklet belongs to every slot its lifetime overlaps, with all
            # of its key appearances
            entry = np.array([t.entry_time for t in self.tracklets])
            exit_ = np.array([t.exit_time for t in self.tracklets])
            sizes = np.array([k.shape[0] for k in self._keys])
            ptr = np.concatenate([[0], np.cumsum(sizes)])
            start, end = span
            k = 0
            while True:
                lo, hi = start + k * self.stride, start + k * self.stride + self.window
                slot_hi = min(hi, end)
                members = np.flatnonzero((entry <= slot_hi) & (exit_ >= lo))
                rows = (np.concatenate([np.arange(ptr[i], ptr[i + 1]) for i in members])
                        if members.size else np.empty(0, dtype=np.int64))
                self.windows.append(Window(lo, slot_hi, lo + self.window / 2, k, rows, _window_seed(seed, k)))
                if hi >= end:
                    break
                k += 1

    @property
    def empty(self) -> bool:
        return not any(w.rows.size for w in self.windows)

    @property
    def centers(self) -> np.ndarray:
        return np.array([w.center for w in self.windows])

    def key_features(self, idx: int) -> np.ndarray:
        return self._keys[idx]

    def forest(self, w: Window) -> Optional[RandomForestReID]:
        if w.rows.size == 0:
            return None
        if w._forest is None:
            gallery_labels = self.labels[w.rows]
            w._forest = RandomForestReID(
                n_estimators=self.cfg.tree_count,
                max_depth=self.cfg.max_depth,
                min_samples_split=self.cfg.min_samples_split,
                random_state=w.seed,
            ).fit(self.features[w.rows], gallery_labels)
        return w._forest

    def match_in_window(self, w: Window, probe: Tracklet, probe_keys: np.ndarray,
                        delta_fn: Callable[[Tracklet, Tracklet], float]) -> Optional[MatchResult]:
        forest = self.forest(w)
        if forest is None:
            return None
        label, posterior = forest.predict_multishot(probe_keys)
        label = int(label)
        gallery_t = self.tracklets[label]
        s = similarity(self._keys[label], probe_keys)
        return MatchResult(
            probe=probe.key,
            matched=gallery_t.key,
            posterior=float(posterior.max()),
            similarity=s,
            delta_t=float(delta_fn(probe, gallery_t)),
            window_center=w.center,
            label=label,
        )


def _window_seed(seed, k):
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, k]).generate_state(1)[0])


def forward_delta(probe: Tracklet, gallery: Tracklet) -> float:
    """Gap from the probe's exit to the gallery tracklet's entry."""
    return gallery.entry_time - probe.exit_time


def build_series(tracklets: Sequence[Tracklet], window: float, stride: Optional[float] = None,
                 cfg: Optional[PipelineConfig] = None, seed=0, span=None) -> WindowedForestSeries:
    cfg = cfg or PipelineConfig()
    if stride is None:
        stride = window * cfg.window_stride_fraction
    return WindowedForestSeries(tracklets, window, stride, cfg, seed=seed, span=span)


def query_series(series: WindowedForestSeries, probe: Tracklet, search: Tuple[float, float],
                 delta_fn=forward_delta, probe_keys=None, delta_range=None) -> Optional[MatchResult]:
    """Best match over every window overlapping ``search`` (max similarity).

    With ``delta_range`` set, matches whose time gap falls outside it are
    ignored.
    """
    lo, hi = search
    if not hi > lo:
        raise ValidationError("search interval must be non-degenerate")
    if probe_keys is None:
        probe_keys = select_key_appearances(probe, series.cfg.max_key_appearances).features
    best = None
    for w in series.windows:
        if not w.overlaps(lo, hi):
            continue
        m = series.match_in_window(w, probe, probe_keys, delta_fn)
        if m is not None and delta_range is not None and not delta_range[0] <= m.delta_t <= delta_range[1]:
            continue
        if m is not None and (best is None or m.similarity > best.similarity):
            best = m
    return best


def query_nearest(series: WindowedForestSeries, probe: Tracklet, target_time: float,
                  delta_fn=forward_delta, probe_keys=None) -> Optional[MatchResult]:
    """Match with the single non-empty window whose center is nearest ``target_time``."""
    if probe_keys is None:
        probe_keys = select_key_appearances(probe, series.cfg.max_key_appearances).features
    candidates = [w for w in series.windows if w.rows.size]
    if not candidates:
        return None
    w = min(candidates, key=lambda w: (abs(w.center - target_time), w.index))
    return series.match_in_window(w, probe, probe_keys, delta_fn)
