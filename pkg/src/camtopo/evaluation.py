"""Metrics: rank-1, CMC, transition-time error, Bhattacharyya distance, timing."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import GaussianModel, PipelineConfig, TransitionDistribution, ValidationError


# --------------------------------------------------------------------------
# distributions


def _aligned(p: TransitionDistribution, q: TransitionDistribution):
    if not math.isclose(p.bin_width, q.bin_width, rel_tol=1e-12):
        raise ValidationError("distributions must share a bin width")
    lo = min(p.offset, q.offset)
    hi = max(p.offset + len(p.bins), q.offset + len(q.bins))
    a, b = np.zeros(hi - lo), np.zeros(hi - lo)
    a[p.offset - lo:p.offset - lo + len(p.bins)] = p.bins
    b[q.offset - lo:q.offset - lo + len(q.bins)] = q.bins
    return a, b


def bhattacharyya_coefficient(p: TransitionDistribution, q: TransitionDistribution) -> float:
    a, b = _aligned(p, q)
    return float(np.sqrt(a * b).sum())


def bhattacharyya(p: TransitionDistribution, q: TransitionDistribution) -> float:
    """d_B = -ln sum sqrt(p q) on the common grid; ``inf`` for disjoint supports."""
    bc = bhattacharyya_coefficient(p, q)
    if bc <= 0.0:
        return math.inf
    return max(0.0, -math.log(min(bc, 1.0)))


def gaussian_bhattacharyya(m1: GaussianModel, m2: GaussianModel) -> float:
    """Closed form for two normal densities."""
    v1, v2 = m1.sigma**2, m2.sigma**2
    return (m1.mu - m2.mu) ** 2 / (4.0 * (v1 + v2)) + 0.5 * math.log((v1 + v2) / (2.0 * m1.sigma * m2.sigma))


def discretize(m: GaussianModel, bin_width: float, range: Tuple[float, float]) -> TransitionDistribution:
    """Gaussian density sampled at bin centers and normalized to unit mass."""
    lo = int(math.floor(range[0] / bin_width + 0.5))
    hi = int(math.floor(range[1] / bin_width + 0.5))
    x = np.arange(lo, hi + 1) * bin_width
    p = np.exp(-0.5 * ((x - m.mu) / m.sigma) ** 2)
    total = p.sum()
    if not total > 0:
        raise ValidationError("Gaussian has no mass on the requested range")
    return TransitionDistribution(p / total, float(bin_width), lo, 0, m, 0.0)


def numeric_gaussian_bhattacharyya(m1: GaussianModel, m2: GaussianModel, points_per_sigma=50, span=12.0) -> float:
    """Bhattacharyya distance of two Gaussians by integration on a fine grid."""
    bw = min(m1.sigma, m2.sigma) / points_per_sigma
    lo = min(m1.mu - span * m1.sigma, m2.mu - span * m2.sigma)
    hi = max(m1.mu + span * m1.sigma, m2.mu + span * m2.sigma)
    return bhattacharyya(discretize(m1, bw, (lo, hi)), discretize(m2, bw, (lo, hi)))


def distance_to_model(d: TransitionDistribution, truth: GaussianModel, use_model=True) -> float:
    """Bhattacharyya distance of a learned link to its true Gaussian.

    The fitted model is compared in closed form when present; otherwise the
    histogram is compared with the truth discretized on its grid.
    """
    if use_model and d.model is not None:
        return gaussian_bhattacharyya(d.model, truth)
    lo, hi = d.range
    lo = min(lo, truth.mu - 8 * truth.sigma)
    hi = max(hi, truth.mu + 8 * truth.sigma)
    return bhattacharyya(d, discretize(truth, d.bin_width, (lo, hi)))


# --------------------------------------------------------------------------
# re-identification


def _pair(m) -> Tuple[tuple, tuple]:
    if hasattr(m, "exit") and hasattr(m, "entry"):
        return tuple(m.exit), tuple(m.entry)
    a, b = m
    return tuple(a), tuple(b)


def rank1(matches: Iterable, true_pairs: Iterable) -> float:
    """TP / T_gt: matched (exit, entry) pairs that are true, over all true pairs."""
    truth = {_pair(p) for p in true_pairs}
    if not truth:
        raise ValidationError("rank1 needs at least one true pair (T_gt = 0)")
    found = {_pair(m) for m in matches}
    return len(found & truth) / len(truth)


def cmc(rankings: Sequence[Sequence], truths: Sequence, max_rank: Optional[int] = None) -> np.ndarray:
    """Cumulative match curve; element ``n - 1`` is the rate of hits within rank ``n``.

    ``rankings[i]`` is probe ``i``'s candidate ids, best first, and
    ``truths[i]`` its true id.
    """
    if len(rankings) != len(truths):
        raise ValidationError("rankings and truths differ in length")
    if not rankings:
        raise ValidationError("cmc needs at least one probe")
    if max_rank is None:
        max_rank = max(len(r) for r in rankings)
    hits = np.zeros(max_rank + 1)
    for ranked, true_id in zip(rankings, truths):
        ranked = list(ranked)
        if true_id in ranked:
            pos = ranked.index(true_id)
            if pos < max_rank:
                hits[pos] += 1
    return np.cumsum(hits[:max_rank]) / len(rankings)


# --------------------------------------------------------------------------
# links


def transition_time_error(inferred: Dict[object, float], truth: Dict[object, float]) -> float:
    """Mean |mu - mu_gt| over links present in both mappings."""
    common = [k for k in inferred if k in truth]
    if not common:
        raise ValidationError("no common links between inferred and true topology")
    return float(np.mean([abs(inferred[k] - truth[k]) for k in common]))


@dataclass
class LinkDetection:
    true_links: int
    found: int
    missing: List[object]
    spurious: List[object]

    @property
    def recovered(self) -> int:
        return self.true_links - len(self.missing)

    @property
    def precision(self) -> float:
        return self.recovered / self.found if self.found else 0.0

    @property
    def recall(self) -> float:
        return self.recovered / self.true_links if self.true_links else 0.0


def link_detection(inferred: Iterable, truth: Iterable) -> LinkDetection:
    inferred, truth = list(dict.fromkeys(inferred)), list(dict.fromkeys(truth))
    tset, iset = set(truth), set(inferred)
    return LinkDetection(len(truth), len(inferred), [k for k in truth if k not in iset],
                         [k for k in inferred if k not in tset])


# --------------------------------------------------------------------------
# reports


@dataclass
class LinkRow:
    link: str
    mu: Optional[float]
    mu_gt: float
    sigma: Optional[float]
    sigma_gt: float
    d_B: Optional[float]
    confidence: Optional[float] = None
    samples: int = 0


@dataclass
class EvalReport:
    rank1: Optional[float] = None
    cmc: List[float] = field(default_factory=list)
    transition_time_error: Optional[float] = None
    topology_distance: Optional[float] = None
    links: List[LinkRow] = field(default_factory=list)
    detection: Optional[dict] = None
    stages: Dict[str, float] = field(default_factory=dict)
    timing: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


LINK_COLUMNS = ("link", "mu", "mu_gt", "sigma", "sigma_gt", "d_B", "confidence", "samples")


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    """JSON with every field, plus the per-link table as CSV."""
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, default=_jsonable)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LINK_COLUMNS)
            for row in report.links:
                w.writerow([_cell(getattr(row, c)) for c in LINK_COLUMNS])


def read_link_table(csv_path) -> List[dict]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# --------------------------------------------------------------------------
# complexity benchmark


def _bench_data(n, k, d, rng, noise=0.3):
    latents = rng.normal(size=(n, d))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    def draw():
        X = np.repeat(latents, k, axis=0) + rng.normal(scale=noise / math.sqrt(d), size=(n * k, d))
        return X / np.linalg.norm(X, axis=1, keepdims=True)
    return draw(), draw(), np.repeat(np.arange(n), k)


def exhaustive_match(gallery: np.ndarray, labels: np.ndarray, probes: np.ndarray, probe_labels: np.ndarray,
                     block: int = 2048) -> np.ndarray:
    """Brute-force min-distance matching: best gallery id per probe id."""
    ids = np.unique(labels)
    pids = np.unique(probe_labels)
    g_sq = (gallery**2).sum(1)
    best = np.full((len(pids), len(ids)), np.inf)
    lab_idx = np.searchsorted(ids, labels)
    order = np.argsort(lab_idx, kind="stable")
    bounds = np.searchsorted(lab_idx[order], np.arange(len(ids)))
    for s in range(0, probes.shape[0], block):
        P = probes[s:s + block]
        dist = (P**2).sum(1)[:, None] + g_sq[None, :] - 2.0 * P @ gallery.T
        per_id = np.minimum.reduceat(dist[:, order], bounds, axis=1)
        rows = np.searchsorted(pids, probe_labels[s:s + block])
        np.minimum.at(best, rows, per_id)
    return ids[np.argmin(best, axis=1)]


def forest_match(gallery, labels, probes, probe_labels, cfg: PipelineConfig, seed=0):
    """Train one forest on the gallery and match every probe id multi-shot."""
    from .forest import RandomForestReID

    forest = RandomForestReID(n_estimators=cfg.tree_count, max_depth=cfg.max_depth,
                              min_samples_split=cfg.min_samples_split, random_state=seed).fit(gallery, labels)
    pids = np.unique(probe_labels)
    out = np.empty(len(pids), dtype=labels.dtype)
    order = np.argsort(probe_labels, kind="stable")
    bounds = np.searchsorted(probe_labels[order], pids)
    for i, chunk in enumerate(np.split(order, bounds[1:])):
        out[i] = forest.predict_multishot(probes[chunk])[0]
    return out


def benchmark_matching(sizes: Sequence[int], K: int = 30, cfg: Optional[PipelineConfig] = None,
                       repeats: int = 5, dim: int = 64, seed: int = 0,
                       paths=("forest", "exhaustive")) -> List[dict]:
    """Median wall time per (N, path), with the ratio to the previous size.

    Each path matches N probe identities against a gallery of N identities
    with K appearances each.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValidationError("sizes must be sorted")
    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(seed)
    rows = []
    prev = {}
    for n in sizes:
        G, P, y = _bench_data(n, K, dim, rng)
        for path in paths:
            times = []
            for r in range(repeats):
                t0 = time.perf_counter()
                if path == "forest":
                    forest_match(G, y, P, y, cfg, seed=r)
                else:
                    exhaustive_match(G, y, P, y)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            ratio = med / prev[path] if path in prev else None
            prev[path] = med
            rows.append({"N": n, "K": K, "path": path, "median_s": med, "ratio": ratio, "repeats": repeats})
    return rows


# --------------------------------------------------------------------------
# learned topology against a known one


def map_zones(zones_by_cam: Dict[str, list], true_centers: Dict[str, Dict[int, Tuple[float, float]]]) -> Dict[tuple, int]:
    """Learned (camera, zone id) -> id of the nearest true zone center."""
    out = {}
    for cam, zones in zones_by_cam.items():
        centers = true_centers.get(cam, {})
        for z in zones:
            if centers:
                out[(cam, z.zone_id)] = min(
                    centers, key=lambda k: (math.hypot(z.center[0] - centers[k][0], z.center[1] - centers[k][1]), k))
    return out


def map_links(topology, zones_by_cam, true_centers) -> Dict[tuple, Tuple[str, int, str, int]]:
    """Valid learned links keyed by the true (camera, zone, camera, zone) they land on."""
    zmap = map_zones(zones_by_cam, true_centers)
    out = {}
    for x, e in topology.valid_links():
        key = (x.camera_id, zmap.get((x.camera_id, x.zone_id)), e.camera_id, zmap.get((e.camera_id, e.zone_id)))
        # two learned links on the same true link: keep the better supported one
        if key not in out or topology.edges[(x, e)].distribution.sample_count > topology.edges[out[key]].distribution.sample_count:
            out[key] = (x, e)
    return out


def evaluate_topology(topology, zones_by_cam, truth, phase: Optional[str] = "init", after=None) -> EvalReport:
    """Link detection, per-link table, transition error and topology distance.

    ``truth`` is a :class:`camtopo.sim.GroundTruth`; true link parameters
    are the sample moments of its pairs in ``phase`` (exits at or after
    ``after`` when given).
    """
    centers = {cam: truth.zone_centers(cam) for cam in truth.zones}
    learned = map_links(topology, zones_by_cam, centers)
    true_keys = [l.key for l in truth.links]
    det = link_detection(learned.keys(), true_keys)
    rows, mu_inf, mu_gt, dists = [], {}, {}, []
    for key in true_keys:
        gt = truth.link_model(key, phase, after)
        if key not in learned:
            rows.append(LinkRow(_link_name(key), None, gt.mu, None, gt.sigma, None))
            continue
        st = topology.edges[learned[key]]
        m = st.model
        d_b = distance_to_model(st.distribution, gt) if m is not None else None
        rows.append(LinkRow(_link_name(key), m and m.mu, gt.mu, m and m.sigma, gt.sigma, d_b,
                            st.confidence, st.distribution.sample_count))
        if m is not None:
            mu_inf[key], mu_gt[key] = m.mu, gt.mu
            dists.append(d_b)
    rep = EvalReport(links=rows)
    rep.detection = {"true_links": det.true_links, "found": det.found, "recovered": det.recovered,
                     "missing": [_link_name(k) for k in det.missing],
                     "spurious": [_link_name(k) for k in det.spurious]}
    if mu_inf:
        rep.transition_time_error = transition_time_error(mu_inf, mu_gt)
        rep.topology_distance = float(np.mean(dists))
    return rep


def _link_name(key) -> str:
    a, za, b, zb = key
    return f"{a}-zone{za}->{b}-zone{zb}"
