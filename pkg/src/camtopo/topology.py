"""Transition distributions, connectivity checks and iterative topology refinement."""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import norm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import (
    CameraTopology,
    GaussianModel,
    LinkState,
    PipelineConfig,
    Tracklet,
    TransitionDistribution,
    ValidationError,
    ZoneKey,
    ZoneTopology,
)
from .evaluation import gaussian_bhattacharyya
from .forest import build_series, query_nearest, query_series
from .ingest import select_key_appearances
from .zones import Zone, assign_all, learn_zones

log = logging.getLogger(__name__)


def derive_seed(root: int, *parts) -> int:
    tag = zlib.crc32(repr(parts).encode("utf-8"))
    return int(np.random.SeedSequence([int(root) & 0xFFFFFFFF, tag]).generate_state(1)[0])


# --------------------------------------------------------------------------
# correspondences


@dataclass(frozen=True)
class Correspondence:
    exit: Tuple[str, int]
    entry: Tuple[str, int]
    exit_time: float
    entry_time: float
    delta_t: float
    similarity: float
    link: object = None
    window_center: float = float("nan")


@dataclass
class CorrespondenceSet:
    pairs: List[Correspondence] = field(default_factory=list)
    theta_sim: float = 0.7

    @property
    def reliable(self) -> List[Correspondence]:
        return [c for c in self.pairs if c.similarity > self.theta_sim]

    @property
    def reliable_count(self) -> int:
        return len(self.reliable)

    def __len__(self):
        return len(self.pairs)


def resolve_consecutive(cands: Iterable[Correspondence], theta_sim: float) -> List[Correspondence]:
    """Keep at most one successor per exit and one predecessor per entry.

    A reliable candidate is preferred over an unreliable one; among
    reliable candidates the earliest re-appearance wins for an exit and the
    latest departure wins for an entry, so a person seen at A, B, C in
    turn yields A->B and B->C but not A->C.
    """
    def pick(group, latest):
        rel = [c for c in group if c.similarity > theta_sim]
        if rel:
            if latest:
                return max(rel, key=lambda c: (c.exit_time, c.similarity))
            return min(rel, key=lambda c: (c.entry_time, -c.similarity))
        return max(group, key=lambda c: c.similarity)

    by_exit = defaultdict(list)
    for c in cands:
        by_exit[c.exit].append(c)
    kept = [pick(g, latest=False) for _, g in sorted(by_exit.items())]
    by_entry = defaultdict(list)
    for c in kept:
        by_entry[c.entry].append(c)
    out = [pick(g, latest=True) for _, g in sorted(by_entry.items())]
    out.sort(key=lambda c: (c.exit_time, c.exit, c.entry))
    return out


# --------------------------------------------------------------------------
# distributions


def _bin_index(x, bin_width):
    return np.floor(np.asarray(x, dtype=float) / bin_width + 0.5).astype(np.int64)


def distribution_from_samples(delta_ts, bin_width=1.0, range=None, weights=None) -> TransitionDistribution:
    """Normalized histogram of ``delta_ts`` on the aligned grid."""
    x = np.asarray(list(delta_ts), dtype=float)
    if range is not None:
        lo, hi = _bin_index(range[0], bin_width), _bin_index(range[1], bin_width)
    elif x.size:
        lo, hi = _bin_index(x.min(), bin_width), _bin_index(x.max(), bin_width)
    else:
        lo, hi = 0, 0
    if x.size:
        idx = _bin_index(x, bin_width)
        lo, hi = min(lo, int(idx.min())), max(hi, int(idx.max()))
        counts = np.bincount(idx - lo, weights=weights, minlength=hi - lo + 1).astype(float)
        return TransitionDistribution(counts / counts.sum(), float(bin_width), int(lo), int(x.size))
    return TransitionDistribution(np.zeros(hi - lo + 1), float(bin_width), int(lo), 0)


def estimate_distribution(c, bin_width=1.0, range=None, theta_sim=None) -> TransitionDistribution:
    """Histogram of the reliable pairs' transition times, mass summing to one.

    ``c`` is a :class:`CorrespondenceSet` (its own threshold applies unless
    ``theta_sim`` is given) or any iterable of correspondences. With no
    reliable pair the result is an empty distribution (``sample_count == 0``).
    """
    if isinstance(c, CorrespondenceSet):
        theta = c.theta_sim if theta_sim is None else theta_sim
        pairs = c.pairs
    else:
        theta = 0.7 if theta_sim is None else theta_sim
        pairs = list(c)
    reliable = [p.delta_t for p in pairs if p.similarity > theta]
    return distribution_from_samples(reliable, bin_width, range)


def align(p: TransitionDistribution, q: TransitionDistribution):
    """Both bin arrays on their common grid."""
    if not math.isclose(p.bin_width, q.bin_width):
        raise ValidationError("distributions use different bin widths")
    lo = min(p.offset, q.offset)
    hi = max(p.offset + len(p.bins), q.offset + len(q.bins))
    a, b = np.zeros(hi - lo), np.zeros(hi - lo)
    a[p.offset - lo:p.offset - lo + len(p.bins)] = p.bins
    b[q.offset - lo:q.offset - lo + len(q.bins)] = q.bins
    return a, b, lo


def l1_difference(p: TransitionDistribution, q: TransitionDistribution) -> float:
    a, b, _ = align(p, q)
    return float(np.abs(a - b).sum())


def robust_spread(d: TransitionDistribution) -> float:
    """Spread of a histogram from a Gaussian fit to its cumulative mass.

    A free floor and ceiling absorb stray mass at either end, so a few
    outlying matches do not inflate it, and summing over bins smooths out
    single-bin spikes that dominate a fit to the raw heights.
    """
    h = np.asarray(d.bins, dtype=float)
    nz = np.flatnonzero(h)
    bw = d.bin_width
    if nz.size < 2:
        return bw / 2.0
    F = np.cumsum(h)[nz[0]:nz[-1] + 1] / h.sum()
    e = d.centers[nz[0]:nz[-1] + 1] + bw / 2.0
    q1, med, q3 = np.interp([0.25, 0.5, 0.75], F, e)
    s0 = max((q3 - q1) / 1.349, bw / 2.0)
    res = least_squares(
        lambda t: t[2] + t[3] * norm.cdf((e - t[0]) / t[1]) - F,
        x0=[med, s0, 0.0, 1.0],
        bounds=([e[0] - bw, bw / 4.0, 0.0, 0.0], [e[-1] + bw, np.inf, 1.0, 1.0]),
        max_nfev=200,
    )
    return float(res.x[1])


def fit_gaussian(d: TransitionDistribution, max_steps=100, tol=1e-8, spread_floor=None) -> GaussianModel:
    """Least-squares Gaussian fit to bin heights, error = 1 - R^2.

    sigma is bounded below by half a bin and, when ``spread_floor`` is
    given, by that multiple of :func:`robust_spread`; with a few dozen
    samples the unbounded fit can lock onto one tall bin. With fewer than two non-empty bins the fit is
    degenerate: sigma is set to half a bin and the error to zero.
    """
    h = np.asarray(d.bins, dtype=float)
    x = d.centers
    bw = d.bin_width
    if d.sample_count == 0 or not h.sum() > 0:
        raise ValidationError("cannot fit an empty distribution")
    mean = float(np.dot(h, x) / h.sum())
    if np.count_nonzero(h) < 2:
        return GaussianModel(mean, bw / 2.0, 0.0)
    sd = math.sqrt(max(float(np.dot(h, (x - mean) ** 2) / h.sum()), (bw / 2.0) ** 2))
    z = x / bw
    amp0 = float(h.max())
    lo_sig = max(0.5, spread_floor * robust_spread(d) / bw) if spread_floor else 0.5

    def resid(theta):
        amp, mu, sig = theta
        return amp * np.exp(-0.5 * ((z - mu) / sig) ** 2) - h

    def jac(theta):
        amp, mu, sig = theta
        g = np.exp(-0.5 * ((z - mu) / sig) ** 2)
        return np.column_stack([g, amp * g * (z - mu) / sig**2, amp * g * (z - mu) ** 2 / sig**3])

    res = least_squares(
        resid,
        x0=[amp0, mean / bw, max(sd / bw, lo_sig * 1.01)],
        jac=jac,
        bounds=([0.0, z.min() - 1.0, lo_sig], [np.inf, z.max() + 1.0, np.inf]),
        xtol=tol,
        ftol=tol,
        gtol=tol,
        max_nfev=max_steps,
        method="trf",
    )
    amp, mu, sig = res.x
    ss_res = float((res.fun ** 2).sum())
    ss_tot = float(((h - h.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    err = min(1.0, max(0.0, 1.0 - r2))
    return GaussianModel(float(mu * bw), float(sig * bw), err)


def connectivity_confidence(m: GaussianModel, time_scale: float) -> float:
    """exp(-sigma / time_scale) * (1 - fit error)."""
    if not time_scale > 0:
        raise ValidationError("time_scale must be positive")
    return float(math.exp(-m.sigma / time_scale) * (1.0 - m.fit_error))


def update_time_window(m: GaussianModel, coverage_percent=95.0, max_error=0.9):
    """Central-coverage bounds of the fitted Gaussian and the widened window.

    Returns (T_L, T_U, T) with T = (T_U - T_L) / (1 - E), E capped at
    ``max_error``.
    """
    if not 0 < coverage_percent < 100:
        raise ValidationError("coverage_percent must lie in (0, 100)")
    z = float(norm.ppf(0.5 * (1.0 + coverage_percent / 100.0)))
    lo, hi = m.mu - z * m.sigma, m.mu + z * m.sigma
    err = min(m.fit_error, max_error)
    return lo, hi, (hi - lo) / (1.0 - err)


def with_model(d: TransitionDistribution, time_scale: float, cfg: PipelineConfig, spread_floor=None):
    """Attach a fitted model and confidence; empty or thin histograms get conf 0."""
    if d.sample_count == 0:
        return d
    model = fit_gaussian(d, spread_floor=spread_floor)
    conf = connectivity_confidence(model, cfg.confidence_time_scale or time_scale)
    if d.sample_count < cfg.min_reliable:
        conf = 0.0
    return TransitionDistribution(d.bins, d.bin_width, d.offset, d.sample_count, model, conf)


# --------------------------------------------------------------------------
# pipeline stages


def cam_gap(probe: Tracklet, gallery: Tracklet) -> float:
    """Signed gap between two tracklets, whichever comes first."""
    return max(gallery.entry_time - probe.exit_time, probe.entry_time - gallery.exit_time)


def _oriented(probe: Tracklet, gallery: Tracklet, m, link) -> Correspondence:
    if gallery.entry_time - probe.exit_time >= probe.entry_time - gallery.exit_time:
        first, second = probe, gallery
    else:
        first, second = gallery, probe
    return Correspondence(first.key, second.key, first.exit_time, second.entry_time,
                          m.delta_t, m.similarity, link, m.window_center)


def _forward(probe: Tracklet, m, gallery: Tracklet, link) -> Correspondence:
    return Correspondence(probe.key, gallery.key, probe.exit_time, gallery.entry_time,
                          m.delta_t, m.similarity, link, m.window_center)


class _KeyCache:
    """Key appearances per tracklet, computed once per run."""

    def __init__(self, k_max):
        self.k_max = k_max
        self._cache = {}

    def __call__(self, t: Tracklet) -> np.ndarray:
        k = t.key
        if k not in self._cache:
            self._cache[k] = select_key_appearances(t, self.k_max).features
        return self._cache[k]


def _series(tracklets, window, cfg, seed):
    return build_series(tracklets, window, window * cfg.window_stride_fraction, cfg, seed=seed)


@dataclass
class CamStage:
    topology: CameraTopology
    candidates: List[Correspondence]
    resolved: List[Correspondence]


def infer_cam_topology(data: Dict[str, List[Tracklet]], cfg: Optional[PipelineConfig] = None,
                       keys: Optional[_KeyCache] = None) -> CamStage:
    """Camera-level links from uni-directional matching.

    For each camera pair the camera with more people is the gallery; every
    tracklet of the other camera is a probe searched in ``[t - T, t + T]``.
    """
    cfg = cfg or PipelineConfig()
    keys = keys or _KeyCache(cfg.max_key_appearances)
    T = cfg.initial_window
    cams = list(data)
    series = {}
    cands: List[Correspondence] = []
    pairs = []
    for a_i, a in enumerate(cams):
        for b in cams[a_i + 1:]:
            na, nb = len(data[a]), len(data[b])
            gal, prb = (a, b) if na >= nb else (b, a)
            pairs.append((gal, prb))
            if not data[gal] or not data[prb]:
                continue
            if gal not in series:
                series[gal] = _series(data[gal], T, cfg, derive_seed(cfg.seed, "cam", gal))
            for p in data[prb]:
                m = query_series(series[gal], p, (p.exit_time - T, p.exit_time + T),
                                 delta_fn=cam_gap, probe_keys=keys(p), delta_range=(-T, T))
                if m is not None:
                    g = series[gal].tracklets[_label_of(series[gal], m)]
                    cands.append(_oriented(p, g, m, (gal, prb)))
    resolved = resolve_consecutive(cands, cfg.theta_sim) if cfg.resolve_consecutive else cands
    edges, valid = {}, set()
    by_pair = defaultdict(list)
    for c in resolved:
        by_pair[c.link].append(c)
    for pair in pairs:
        d = estimate_distribution(by_pair.get(pair, []), cfg.bin_width, (-T, T), cfg.theta_sim)
        d = with_model(d, T, cfg)
        edges[pair] = d
        if d.sample_count and d.confidence > cfg.theta_conf:
            valid.add(pair)
    return CamStage(CameraTopology(tuple(cams), edges, frozenset(valid)), cands, resolved)


def _label_of(series, m) -> int:
    return m.label


@dataclass
class ZoneStage:
    topology: ZoneTopology
    candidates: List[Correspondence]
    resolved: List[Correspondence]
    probes: Dict[ZoneKey, List[Tracklet]]
    galleries: Dict[ZoneKey, List[Tracklet]]
    search_lo: Dict[tuple, float]


def group_by_zone(data, zones_by_cam):
    """Tracklets per exit zone and per entry zone."""
    exits, entries = defaultdict(list), defaultdict(list)
    for cam, tracklets in data.items():
        zones = zones_by_cam.get(cam, [])
        if not zones or not tracklets:
            continue
        assigned = assign_all(zones, tracklets)
        for t in tracklets:
            ent, ext = assigned[t.key]
            if ent is not None:
                entries[ZoneKey(cam, ent, "entry")].append(t)
            if ext is not None:
                exits[ZoneKey(cam, ext, "exit")].append(t)
    return exits, entries


def infer_zone_topology(data: Dict[str, List[Tracklet]], zones_by_cam: Dict[str, List[Zone]],
                        cam: CameraTopology, cfg: Optional[PipelineConfig] = None,
                        keys: Optional[_KeyCache] = None) -> ZoneStage:
    """Exit-zone to entry-zone links across the valid camera pairs.

    Probes leaving an exit zone at ``t`` are searched in each entry zone of
    the other camera over ``[t, t + T]``, or ``[t - T, t + T]`` when the
    camera-level fit sits within one sigma of negative gaps (overlapping views).
    """
    cfg = cfg or PipelineConfig()
    keys = keys or _KeyCache(cfg.max_key_appearances)
    T = cfg.initial_window
    exits, entries = group_by_zone(data, zones_by_cam)
    vertices = tuple(sorted(z.key for zs in zones_by_cam.values() for z in zs))
    series = {}
    cands: List[Correspondence] = []
    links, search_lo = [], {}
    for pair in sorted(cam.valid):
        a, b = pair
        d = cam.edges[pair]
        # a one-sigma band below zero counts as overlap evidence; the 95% band
        # of a camera pair mixing both directions is too wide to tell
        lo_T = -T if d.model is not None and d.model.mu - d.model.sigma < 0 else 0.0
        for src, dst in ((a, b), (b, a)):
            for xk in sorted(k for k in exits if k.camera_id == src):
                for ek in sorted(k for k in entries if k.camera_id == dst):
                    link = (xk, ek)
                    links.append(link)
                    search_lo[link] = lo_T
                    if ek not in series:
                        series[ek] = _series(entries[ek], T, cfg, derive_seed(cfg.seed, "zone", ek))
                    s = series[ek]
                    for p in exits[xk]:
                        m = query_series(s, p, (p.exit_time + lo_T, p.exit_time + T),
                                         probe_keys=keys(p), delta_range=(lo_T, T))
                        if m is not None:
                            g = s.tracklets[_label_of(s, m)]
                            cands.append(_forward(p, m, g, link))
    resolved = resolve_consecutive(cands, cfg.theta_sim) if cfg.resolve_consecutive else cands
    by_link = defaultdict(list)
    for c in resolved:
        by_link[c.link].append(c)
    topo = ZoneTopology(vertices=vertices)
    for link in links:
        d = estimate_distribution(by_link.get(link, []), cfg.bin_width, (search_lo[link], T), cfg.theta_sim)
        d = with_model(d, T, cfg)
        valid = bool(d.sample_count) and d.confidence > cfg.theta_conf
        bounds = (search_lo[link], T)
        if d.model is not None:
            bounds = update_time_window(d.model, cfg.coverage_percent, cfg.max_fit_error)[:2]
        topo.add_edge(link, LinkState(d, T, bounds, d.confidence), valid)
    return ZoneStage(topo, cands, resolved, dict(exits), dict(entries), search_lo)


def refine_link(link: LinkState, probes: Sequence[Tracklet], gallery: Sequence[Tracklet],
                cfg: Optional[PipelineConfig] = None, seed=0, keys=None, link_key=None):
    """One refinement pass on a single link.

    Narrows the window from the current model, retrains the entry-zone
    series, matches each exit with the window centered nearest ``t + mu``
    and re-estimates the distribution from reliable matches. Returns the
    new state and the raw matches.
    """
    cfg = cfg or PipelineConfig()
    keys = keys or _KeyCache(cfg.max_key_appearances)
    cands = match_link(link, probes, gallery, cfg, seed, keys, link_key)
    return update_link(link, cands, cfg), cands


def match_link(link: LinkState, probes, gallery, cfg, seed, keys, link_key=None):
    model = link.model
    if model is None:
        raise ValidationError("refine_link needs a fitted model")
    _, _, T = update_time_window(model, cfg.coverage_percent, cfg.max_fit_error)
    cands = []
    if not gallery:
        return cands
    s = _series(gallery, T, cfg, seed)
    for p in probes:
        m = query_nearest(s, p, p.exit_time + model.mu, probe_keys=keys(p))
        if m is not None:
            g = s.tracklets[_label_of(s, m)]
            cands.append(_forward(p, m, g, link_key))
    return cands


def update_link(link: LinkState, matches: Sequence[Correspondence], cfg: PipelineConfig,
                history: Sequence[TransitionDistribution] = ()) -> LinkState:
    """Re-estimate a link from its (already resolved) matches.

    The link converges when the newly fitted Gaussian is within the
    convergence epsilon (Bhattacharyya distance) of the current one, or of
    any earlier one in ``history`` (the refinement has entered a cycle).
    Fitted models are compared rather than raw histograms because with a
    few dozen samples a single re-assigned match already moves the
    histogram distance past a typical epsilon.
    """
    model = link.model
    T_L, T_U, T = update_time_window(model, cfg.coverage_percent, cfg.max_fit_error)
    iteration = link.iteration + 1
    reliable = [c for c in matches if c.similarity > cfg.theta_sim]
    if not reliable:
        stagnant = link.stagnant + 1
        return LinkState(link.distribution, T, (T_L, T_U), link.confidence, iteration,
                         converged=stagnant >= 2, stagnant=stagnant)
    d = estimate_distribution(reliable, cfg.bin_width, (model.mu - T, model.mu + T), cfg.theta_sim)
    # the refined histograms are narrow and thin, where an unbounded fit collapses
    d = with_model(d, T, cfg, cfg.refine_spread_floor)
    if d.model is None:
        return LinkState(link.distribution, T, (T_L, T_U), link.confidence, iteration, False, link.stagnant + 1)
    change = min(gaussian_bhattacharyya(prev.model, d.model)
                 for prev in [link.distribution, *history] if prev.model is not None)
    bounds = update_time_window(d.model, cfg.coverage_percent, cfg.max_fit_error)[:2]
    return LinkState(d, T, bounds, d.confidence, iteration,
                     converged=bool(change < cfg.convergence_epsilon), stagnant=0)


@dataclass
class InitResult:
    zone_topology: ZoneTopology
    camera_topology: CameraTopology
    zones: Dict[str, List[Zone]]
    correspondences: Dict[tuple, CorrespondenceSet]
    trace: List[Tuple[str, List[Correspondence]]]
    snapshots: List[Tuple[str, ZoneTopology]]


def initialize_topology(data: Dict[str, List[Tracklet]], cfg: Optional[PipelineConfig] = None,
                        zones: Optional[Dict[str, List[Zone]]] = None) -> InitResult:
    """CAM-to-CAM, then Zone-to-Zone, then refinement of every valid link
    until the successive distributions stop moving or the iteration cap.
    """
    cfg = cfg or PipelineConfig()
    data = OrderedDict((cam, list(ts)) for cam, ts in data.items())
    keys = _KeyCache(cfg.max_key_appearances)
    if zones is None:
        zones = OrderedDict(
            (cam, learn_zones(ts, cfg.max_zones, random_state=derive_seed(cfg.seed, "zones", cam)))
            for cam, ts in data.items() if ts
        )
    if sum(len(ts) for ts in data.values()) == 0 or len(data) < 2:
        empty_cam = CameraTopology(tuple(data), {}, frozenset())
        return InitResult(ZoneTopology(), empty_cam, dict(zones), {}, [], [])

    cam = infer_cam_topology(data, cfg, keys)
    trace = [("cam", cam.resolved)]
    zs = infer_zone_topology(data, zones, cam.topology, cfg, keys)
    topo = zs.topology
    trace.append(("zone", [c for c in zs.resolved if c.link in topo.valid]))
    snapshots = [("zone", _copy_topology(topo))]

    history = defaultdict(list)
    current = defaultdict(list)
    for c in zs.resolved:
        if c.link in topo.valid:
            current[c.link].append(c)
    for it in range(1, cfg.max_iterations + 1):
        active = [l for l in topo.valid_links() if not topo.edges[l].converged]
        if not active:
            break
        fresh = {}
        for link in active:
            xk, ek = link
            fresh[link] = match_link(topo.edges[link], zs.probes.get(xk, []), zs.galleries.get(ek, []),
                                     cfg, derive_seed(cfg.seed, "refine", link), keys, link)
        pool = [c for l, cs in current.items() if l not in fresh for c in cs]
        pool += [c for cs in fresh.values() for c in cs]
        resolved = resolve_consecutive(pool, cfg.theta_sim) if cfg.resolve_consecutive else pool
        by_link = defaultdict(list)
        for c in resolved:
            by_link[c.link].append(c)
        for link in active:
            prev = topo.edges[link]
            topo.edges[link] = update_link(prev, by_link.get(link, []), cfg, history[link])
            history[link].append(prev.distribution)
        current = by_link
        trace.append((f"iteration {it}", resolved))
        snapshots.append((f"iteration {it}", _copy_topology(topo)))
        log.info("iteration %d: %d active links", it, len(active))

    corr = {l: CorrespondenceSet(current.get(l, []), cfg.theta_sim) for l in topo.valid_links()}
    return InitResult(topo, cam.topology, dict(zones), corr, trace, snapshots)


def _copy_topology(t: ZoneTopology) -> ZoneTopology:
    edges = {k: LinkState(v.distribution, v.window, v.bounds, v.confidence, v.iteration,
                          v.converged, v.stagnant) for k, v in t.edges.items()}
    return ZoneTopology(t.vertices, edges, set(t.valid))


class TopologyEstimator(BaseEstimator):
    """Estimator wrapper around :func:`initialize_topology`.

    ``fit`` takes a mapping camera id -> tracklets and sets ``topology_``,
    ``camera_topology_``, ``zones_``, ``correspondences_`` and ``trace_``.
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config

    def fit(self, X, y=None):
        res = initialize_topology(X, self.config or PipelineConfig())
        self.topology_ = res.zone_topology
        self.camera_topology_ = res.camera_topology
        self.zones_ = res.zones
        self.correspondences_ = res.correspondences
        self.trace_ = res.trace
        self.result_ = res
        return self

    def transform(self, X):
        """Final re-identification result as (exit key, entry key) pairs."""
        check_is_fitted(self, "topology_")
        return [(c.exit, c.entry) for cs in self.correspondences_.values() for c in cs.pairs]


# --------------------------------------------------------------------------
# export


def _dist_dict(d: TransitionDistribution) -> dict:
    out = {
        "bin_width": d.bin_width,
        "offset": d.offset,
        "sample_count": d.sample_count,
        "bins": [float(b) for b in d.bins],
        "confidence": d.confidence,
        "mu": None, "sigma": None, "fit_error": None,
    }
    if d.model is not None:
        out.update(mu=d.model.mu, sigma=d.model.sigma, fit_error=d.model.fit_error)
    return out


def _dist_from(d: dict) -> TransitionDistribution:
    model = None
    if d.get("mu") is not None:
        model = GaussianModel(d["mu"], d["sigma"], d["fit_error"])
    return TransitionDistribution(np.asarray(d["bins"], dtype=float), d["bin_width"], d["offset"],
                                  d["sample_count"], model, d["confidence"])


def _zk(k: ZoneKey) -> dict:
    return {"camera_id": k.camera_id, "zone_id": k.zone_id, "kind": k.kind}


def topology_to_dict(topo: ZoneTopology, cam: Optional[CameraTopology] = None, zones=None) -> dict:
    doc = {"format": "camtopo-topology/1"}
    if cam is not None:
        doc["cameras"] = list(cam.vertices)
        doc["camera_edges"] = [
            dict(_dist_dict(d), gallery=i, probe=j, valid=(i, j) in cam.valid)
            for (i, j), d in cam.edges.items()
        ]
    if zones is not None:
        doc["zones"] = {c: [z.to_dict() for z in zs] for c, zs in zones.items()}
    doc["zone_vertices"] = [_zk(k) for k in topo.vertices]
    links = []
    for (x, e), st in sorted(topo.edges.items()):
        row = _dist_dict(st.distribution)
        row.update(exit=_zk(x), entry=_zk(e), valid=(x, e) in topo.valid, window=st.window,
                   T_L=st.bounds[0], T_U=st.bounds[1], confidence=st.confidence,
                   iteration=st.iteration, converged=st.converged, stagnant=st.stagnant)
        links.append(row)
    doc["zone_links"] = links
    return doc


def export_topology(topo: ZoneTopology, path, cam: Optional[CameraTopology] = None, zones=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(topology_to_dict(topo, cam, zones), fh, indent=1)


def load_topology(path):
    """Returns (ZoneTopology, zones by camera or None, CameraTopology or None)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    topo = ZoneTopology(vertices=tuple(ZoneKey(**v) for v in doc.get("zone_vertices", [])))
    for row in doc.get("zone_links", []):
        key = (ZoneKey(**row["exit"]), ZoneKey(**row["entry"]))
        st = LinkState(_dist_from(row), row["window"], (row["T_L"], row["T_U"]), row["confidence"],
                       row["iteration"], row["converged"], row.get("stagnant", 0))
        topo.add_edge(key, st, row["valid"])
    zones = None
    if "zones" in doc:
        zones = {c: [Zone.from_dict(z) for z in zs] for c, zs in doc["zones"].items()}
    cam = None
    if "camera_edges" in doc:
        edges = {(r["gallery"], r["probe"]): _dist_from(r) for r in doc["camera_edges"]}
        valid = frozenset((r["gallery"], r["probe"]) for r in doc["camera_edges"] if r["valid"])
        cam = CameraTopology(tuple(doc["cameras"]), edges, valid)
    return topo, zones, cam
