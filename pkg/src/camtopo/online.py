"""Online re-identification with topology gating and lazy distribution refits."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import LinkState, PipelineConfig, Tracklet, TransitionDistribution, ValidationError, ZoneKey, ZoneTopology
from .forest import MatchResult, RandomForestReID, forward_delta, similarity
from .ingest import select_key_appearances
from .topology import connectivity_confidence, derive_seed, fit_gaussian, update_time_window
from .zones import Zone, assign_all

log = logging.getLogger(__name__)


class OnlineLink:
    """A valid link during the online stage.

    ``base`` holds the current model p; ``accumulated`` is p', the base
    histogram plus every reliable match seen since, and ``drift`` is the
    L1 distance between the two. With ``memory`` set, older mass in p' is
    scaled down so it never holds more than that many samples, which lets
    the link follow a travel time that moves past its gate.
    """

    def __init__(self, key, base: LinkState, memory: Optional[float] = None):
        if base.model is None:
            raise ValidationError(f"link {key} has no fitted model")
        self.key = key
        self.base = base
        self.memory = memory
        d = base.distribution
        self.bin_width = d.bin_width
        self._offset = d.offset
        self._counts = d.bins * max(d.sample_count, 1)
        self.refits = 0
        self.drift = 0.0

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.base.bounds

    @property
    def model(self):
        return self.base.model

    @property
    def sample_count(self) -> float:
        return float(self._counts.sum())

    @property
    def accumulated(self) -> TransitionDistribution:
        total = self._counts.sum()
        return TransitionDistribution(self._counts / total, self.bin_width, self._offset,
                                      int(round(total)))

    def add(self, delta_t: float) -> None:
        k = int(np.floor(delta_t / self.bin_width + 0.5))
        if k < self._offset:
            self._counts = np.concatenate([np.zeros(self._offset - k), self._counts])
            self._offset = k
        elif k >= self._offset + len(self._counts):
            self._counts = np.concatenate([self._counts, np.zeros(k - self._offset - len(self._counts) + 1)])
        if self.memory is not None and self._counts.sum() >= self.memory:
            self._counts *= (self.memory - 1.0) / self._counts.sum()
        self._counts[k - self._offset] += 1.0
        self.drift = _l1(self.base.distribution, self.accumulated)


def _l1(p: TransitionDistribution, q: TransitionDistribution) -> float:
    lo = min(p.offset, q.offset)
    hi = max(p.offset + len(p.bins), q.offset + len(q.bins))
    a, b = np.zeros(hi - lo), np.zeros(hi - lo)
    a[p.offset - lo:p.offset - lo + len(p.bins)] = p.bins
    b[q.offset - lo:q.offset - lo + len(q.bins)] = q.bins
    return float(np.abs(a - b).sum())


def gate_candidates(link: OnlineLink, t: float, entries: Sequence[Tracklet]) -> List[Tracklet]:
    """Entries whose appearance time lies in ``[t + T_L, t + T_U]``."""
    lo, hi = link.bounds
    return [e for e in entries if t + lo <= e.entry_time <= t + hi]


def match_online(candidates: Sequence[Tracklet], probe: Tracklet, cfg: Optional[PipelineConfig] = None,
                 seed=0, keys=None) -> Optional[MatchResult]:
    """Best candidate for ``probe``: a forest when there are many, else brute force."""
    cfg = cfg or PipelineConfig()
    if not candidates:
        return None
    keys = keys or (lambda t: select_key_appearances(t, cfg.max_key_appearances).features)
    pk = keys(probe)
    if pk.shape[0] == 0:
        raise ValidationError("probe must be non-empty")
    gal = [keys(c) for c in candidates]
    if len(candidates) >= cfg.candidate_rf_threshold:
        X = np.vstack(gal)
        y = np.concatenate([np.full(g.shape[0], i) for i, g in enumerate(gal)])
        forest = RandomForestReID(n_estimators=cfg.tree_count, max_depth=cfg.max_depth,
                                  min_samples_split=cfg.min_samples_split, random_state=seed).fit(X, y)
        label, post = forest.predict_multishot(pk)
        best, s, post_max, path = int(label), similarity(gal[int(label)], pk), float(post.max()), "forest"
    else:
        sims = [similarity(g, pk) for g in gal]
        best = int(np.argmax(sims))
        s, post_max, path = sims[best], float("nan"), "exhaustive"
    c = candidates[best]
    return MatchResult(probe.key, c.key, post_max, float(s), forward_delta(probe, c), float("nan"), path, best)


def update_distribution(link: OnlineLink, match: MatchResult, cfg: Optional[PipelineConfig] = None) -> OnlineLink:
    """Add a reliable match's gap to p' (unreliable matches change nothing)."""
    cfg = cfg or PipelineConfig()
    if match is not None and match.similarity > cfg.theta_sim:
        link.add(match.delta_t)
    return link


def maybe_refit(link: OnlineLink, cfg: Optional[PipelineConfig] = None) -> bool:
    """Refit p from p' once they differ by more than the refit threshold.

    Returns True when a refit happened. A failed fit keeps the old model.
    """
    cfg = cfg or PipelineConfig()
    if link.drift <= cfg.online_refit_threshold:
        return False
    acc = link.accumulated
    try:
        model = fit_gaussian(acc)
        T_L, T_U, T = update_time_window(model, cfg.coverage_percent, cfg.max_fit_error)
    except (ValidationError, ValueError, FloatingPointError) as exc:
        log.warning("refit of link %s failed, keeping previous model: %s", link.key, exc)
        return False
    conf = connectivity_confidence(model, cfg.confidence_time_scale or T)
    dist = TransitionDistribution(acc.bins, acc.bin_width, acc.offset, acc.sample_count, model, conf)
    link.base = LinkState(dist, T, (T_L, T_U), conf, link.base.iteration, link.base.converged)
    link.drift = 0.0
    link.refits += 1
    return True


@dataclass
class OnlineMatch:
    exit_camera: str
    exit_zone: int
    exit_id: int
    exit_time: float
    entry_camera: str
    entry_zone: int
    entry_id: int
    entry_time: float
    delta_t: float
    similarity: float
    path: str
    refit: bool

    @property
    def exit(self):
        return (self.exit_camera, self.exit_id)

    @property
    def entry(self):
        return (self.entry_camera, self.entry_id)


LOG_FIELDS = tuple(f.name for f in fields(OnlineMatch))


def write_match_log(records: Sequence[OnlineMatch], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def read_match_log(path) -> List[OnlineMatch]:
    casts = {f.name: f.type for f in fields(OnlineMatch)}
    conv = {"str": str, "int": int, "float": float, "bool": lambda v: v == "True"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(OnlineMatch(**{k: conv[casts[k]](v) for k, v in row.items()}))
    return out


@dataclass
class OnlineResult:
    log: List[OnlineMatch]
    topology: ZoneTopology
    links: Dict[tuple, OnlineLink]


def run_online(topology: ZoneTopology, zones: Dict[str, List[Zone]], stream: Dict[str, List[Tracklet]],
               cfg: Optional[PipelineConfig] = None, update: bool = True,
               links: Optional[Dict[tuple, OnlineLink]] = None) -> OnlineResult:
    """Process every exit of ``stream`` in time order over the valid links.

    With ``update=False`` matches are logged but p' never replaces p.
    Passing the ``links`` of a previous result continues from its state.
    """
    cfg = cfg or PipelineConfig()
    if links is None:
        links = {k: OnlineLink(k, topology.edges[k], cfg.online_memory) for k in topology.valid_links()}
    by_exit = defaultdict(list)
    for k in links:
        by_exit[k[0]].append(k)
    entries, exit_zone, entry_zone = defaultdict(list), {}, {}
    for cam, ts in stream.items():
        if cam not in zones or not ts:
            continue
        for key, (ent, ext) in assign_all(zones[cam], ts).items():
            entry_zone[key], exit_zone[key] = ent, ext
        for t in ts:
            if entry_zone[t.key] is not None:
                entries[ZoneKey(cam, entry_zone[t.key], "entry")].append(t)
    for pool in entries.values():
        pool.sort(key=lambda t: (t.entry_time, t.key))
    taken = set()
    key_cache = {}

    def keys(t):
        if t.key not in key_cache:
            key_cache[t.key] = select_key_appearances(t, cfg.max_key_appearances).features
        return key_cache[t.key]

    exits = sorted((t for ts in stream.values() for t in ts if t.key in exit_zone),
                   key=lambda t: (t.exit_time, t.key))
    records: List[OnlineMatch] = []
    for n, probe in enumerate(exits):
        xk = ZoneKey(probe.camera_id, exit_zone[probe.key], "exit") if exit_zone[probe.key] is not None else None
        for lk in sorted(by_exit.get(xk, [])):
            link = links[lk]
            cands = gate_candidates(link, probe.exit_time, entries.get(lk[1], []))
            if cfg.one_to_one:
                cands = [c for c in cands if c.key not in taken]
            m = match_online(cands, probe, cfg, seed=derive_seed(cfg.seed, "online", n, lk), keys=keys)
            if m is None:
                continue
            update_distribution(link, m, cfg)
            refit = maybe_refit(link, cfg) if update else False
            if cfg.one_to_one and m.similarity > cfg.theta_sim:
                taken.add(m.matched)
            g = cands[m.label]
            records.append(OnlineMatch(probe.camera_id, lk[0].zone_id, probe.person_id, probe.exit_time,
                                       g.camera_id, lk[1].zone_id, g.person_id, g.entry_time,
                                       m.delta_t, m.similarity, m.path, refit))
    out = ZoneTopology(topology.vertices, dict(topology.edges), set(topology.valid))
    for k, link in links.items():
        out.edges[k] = link.base
    return OnlineResult(records, out, links)


class OnlineReID(BaseEstimator):
    """Streaming stage as an estimator.

    ``fit`` stores an initialized topology and its zones; ``partial_fit``
    consumes a stream chunk and appends to ``log_``; ``predict`` returns
    the (exit, entry) pairs of reliable matches so far.
    """

    def __init__(self, config: Optional[PipelineConfig] = None, update: bool = True):
        self.config = config
        self.update = update

    def fit(self, topology: ZoneTopology, zones: Dict[str, List[Zone]]):
        cfg = self.config or PipelineConfig()
        self.zones_ = zones
        self.topology_ = topology
        self.links_ = {k: OnlineLink(k, topology.edges[k], cfg.online_memory) for k in topology.valid_links()}
        self.log_ = []
        return self

    def partial_fit(self, stream: Dict[str, List[Tracklet]]):
        check_is_fitted(self, "links_")
        res = run_online(self.topology_, self.zones_, stream, self.config, self.update, self.links_)
        self.topology_ = res.topology
        self.log_.extend(res.log)
        return self

    def predict(self, stream=None):
        check_is_fitted(self, "log_")
        theta = (self.config or PipelineConfig()).theta_sim
        return [(r.exit, r.entry) for r in self.log_ if r.similarity > theta]
