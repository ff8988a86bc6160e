"""Synthetic multi-camera world with known topology and identities."""

from __future__ import annotations

import json
import math
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from .core import GaussianModel, Tracklet, ValidationError, make_tracklet, validate_tracklet
from .ingest import write_dataset


class ScenarioError(ValidationError):
    pass


@dataclass
class ZoneSpec:
    """A door of a camera view, used both to enter and to leave it."""

    zone_id: int
    center: Tuple[float, float]
    std: float = 8.0
    exit_weight: float = 1.0
    source_weight: float = 0.0


@dataclass
class CameraSpec:
    camera_id: str
    zones: List[ZoneSpec]
    width: int = 640
    height: int = 480


@dataclass
class LinkSpec:
    src_camera: str
    src_zone: int
    dst_camera: str
    dst_zone: int
    mu: float
    sigma: float
    prob: float = 1.0

    @property
    def key(self) -> Tuple[str, int, str, int]:
        return (self.src_camera, self.src_zone, self.dst_camera, self.dst_zone)


@dataclass
class Change:
    """Piecewise change applied to links from ``t0`` on.

    ``kind`` is ``"shift"`` (new ``mu``, and ``sigma`` if given) or
    ``"remove"``.
    """

    kind: str
    t0: float
    link: Tuple[str, int, str, int]
    mu: Optional[float] = None
    sigma: Optional[float] = None


@dataclass
class ScenarioSpec:
    cameras: List[CameraSpec]
    links: List[LinkSpec]
    n_persons: int = 300
    feature_dim: int = 64
    latent_dim: int = 3
    min_separation: float = 0.15
    appearance_noise: float = 0.3
    dwell_mean: float = 30.0
    dwell_std: float = 8.0
    dwell_min: float = 8.0
    dwell_max: float = 60.0
    observation_rate: float = 1.0
    exit_probability: float = 0.0
    duration: float = 3600.0
    init_duration: Optional[float] = None
    changes: List[Change] = field(default_factory=list)
    box_size: Tuple[float, float] = (40.0, 100.0)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ScenarioError(f"invalid scenario field '{name}': {why}")

        if not self.cameras:
            bad("cameras", "at least one camera is required")
        ids = [c.camera_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            bad("cameras", "camera ids must be unique")
        doors = {}
        for c in self.cameras:
            if not c.zones:
                bad("cameras", f"camera {c.camera_id} has no zones")
            zids = [z.zone_id for z in c.zones]
            if len(set(zids)) != len(zids):
                bad("cameras", f"zone ids of camera {c.camera_id} must be unique")
            for z in c.zones:
                if not z.std >= 0:
                    bad("cameras", "zone std must be non-negative")
                doors[(c.camera_id, z.zone_id)] = z
        out_prob = defaultdict(float)
        for l in self.links:
            if (l.src_camera, l.src_zone) not in doors or (l.dst_camera, l.dst_zone) not in doors:
                bad("links", f"link {l.key} refers to an unknown camera or zone")
            if l.src_camera == l.dst_camera:
                bad("links", "links must join different cameras")
            if not l.sigma > 0:
                bad("links", f"sigma of {l.key} must be positive")
            if not 0 <= l.prob <= 1:
                bad("links", f"prob of {l.key} must lie in [0, 1]")
            out_prob[(l.src_camera, l.src_zone)] += l.prob
        for k, p in out_prob.items():
            if p > 1 + 1e-9:
                bad("links", f"routing probabilities out of {k} sum to {p:.3f} > 1")
        if self.n_persons < 1:
            bad("n_persons", "must be >= 1")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if not 1 <= self.latent_dim <= self.feature_dim:
            bad("latent_dim", "must lie in [1, feature_dim]")
        if self.appearance_noise < 0:
            bad("appearance_noise", "must be >= 0")
        if not self.min_separation >= 0:
            bad("min_separation", "must be >= 0")
        if not 0 < self.dwell_min <= self.dwell_max:
            bad("dwell_min", "need 0 < dwell_min <= dwell_max")
        if not self.dwell_std > 0:
            bad("dwell_std", "must be positive")
        if not self.observation_rate > 0:
            bad("observation_rate", "must be positive")
        if not 0 <= self.exit_probability <= 1:
            bad("exit_probability", "must lie in [0, 1]")
        if not self.duration > 0:
            bad("duration", "must be positive")
        if self.init_duration is not None and not 0 < self.init_duration <= self.duration:
            bad("init_duration", "must lie in (0, duration]")
        for ch in self.changes:
            if ch.kind not in ("shift", "remove"):
                bad("changes", f"unknown change kind {ch.kind!r}")
            if tuple(ch.link) not in {l.key for l in self.links}:
                bad("changes", f"change refers to unknown link {tuple(ch.link)}")
        if not any(z.source_weight > 0 for c in self.cameras for z in c.zones):
            bad("cameras", "no zone has a positive source_weight")

    @property
    def split_time(self) -> float:
        return self.duration if self.init_duration is None else self.init_duration

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"invalid scenario field '{sorted(extra)[0]}': unknown field")
        try:
            cams = [CameraSpec(c["camera_id"], [ZoneSpec(**{**z, "center": tuple(z["center"])}) for z in c["zones"]],
                               c.get("width", 640), c.get("height", 480)) for c in d.pop("cameras")]
            links = [LinkSpec(**l) for l in d.pop("links")]
            changes = [Change(**{**c, "link": tuple(c["link"])}) for c in d.pop("changes", [])]
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"invalid scenario field: {exc}") from exc
        if "box_size" in d:
            d["box_size"] = tuple(d["box_size"])
        return cls(cams, links, changes=changes, **d)


def save_spec(spec: ScenarioSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=1)


def load_spec(path) -> ScenarioSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return ScenarioSpec.from_dict(doc)


# --------------------------------------------------------------------------
# stock scenarios


def _door_camera(cid, left=True, right=True, outside=True, w=640, h=480):
    zones = []
    if left:
        zones.append(ZoneSpec(0, (40.0, 300.0)))
    if right:
        zones.append(ZoneSpec(1, (w - 40.0, 300.0)))
    if outside:
        zones.append(ZoneSpec(2, (w / 2.0, h - 30.0), exit_weight=0.25, source_weight=1.0))
    return CameraSpec(cid, zones, w, h)


def chain_scenario(n_cameras=5, seed=0, mus=None, sigmas=None, prob=0.9, **kw) -> ScenarioSpec:
    """Cameras in a corridor, each joined to the next in both directions.

    Every camera has a left door (0), a right door (1) and a side door (2)
    through which people join or leave the network. ``n_cameras - 1``
    adjacent pairs give ``2 (n_cameras - 1)`` directed zone links.
    """
    rng = np.random.default_rng([seed, 7919])
    cams = [_door_camera(f"cam{i}") for i in range(n_cameras)]
    # the outer doors of the end cameras also admit people
    cams[0].zones[0].source_weight = 1.0
    cams[-1].zones[1].source_weight = 1.0
    links = []
    n_links = 2 * (n_cameras - 1)
    mus = list(mus) if mus is not None else list(np.round(rng.uniform(25.0, 45.0, n_links), 1))
    sigmas = list(sigmas) if sigmas is not None else list(np.round(rng.uniform(3.0, 8.0, n_links), 1))
    for i in range(n_cameras - 1):
        a, b = cams[i].camera_id, cams[i + 1].camera_id
        links.append(LinkSpec(a, 1, b, 0, float(mus[2 * i]), float(sigmas[2 * i]), prob))
        links.append(LinkSpec(b, 0, a, 1, float(mus[2 * i + 1]), float(sigmas[2 * i + 1]), prob))
    return ScenarioSpec(cams, links, seed=seed, **kw)


def default_scenario(seed=0, **kw) -> ScenarioSpec:
    """5 cameras, 8 zone links, 300 identities, one simulated hour."""
    return chain_scenario(5, seed=seed, **kw)


def drift_scenario(seed=0, mu_before=30.0, mu_after=40.0, sigma=5.0, init_duration=3600.0,
                   online_duration=7200.0, **kw) -> ScenarioSpec:
    """Two cameras whose forward travel time shifts when the online stage starts."""
    kw.setdefault("n_persons", 900)
    kw.setdefault("min_separation", 0.08)
    spec = chain_scenario(2, seed=seed, mus=[mu_before, mu_before], sigmas=[sigma, sigma],
                          duration=init_duration + online_duration, init_duration=init_duration, **kw)
    spec.changes = [Change("shift", init_duration, spec.links[0].key, mu=mu_after)]
    spec.validate()
    return spec


def lookalike_scenario(seed=0, **kw) -> ScenarioSpec:
    """The default network with identities packed on a 2-d appearance circle.

    Neighbouring identities sit 0.015 apart against the default noise, so
    appearance alone confuses many of them and only the learned travel
    times separate true correspondences from look-alikes.
    """
    kw.setdefault("latent_dim", 2)
    kw.setdefault("min_separation", 0.015)
    return default_scenario(seed, **kw)


def separable_scenario(seed=0, **kw) -> ScenarioSpec:
    """Well separated identities: latent distance ~1.4 against noise 0.25."""
    kw.setdefault("latent_dim", kw.get("feature_dim", 64))
    kw.setdefault("appearance_noise", 0.25)
    kw.setdefault("min_separation", 1.25)
    return chain_scenario(2, seed=seed, **kw)


def perturb(spec: ScenarioSpec, change: Optional[Change]) -> ScenarioSpec:
    """Copy of ``spec`` with one more piecewise change; ``None`` is a no-op."""
    if change is None:
        return replace(spec, changes=list(spec.changes))
    return replace(spec, changes=list(spec.changes) + [change])


# --------------------------------------------------------------------------
# generation


@dataclass
class TruePair:
    exit: Tuple[str, int]
    entry: Tuple[str, int]
    exit_zone: int
    entry_zone: int
    exit_time: float
    entry_time: float
    link: Tuple[str, int, str, int]

    @property
    def delta_t(self) -> float:
        return self.entry_time - self.exit_time


@dataclass
class GroundTruth:
    persons: List[int]
    pairs: List[TruePair]
    links: List[LinkSpec]
    zones: Dict[str, List[dict]]
    split_time: float
    changes: List[Change] = field(default_factory=list)

    def phase(self, p: TruePair) -> str:
        if p.entry_time < self.split_time:
            return "init"
        if p.exit_time >= self.split_time:
            return "online"
        return "boundary"

    def true_pairs(self, phase: Optional[str] = None) -> List[Tuple[tuple, tuple]]:
        return [(p.exit, p.entry) for p in self.pairs if phase is None or self.phase(p) == phase]

    def pair_counts(self, phase: Optional[str] = None) -> Dict[Tuple[str, str], int]:
        """True matching pairs per (exit camera, entry camera)."""
        out = defaultdict(int)
        for p in self.pairs:
            if phase is None or self.phase(p) == phase:
                out[(p.exit[0], p.entry[0])] += 1
        return dict(out)

    def link_samples(self, link, phase=None, after=None) -> np.ndarray:
        return np.array([p.delta_t for p in self.pairs if p.link == tuple(link)
                         and (phase is None or self.phase(p) == phase)
                         and (after is None or p.exit_time >= after)])

    def link_model(self, link, phase=None, after=None, empirical=True) -> GaussianModel:
        """Travel-time model of a true link: sample moments or the nominal spec."""
        link = tuple(link)
        x = self.link_samples(link, phase, after)
        if empirical and x.size >= 2:
            return GaussianModel(float(x.mean()), float(max(x.std(), 1e-6)))
        spec = next(l for l in self.links if l.key == link)
        mu, sigma = spec.mu, spec.sigma
        for ch in self.changes:
            if tuple(ch.link) == link and ch.kind == "shift" and after is not None and after >= ch.t0:
                mu = ch.mu if ch.mu is not None else mu
                sigma = ch.sigma if ch.sigma is not None else sigma
        return GaussianModel(mu, sigma)

    def zone_centers(self, camera_id) -> Dict[int, Tuple[float, float]]:
        return {z["zone_id"]: tuple(z["center"]) for z in self.zones[camera_id]}

    def to_dict(self) -> dict:
        return {
            "persons": self.persons,
            "split_time": self.split_time,
            "links": [asdict(l) for l in self.links],
            "zones": self.zones,
            "changes": [asdict(c) for c in self.changes],
            "pairs": [
                {"exit": list(p.exit), "entry": list(p.entry), "exit_zone": p.exit_zone,
                 "entry_zone": p.entry_zone, "exit_time": p.exit_time, "entry_time": p.entry_time,
                 "link": list(p.link)}
                for p in self.pairs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        pairs = [TruePair(tuple(p["exit"]), tuple(p["entry"]), p["exit_zone"], p["entry_zone"],
                          p["exit_time"], p["entry_time"], tuple(p["link"])) for p in d["pairs"]]
        return cls(list(d["persons"]), pairs, [LinkSpec(**l) for l in d["links"]], d["zones"],
                   d["split_time"], [Change(**{**c, "link": tuple(c["link"])}) for c in d.get("changes", [])])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def identity_latents(n, dim, latent_dim, min_separation, rng, max_rounds=2000) -> np.ndarray:
    """Unit vectors in a random ``latent_dim`` subspace, pushed apart until
    every pair is at least ``min_separation`` apart."""
    Z = rng.normal(size=(n, latent_dim))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    if n > 1 and min_separation > 0:
        for _ in range(max_rounds):
            # unit rows: |a - b|^2 = 2 - 2 a.b
            D = np.sqrt(np.maximum(2.0 - 2.0 * (Z @ Z.T), 0.0))
            np.fill_diagonal(D, 2.0 * min_separation + 2.0)
            if D.min() >= min_separation:
                break
            # springs between pairs closer than a small margin over the target
            reach = 1.02 * min_separation
            W = np.where(D < reach, (reach - D) / np.maximum(D, 1e-9), 0.0)
            Z = Z + 0.5 * (W.sum(axis=1)[:, None] * Z - W @ Z)
            Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        else:
            raise ScenarioError(
                f"invalid scenario field 'min_separation': {min_separation} is infeasible for "
                f"{n} identities in {latent_dim} dimensions")
    if latent_dim == dim:
        return Z
    basis, _ = np.linalg.qr(rng.normal(size=(dim, latent_dim)))
    return Z @ basis.T


def _truncated(rng, mean, std, lo, hi):
    a, b = (lo - mean) / std, (hi - mean) / std
    return float(truncnorm.rvs(a, b, loc=mean, scale=std, random_state=rng))


def generate(spec: ScenarioSpec):
    """Dataset (camera id -> tracklets, by entry time) and its ground truth.

    People arrive uniformly over the simulated clock through doors with a
    positive ``source_weight``, cross each camera to another door and
    follow a link from it with the link's routing probability.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    latents = identity_latents(spec.n_persons, spec.feature_dim, spec.latent_dim, spec.min_separation, rng)
    cams = {c.camera_id: c for c in spec.cameras}
    doors = {(c.camera_id, z.zone_id): z for c in spec.cameras for z in c.zones}
    sources = [(c.camera_id, z.zone_id) for c in spec.cameras for z in c.zones if z.source_weight > 0]
    src_w = np.array([doors[s].source_weight for s in sources])
    out_links = defaultdict(list)
    for l in spec.links:
        out_links[(l.src_camera, l.src_zone)].append(l)
    step = 1.0 / spec.observation_rate
    noise = spec.appearance_noise / math.sqrt(spec.feature_dim)
    bw, bh = spec.box_size

    arrivals = np.sort(rng.uniform(0.0, spec.duration, spec.n_persons))
    tracks: Dict[str, List[Tracklet]] = OrderedDict((c.camera_id, []) for c in spec.cameras)
    pairs: List[TruePair] = []
    for pid, t in enumerate(arrivals):
        cam, door = sources[rng.choice(len(sources), p=src_w / src_w.sum())]
        visited = set()
        while cam not in visited and t < spec.duration:
            visited.add(cam)
            dwell = _truncated(rng, spec.dwell_mean, spec.dwell_std, spec.dwell_min, spec.dwell_max)
            others = [z for z in cams[cam].zones if z.zone_id != door] or cams[cam].zones
            w = np.array([z.exit_weight for z in others], dtype=float)
            out_door = others[rng.choice(len(others), p=w / w.sum())].zone_id
            n_obs = int(math.floor(dwell / step)) + 1
            ts = t + step * np.arange(n_obs)
            p0 = rng.normal(doors[(cam, door)].center, doors[(cam, door)].std)
            p1 = rng.normal(doors[(cam, out_door)].center, doors[(cam, out_door)].std)
            frac = np.linspace(0.0, 1.0, n_obs)[:, None]
            centers = p0 + frac * (p1 - p0)
            boxes = np.column_stack([centers[:, 0] - bw / 2, centers[:, 1] - bh / 2,
                                     np.full(n_obs, bw), np.full(n_obs, bh)])
            X = latents[pid] + rng.normal(scale=noise, size=(n_obs, spec.feature_dim))
            trk = validate_tracklet(make_tracklet(cam, pid, ts, X, boxes))
            tracks[cam].append(trk)
            # routing
            t_exit = float(ts[-1])
            u = rng.uniform()
            nxt = None
            if rng.uniform() >= spec.exit_probability:
                acc = 0.0
                for l in out_links.get((cam, out_door), []):
                    prob, mu, sigma = _link_now(spec, l, t_exit)
                    acc += prob
                    if u < acc:
                        nxt = (l, mu, sigma)
                        break
            if nxt is None:
                break
            l, mu, sigma = nxt
            dt = float(rng.normal(mu, sigma))
            if mu >= 0:
                dt = max(dt, step)  # overlapping views (mu < 0) may re-appear early
            t_entry = t_exit + dt
            if l.dst_camera in visited or t_entry >= spec.duration:
                break
            pairs.append(TruePair((cam, pid), (l.dst_camera, pid), out_door, l.dst_zone,
                                  t_exit, t_entry, l.key))
            cam, door, t = l.dst_camera, l.dst_zone, t_entry
    for cam in tracks:
        tracks[cam].sort(key=lambda k: (k.entry_time, k.person_id))
    zones = {c.camera_id: [{"zone_id": z.zone_id, "center": list(z.center), "std": z.std}
                           for z in c.zones] for c in spec.cameras}
    gt = GroundTruth(list(range(spec.n_persons)), pairs, list(spec.links), zones, spec.split_time,
                     list(spec.changes))
    return tracks, gt


def _link_now(spec: ScenarioSpec, link: LinkSpec, t: float):
    prob, mu, sigma = link.prob, link.mu, link.sigma
    for ch in sorted(spec.changes, key=lambda c: c.t0):
        if tuple(ch.link) != link.key or t < ch.t0:
            continue
        if ch.kind == "remove":
            prob = 0.0
        else:
            mu = ch.mu if ch.mu is not None else mu
            sigma = ch.sigma if ch.sigma is not None else sigma
    return prob, mu, sigma


def split_dataset(data: Dict[str, List[Tracklet]], t_split: float):
    """(init, online) by tracklet entry time."""
    init = OrderedDict((c, [t for t in ts if t.entry_time < t_split]) for c, ts in data.items())
    online = OrderedDict((c, [t for t in ts if t.entry_time >= t_split]) for c, ts in data.items())
    return init, online


def export_scenario(spec: ScenarioSpec, out_dir, data=None, gt=None) -> Path:
    """Write ``init/`` (and ``online/`` when the spec has an online stage),
    ``ground_truth.json`` and ``scenario.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data, gt = generate(spec)
    init, online = split_dataset(data, spec.split_time)
    write_dataset(init, out / "init", feature_dim=spec.feature_dim)
    if spec.split_time < spec.duration:
        write_dataset(online, out / "online", epoch=spec.split_time, feature_dim=spec.feature_dim)
    gt.save(out / "ground_truth.json")
    save_spec(spec, out / "scenario.json")
    return out
