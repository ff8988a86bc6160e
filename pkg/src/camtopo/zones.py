"""Entry/exit zones learned from tracklet end points."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture
from sklearn.utils.validation import check_is_fitted

from .core import Tracklet, ValidationError, ZoneKey

# added to zone covariances before evaluating likelihoods, pixels^2
LIKELIHOOD_REG = 1.0


@dataclass(frozen=True)
class Zone:
    camera_id: str
    zone_id: int
    center: tuple
    covariance: np.ndarray
    kind: str
    member_count: int

    @property
    def key(self) -> ZoneKey:
        return ZoneKey(self.camera_id, self.zone_id, self.kind)

    def log_likelihood(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)
        cov = self.covariance + LIKELIHOOD_REG * np.eye(2)
        inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        return -0.5 * (np.einsum("ni,ij,nj->n", P, inv, P) + logdet + 2 * np.log(2 * np.pi))

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "zone_id": self.zone_id,
            "kind": self.kind,
            "center": list(self.center),
            "covariance": self.covariance.tolist(),
            "member_count": self.member_count,
        }

    @classmethod
    def from_dict(cls, d) -> "Zone":
        return cls(d["camera_id"], int(d["zone_id"]), tuple(d["center"]),
                   np.asarray(d["covariance"], dtype=float), d["kind"], int(d["member_count"]))


class ZoneLearner(BaseEstimator):
    """Gaussian-mixture clustering of 2-d points, order chosen by BIC.

    ``fit`` takes an (n, 2) array of pixel coordinates; ``predict`` returns
    the index of the most likely fitted cluster per point.
    """

    def __init__(self, max_zones=4, n_init=3, random_state=0):
        self.max_zones = max_zones
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        if X.shape[0] == 0:
            raise ValidationError("no points to cluster")
        n_unique = np.unique(X, axis=0).shape[0]
        k_max = max(1, min(self.max_zones, n_unique, X.shape[0]))
        best, best_bic = None, np.inf
        if k_max == 1:
            labels = np.zeros(X.shape[0], dtype=int)
        else:
            for k in range(1, k_max + 1):
                gm = GaussianMixture(
                    n_components=k,
                    covariance_type="full",
                    n_init=self.n_init,
                    reg_covar=1e-3,
                    random_state=self.random_state,
                )
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    gm.fit(X)
                bic = gm.bic(X)
                if bic < best_bic - 1e-9:
                    best, best_bic = gm, bic
            labels = best.predict(X)
        used = np.unique(labels)
        # relabel clusters by their left-most center so ids are stable
        centers = np.array([X[labels == u].mean(axis=0) for u in used])
        order = np.lexsort((centers[:, 1], centers[:, 0]))
        remap = {int(used[o]): i for i, o in enumerate(order)}
        self.labels_ = np.array([remap[int(lab)] for lab in labels])
        self.centers_ = centers[order]
        self.covariances_ = np.array([_cov(X[self.labels_ == i]) for i in range(len(order))])
        self.counts_ = np.bincount(self.labels_, minlength=len(order))
        self.n_zones_ = len(order)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "centers_")
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        ll = np.column_stack([
            Zone("", i, tuple(c), cov, "", 1).log_likelihood(X)
            for i, (c, cov) in enumerate(zip(self.centers_, self.covariances_))
        ])
        return np.argmax(ll, axis=1)


def _cov(P: np.ndarray) -> np.ndarray:
    if P.shape[0] < 2:
        return np.zeros((2, 2))
    return np.cov(P, rowvar=False, bias=True)


def learn_zones(tracklets: Sequence[Tracklet], max_zones: int = 4, random_state=0) -> List[Zone]:
    """Entry zones from entry points and exit zones from exit points.

    Zone ids are unique within the camera: entry zones first, then exit
    zones.
    """
    tracklets = list(tracklets)
    if not tracklets:
        raise ValidationError("learn_zones needs at least one tracklet")
    camera = tracklets[0].camera_id
    zones: List[Zone] = []
    next_id = 0
    for kind, attr in (("entry", "entry_point"), ("exit", "exit_point")):
        pts = [getattr(t, attr) for t in tracklets if getattr(t, attr) is not None]
        if not pts:
            continue
        learner = ZoneLearner(max_zones=max_zones, random_state=random_state).fit(np.asarray(pts))
        for i in range(learner.n_zones_):
            zones.append(Zone(camera, next_id, tuple(float(c) for c in learner.centers_[i]),
                              learner.covariances_[i], kind, int(learner.counts_[i])))
            next_id += 1
    return zones


def assign_zone(zones: Sequence[Zone], point, kind: str) -> int:
    """Zone id of the given kind with the highest Gaussian likelihood."""
    cands = sorted((z for z in zones if z.kind == kind), key=lambda z: z.zone_id)
    if not cands:
        raise ValidationError(f"no {kind} zone available")
    ll = np.array([float(z.log_likelihood(point)[0]) for z in cands])
    return cands[int(np.argmax(ll))].zone_id


def assign_all(zones: Sequence[Zone], tracklets: Sequence[Tracklet]) -> Dict[tuple, tuple]:
    """Map tracklet key -> (entry zone id, exit zone id); None where undefined."""
    out = {}
    for t in tracklets:
        ent = assign_zone(zones, t.entry_point, "entry") if t.entry_point is not None and any(z.kind == "entry" for z in zones) else None
        ext = assign_zone(zones, t.exit_point, "exit") if t.exit_point is not None and any(z.kind == "exit" for z in zones) else None
        out[t.key] = (ent, ext)
    return out


def export_zones(zones_by_camera: Dict[str, List[Zone]], path) -> None:
    doc = {cam: [z.to_dict() for z in zs] for cam, zs in zones_by_camera.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def load_zones(path) -> Dict[str, List[Zone]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {cam: [Zone.from_dict(z) for z in zs] for cam, zs in doc.items()}
