"""Domain types shared across the pipeline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Optional, Tuple

import numpy as np


class CamTopoError(Exception):
    """Base class for library errors."""


class ValidationError(CamTopoError, ValueError):
    pass


class EmptyTracklet(ValidationError):
    pass


class InvalidFeature(ValidationError):
    pass


class FeatureDimMismatch(ValidationError):
    pass


class InvalidBox(ValidationError):
    pass


class EmptyGallery(ValidationError):
    pass


class TrackletOrderWarning(UserWarning):
    pass


_UNIT_TOL = 4 * np.finfo(float).eps


def normalize_feature(raw) -> np.ndarray:
    """Return ``raw`` scaled to unit L2 norm.

    Vectors whose norm is already 1 to within a few ulps are returned
    unchanged, which keeps the operation idempotent bit for bit.
    """
    v = np.asarray(raw, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise InvalidFeature("feature must be a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise InvalidFeature("feature contains non-finite values")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InvalidFeature("cannot normalize a zero vector")
    if abs(norm - 1.0) <= _UNIT_TOL:
        return v
    return v / norm


def normalize_rows(raw) -> np.ndarray:
    X = np.asarray(raw, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidFeature("feature matrix must be 2-d with d >= 1")
    if not np.all(np.isfinite(X)):
        raise InvalidFeature("feature matrix contains non-finite values")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise InvalidFeature("cannot normalize a zero vector")
    keep = np.abs(norms - 1.0) <= _UNIT_TOL
    scale = np.where(keep, 1.0, norms)
    return X / scale[:, None]


@dataclass(frozen=True)
class Observation:
    camera_id: str
    timestamp: float
    feature: np.ndarray
    box: Optional[Tuple[float, float, float, float]] = None


def _box_center(box) -> Tuple[float, float]:
    x, y, w, h = box
    return (float(x + w / 2.0), float(y + h / 2.0))


@dataclass(frozen=True, eq=False)
class Tracklet:
    """One identity's track inside a single camera.

    Observations are stored column-wise: ``timestamps`` (K,), ``features``
    (K, d) and optional ``boxes`` (K, 4) as (x, y, w, h) pixels.
    """

    camera_id: str
    person_id: int
    timestamps: np.ndarray
    features: np.ndarray
    boxes: Optional[np.ndarray] = None
    entry_point: Optional[Tuple[float, float]] = None
    exit_point: Optional[Tuple[float, float]] = None

    @property
    def key(self) -> Tuple[str, int]:
        return (self.camera_id, self.person_id)

    @property
    def entry_time(self) -> float:
        return float(self.timestamps[0])

    @property
    def exit_time(self) -> float:
        return float(self.timestamps[-1])

    @property
    def n_observations(self) -> int:
        return int(len(self.timestamps))

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def observations(self) -> Iterator[Observation]:
        for k in range(self.n_observations):
            box = None if self.boxes is None else tuple(float(b) for b in self.boxes[k])
            yield Observation(self.camera_id, float(self.timestamps[k]), self.features[k], box)

    def subset(self, index) -> "Tracklet":
        index = np.asarray(index)
        return replace(
            self,
            timestamps=self.timestamps[index],
            features=self.features[index],
            boxes=None if self.boxes is None else self.boxes[index],
        )

    def equals(self, other: "Tracklet") -> bool:
        if self.key != other.key or self.entry_point != other.entry_point:
            return False
        if self.exit_point != other.exit_point:
            return False
        if (self.boxes is None) != (other.boxes is None):
            return False
        same = np.array_equal(self.timestamps, other.timestamps) and np.array_equal(
            self.features, other.features
        )
        if self.boxes is not None:
            same = same and np.array_equal(self.boxes, other.boxes)
        return bool(same)


def make_tracklet(camera_id, person_id, timestamps, features, boxes=None,
                  entry_point=None, exit_point=None) -> Tracklet:
    return Tracklet(
        camera_id=str(camera_id),
        person_id=int(person_id),
        timestamps=np.asarray(timestamps, dtype=float).reshape(-1),
        features=np.atleast_2d(np.asarray(features, dtype=float)),
        boxes=None if boxes is None else np.asarray(boxes, dtype=float).reshape(-1, 4),
        entry_point=entry_point,
        exit_point=exit_point,
    )


def validate_tracklet(t: Tracklet, normalize: bool = True) -> Tracklet:
    """Check tracklet invariants and return a clean copy.

    Out-of-order observations are sorted (stable) with a
    :class:`TrackletOrderWarning`; everything else that breaks an invariant
    raises.
    """
    ts = np.asarray(t.timestamps, dtype=float).reshape(-1)
    if ts.size == 0:
        raise EmptyTracklet(f"EmptyTracklet: {t.camera_id}/{t.person_id} has no observations")
    X = np.atleast_2d(np.asarray(t.features, dtype=float))
    if X.shape[0] != ts.size:
        raise ValidationError("timestamps and features disagree in length")
    if not np.all(np.isfinite(ts)) or np.any(ts < 0):
        raise ValidationError("timestamps must be finite and non-negative")
    boxes = None if t.boxes is None else np.asarray(t.boxes, dtype=float).reshape(-1, 4)
    if boxes is not None:
        if boxes.shape[0] != ts.size:
            raise ValidationError("boxes and timestamps disagree in length")
        if np.any(boxes[:, 2:] <= 0):
            raise InvalidBox(f"InvalidBox: non-positive box size in {t.camera_id}/{t.person_id}")
    if np.any(np.diff(ts) < 0):
        warnings.warn(
            f"observations of {t.camera_id}/{t.person_id} were out of order; sorted",
            TrackletOrderWarning,
            stacklevel=2,
        )
        order = np.argsort(ts, kind="stable")
        ts, X = ts[order], X[order]
        if boxes is not None:
            boxes = boxes[order]
    if normalize:
        X = normalize_rows(X)
    elif not np.all(np.isfinite(X)):
        raise InvalidFeature("feature matrix contains non-finite values")
    entry_point, exit_point = t.entry_point, t.exit_point
    if boxes is not None:
        entry_point = entry_point or _box_center(boxes[0])
        exit_point = exit_point or _box_center(boxes[-1])
    return Tracklet(t.camera_id, t.person_id, ts, X, boxes, entry_point, exit_point)


@dataclass
class Gallery:
    """Labeled appearance set of one camera (or one entry zone)."""

    camera_id: str
    features: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    time_span: Tuple[float, float]
    zone_id: Optional[int] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels).reshape(-1)
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.labels) != self.features.shape[0] or len(self.timestamps) != len(self.labels):
            raise ValidationError("gallery arrays disagree in length")
        if len(self.timestamps):
            lo, hi = self.time_span
            if self.timestamps.min() < lo or self.timestamps.max() > hi:
                raise ValidationError("gallery timestamp outside time_span")

    @property
    def person_count(self) -> int:
        return int(len(np.unique(self.labels)))

    def __len__(self) -> int:
        return int(len(self.labels))


@dataclass(frozen=True)
class GaussianModel:
    mu: float
    sigma: float
    fit_error: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 <= self.fit_error <= 1.0:
            raise ValidationError("fit_error must lie in [0, 1]")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * ((x - self.mu) / self.sigma) ** 2) / (self.sigma * np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class TransitionDistribution:
    """Normalized histogram of transition times on a grid of width ``bin_width``.

    Bin ``k`` of the array is centered at ``(offset + k) * bin_width``; grids
    with the same bin width are therefore aligned and can be compared bin by
    bin.
    """

    bins: np.ndarray
    bin_width: float
    offset: int
    sample_count: int
    model: Optional[GaussianModel] = None
    confidence: float = 0.0

    @property
    def centers(self) -> np.ndarray:
        return (self.offset + np.arange(len(self.bins))) * self.bin_width

    @property
    def range(self) -> Tuple[float, float]:
        lo = (self.offset - 0.5) * self.bin_width
        return (lo, lo + len(self.bins) * self.bin_width)

    @property
    def counts(self) -> np.ndarray:
        return self.bins * self.sample_count

    @property
    def mean(self) -> float:
        return float(np.dot(self.bins, self.centers))

    def is_empty(self) -> bool:
        return self.sample_count == 0


@dataclass(frozen=True)
class CameraTopology:
    vertices: Tuple[str, ...]
    edges: dict
    valid: frozenset

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ValidationError("camera topology cannot hold self-edges")
        if not set(self.valid) <= set(self.edges):
            raise ValidationError("valid edges must be a subset of edges")


@dataclass(frozen=True, order=True)
class ZoneKey:
    camera_id: str
    zone_id: int
    kind: str


@dataclass
class LinkState:
    """Mutable per-link state owned by the topology and online stages."""

    distribution: TransitionDistribution
    window: float
    bounds: Tuple[float, float]
    confidence: float = 0.0
    iteration: int = 0
    converged: bool = False
    stagnant: int = 0

    @property
    def model(self) -> Optional[GaussianModel]:
        return self.distribution.model


@dataclass
class ZoneTopology:
    vertices: Tuple[ZoneKey, ...] = ()
    edges: dict = field(default_factory=dict)
    valid: set = field(default_factory=set)

    def __post_init__(self):
        for key in self.edges:
            self._check_edge(key)

    @staticmethod
    def _check_edge(key):
        src, dst = key
        if src.kind != "exit" or dst.kind != "entry":
            raise ValidationError(f"zone links must be exit->entry, got {src.kind}->{dst.kind}")
        if src.camera_id == dst.camera_id:
            raise ValidationError("zone links must join different cameras")

    def add_edge(self, key, state: LinkState, valid: bool):
        self._check_edge(key)
        self.edges[key] = state
        if valid:
            self.valid.add(key)
        else:
            self.valid.discard(key)

    def valid_links(self):
        return sorted(self.valid)


@dataclass(frozen=True)
class PipelineConfig:
    """Run parameters. Defaults in the first block are the published values."""

    theta_sim: float = 0.7
    theta_conf: float = 0.4
    initial_window: float = 600.0
    coverage_percent: float = 95.0
    tree_count: int = 10
    max_key_appearances: int = 30
    online_refit_threshold: float = 0.1

    bin_width: float = 1.0
    window_stride_fraction: float = 0.5
    convergence_epsilon: float = 0.01
    max_iterations: int = 10
    candidate_rf_threshold: int = 20
    max_depth: int = 12
    min_samples_split: int = 3
    max_fit_error: float = 0.9
    confidence_time_scale: Optional[float] = None
    min_reliable: int = 10
    refine_spread_floor: Optional[float] = 0.85
    resolve_consecutive: bool = True
    one_to_one: bool = False
    online_memory: Optional[float] = 60.0
    normalize_features: bool = True
    max_zones: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.theta_sim < 1:
            raise ValidationError("theta_sim must lie in (0, 1)")
        if not 0 < self.theta_conf < 1:
            raise ValidationError("theta_conf must lie in (0, 1)")
        if not 0 < self.coverage_percent < 100:
            raise ValidationError("coverage_percent must lie in (0, 100)")
        if self.tree_count < 1:
            raise ValidationError("tree_count must be >= 1")
        if self.initial_window <= 0 or self.bin_width <= 0:
            raise ValidationError("initial_window and bin_width must be positive")
        if not 0 < self.window_stride_fraction < 1:
            raise ValidationError("window_stride_fraction must lie in (0, 1)")
        if self.max_key_appearances < 1:
            raise ValidationError("max_key_appearances must be >= 1")
        if self.online_memory is not None and not self.online_memory > 1:
            raise ValidationError("online_memory must be > 1 when set")
        if self.refine_spread_floor is not None and self.refine_spread_floor < 0:
            raise ValidationError("refine_spread_floor must be >= 0 when set")
        if not 0 <= self.max_fit_error < 1:
            raise ValidationError("max_fit_error must lie in [0, 1)")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


PAPER_DEFAULTS = {
    "theta_sim": 0.7,
    "theta_conf": 0.4,
    "initial_window": 600.0,
    "coverage_percent": 95.0,
    "tree_count": 10,
    "max_key_appearances": 30,
    "online_refit_threshold": 0.1,
}
