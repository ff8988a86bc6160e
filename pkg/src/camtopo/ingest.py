"""Dataset files: manifest, per-camera tracklet records and feature matrices."""

from __future__ import annotations

import csv
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .core import (
    FeatureDimMismatch,
    Tracklet,
    ValidationError,
    make_tracklet,
    validate_tracklet,
)

TRACKLET_FIELDS = ("camera_id", "person_id", "frame_timestamp", "x", "y", "w", "h", "feature_index")


class IngestError(ValidationError):
    pass


@dataclass
class CameraEntry:
    camera_id: str
    tracklet_file: str
    feature_file: str


@dataclass
class DatasetManifest:
    cameras: List[CameraEntry] = field(default_factory=list)
    epoch: float = 0.0
    feature_dim: int = 0
    root: Path = Path(".")

    def __post_init__(self):
        ids = [c.camera_id for c in self.cameras]
        if len(ids) != len(set(ids)):
            raise IngestError("camera ids in a manifest must be unique")

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    values, cameras, section = {}, [], None
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if section == "cameras":
            cells = [c.strip() for c in line.split(",")]
            if cells == ["camera_id", "tracklet_file", "feature_file"]:
                continue
            if len(cells) != 3:
                raise IngestError(f"bad camera row in manifest: {raw!r}")
            cameras.append(CameraEntry(*cells))
        else:
            key, sep, value = line.partition("=")
            if not sep:
                raise IngestError(f"bad manifest line: {raw!r}")
            values[key.strip()] = value.strip()
    try:
        epoch = float(values.get("epoch", 0.0))
        dim = int(values["feature_dim"])
    except (KeyError, ValueError) as exc:
        raise IngestError(f"manifest needs numeric epoch and feature_dim: {exc}") from exc
    return DatasetManifest(cameras=cameras, epoch=epoch, feature_dim=dim, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = [
        "# camtopo dataset manifest",
        f"epoch = {manifest.epoch!r}",
        f"feature_dim = {manifest.feature_dim}",
        "",
        "[cameras]",
        "camera_id, tracklet_file, feature_file",
    ]
    lines += [f"{c.camera_id}, {c.tracklet_file}, {c.feature_file}" for c in manifest.cameras]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_features(path, expected_dim=None) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            d, n = int(header[0]), int(header[1])
            data = np.loadtxt(fh, dtype=float, ndmin=2) if n else np.empty((0, d))
    except (OSError, ValueError, IndexError) as exc:
        raise IngestError(f"cannot read feature file {path}: {exc}") from exc
    if expected_dim is not None and d != expected_dim:
        raise FeatureDimMismatch(f"FeatureDimMismatch: {path} has d={d}, manifest says {expected_dim}")
    if data.shape != (n, d):
        raise FeatureDimMismatch(f"FeatureDimMismatch: {path} header says {d}x{n}, body is {data.shape}")
    return data


def write_features(X: np.ndarray, path) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{X.shape[1]} {X.shape[0]}\n")
        np.savetxt(fh, X, fmt="%.17g")


def read_tracklets(path, features: np.ndarray, camera_id=None, normalize=True) -> List[Tracklet]:
    groups: "OrderedDict[Tuple[str, int], list]" = OrderedDict()
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].startswith("#") or row[0] == "camera_id":
                    continue
                if len(row) != len(TRACKLET_FIELDS):
                    raise IngestError(f"{path}:{lineno}: expected {len(TRACKLET_FIELDS)} fields")
                cam, pid = row[0].strip(), row[1].strip()
                if not pid:
                    raise IngestError(f"{path}:{lineno}: MissingLabel (empty person_id)")
                if camera_id is not None and cam != camera_id:
                    raise IngestError(f"{path}:{lineno}: camera {cam!r} in file of {camera_id!r}")
                rec = [float(v) for v in row[2:7]] + [int(row[7])]
                groups.setdefault((cam, int(pid)), []).append(rec)
    except OSError as exc:
        raise IngestError(f"cannot read tracklet file {path}: {exc}") from exc
    except ValueError as exc:
        raise IngestError(f"{path}: malformed record: {exc}") from exc
    out = []
    for (cam, pid), recs in groups.items():
        arr = np.asarray(recs, dtype=float)
        idx = arr[:, 5].astype(np.int64)
        if idx.min() < 0 or idx.max() >= features.shape[0]:
            raise IngestError(f"{path}: feature_index out of range for {cam}/{pid}")
        t = make_tracklet(cam, pid, arr[:, 0], features[idx], boxes=arr[:, 1:5])
        out.append(validate_tracklet(t, normalize=normalize))
    return out


def write_tracklets(tracklets, path) -> np.ndarray:
    """Write tracklet records; returns the feature matrix they index into."""
    rows, feats = [], []
    offset = 0
    for t in tracklets:
        for k in range(t.n_observations):
            box = t.boxes[k] if t.boxes is not None else (0.0, 0.0, 1.0, 1.0)
            rows.append([t.camera_id, t.person_id, repr(float(t.timestamps[k]))]
                        + [repr(float(b)) for b in box] + [offset + k])
        feats.append(t.features)
        offset += t.n_observations
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACKLET_FIELDS)
        writer.writerows(rows)
    return np.vstack(feats) if feats else np.empty((0, 0))


def load_dataset(manifest, normalize=True) -> Dict[str, List[Tracklet]]:
    """Read every camera of a manifest into validated tracklets."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    data: Dict[str, List[Tracklet]] = OrderedDict()
    for cam in manifest.cameras:
        feats = read_features(manifest.path(cam.feature_file), expected_dim=manifest.feature_dim)
        data[cam.camera_id] = read_tracklets(
            manifest.path(cam.tracklet_file), feats, camera_id=cam.camera_id, normalize=normalize
        )
    return data


def write_dataset(dataset: Dict[str, List[Tracklet]], directory, epoch=0.0, feature_dim=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for cam, tracklets in dataset.items():
        tfile, ffile = f"{cam}_tracklets.csv", f"{cam}_features.txt"
        X = write_tracklets(tracklets, directory / tfile)
        if feature_dim is None and X.size:
            feature_dim = X.shape[1]
        if X.size == 0:
            X = np.empty((0, feature_dim or 0))
        write_features(X, directory / ffile)
        entries.append(CameraEntry(cam, tfile, ffile))
    manifest = DatasetManifest(entries, epoch=epoch, feature_dim=int(feature_dim or 0), root=directory)
    return write_manifest(manifest, directory / "manifest.txt")


def select_key_appearances(t: Tracklet, k_max: int) -> Tracklet:
    """Keep up to ``k_max`` mutually distant observations of a tracklet.

    Greedy farthest-point selection in feature space starting from the
    first observation; ties go to the earliest. Output keeps time order.
    """
    if k_max < 1:
        raise ValidationError("k_max must be >= 1")
    n = t.n_observations
    if k_max >= n:
        return t
    X = t.features
    chosen = [0]
    gap = np.linalg.norm(X - X[0], axis=1)
    gap[0] = -np.inf
    for _ in range(k_max - 1):
        nxt = int(np.argmax(gap))
        chosen.append(nxt)
        gap = np.minimum(gap, np.linalg.norm(X - X[nxt], axis=1))
        gap[chosen] = -np.inf
    return t.subset(np.sort(chosen))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
