"""Domain types, label taxonomy, and validation shared by all modules.

All container types are immutable after construction (backing arrays are
marked read-only) and therefore safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyFrame,
    InvalidPose,
    LengthMismatch,
    NonFiniteCoordinate,
    UnknownRawId,
)

#: Sentinel for "no label"; never a valid class id and excluded from C.
IGNORE = -1

#: Canonical 7-class taxonomy used by the default benchmark streams.
CANONICAL_CLASSES = (
    "vehicle",
    "pedestrian",
    "road",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
)

#: SemanticKITTI raw label id -> canonical id (or IGNORE).
SEMANTIC_KITTI_TO_CANONICAL = {
    0: IGNORE,   # unlabelled
    1: 0,        # car -> vehicle
    2: IGNORE,   # bicycle
    3: IGNORE,   # motorcycle
    4: IGNORE,   # truck
    5: IGNORE,   # other-vehicle
    6: 1,        # person -> pedestrian
    7: IGNORE,   # bicyclist
    8: IGNORE,   # motorcyclist
    9: 2,        # road
    10: 2,       # parking -> road
    11: 3,       # sidewalk
    12: IGNORE,  # other-ground
    13: 5,       # building -> manmade
    14: 5,       # fence -> manmade
    15: 6,       # vegetation
    16: 6,       # trunk -> vegetation
    17: 4,       # terrain
    18: 5,       # pole -> manmade
    19: 5,       # traffic-sign -> manmade
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    """One time-step of a point cloud stream.

    points are N x 3 sensor-frame coordinates in meters, pose is the 4 x 4
    rigid sensor-to-world transform, gt_labels (optional) holds class ids
    or IGNORE.
    """

    frame_id: int
    points: np.ndarray
    pose: np.ndarray
    gt_labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _freeze(np.asarray(self.points, dtype=np.float64)))
        object.__setattr__(self, "pose", _freeze(np.asarray(self.pose, dtype=np.float64)))
        if self.gt_labels is not None:
            object.__setattr__(self, "gt_labels", _freeze(np.asarray(self.gt_labels, dtype=np.int64)))

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def validate_frame(frame: Frame) -> None:
    """Raise unless all Frame invariants hold."""
    pts = frame.points
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise EmptyFrame(f"frame {frame.frame_id}: expected non-empty N x 3 points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteCoordinate(f"frame {frame.frame_id}: non-finite coordinate")
    pose = frame.pose
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        raise InvalidPose(f"frame {frame.frame_id}: pose must be a finite 4x4 matrix")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise InvalidPose(f"frame {frame.frame_id}: last pose row must be [0,0,0,1]")
    rot = pose[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-6:
        raise InvalidPose(f"frame {frame.frame_id}: rotation block is not orthonormal")
    if np.linalg.det(rot) <= 0:
        raise InvalidPose(f"frame {frame.frame_id}: rotation block is not proper (det <= 0)")
    if frame.gt_labels is not None and frame.gt_labels.shape != (pts.shape[0],):
        raise LengthMismatch(f"frame {frame.frame_id}: gt label count != point count")


@dataclass(frozen=True)
class ProbabilityField:
    """Per-point class probabilities: N x C rows on the simplex."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise LengthMismatch(f"probabilities must be N x C, got shape {v.shape}")
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
            raise ValueError("probability entries must lie in [0, 1]")
        if np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("probability rows must sum to 1 within 1e-6")
        object.__setattr__(self, "values", _freeze(v))

    def __len__(self):
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelField:
    """Per-point discrete labels in {0,...,C-1} or IGNORE."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 1:
            raise LengthMismatch(f"labels must be a vector, got shape {v.shape}")
        if np.any(v < IGNORE):
            raise ValueError("labels must be class ids or the IGNORE sentinel")
        object.__setattr__(self, "values", _freeze(v))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ConfidenceField:
    """Per-point scalar confidences in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise LengthMismatch(f"confidences must be a vector, got shape {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SelectionMask:
    """Boolean per-point selection mask."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=bool)
        if v.ndim != 1:
            raise LengthMismatch(f"mask must be a vector, got shape {v.shape}")
        object.__setattr__(self, "values", _freeze(v))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ClassMap:
    """Mapping from raw dataset label ids to a dense canonical taxonomy."""

    canonical_names: tuple
    raw_to_canonical: dict

    def __post_init__(self):
        object.__setattr__(self, "canonical_names", tuple(self.canonical_names))
        c = self.num_classes
        for raw, canon in self.raw_to_canonical.items():
            if canon != IGNORE and not (0 <= canon < c):
                raise ValueError(f"raw id {raw} maps to out-of-range canonical id {canon}")

    @property
    def num_classes(self) -> int:
        return len(self.canonical_names)

    @classmethod
    def identity(cls, num_classes: int, names=None) -> "ClassMap":
        if names is None:
            names = tuple(f"class{i}" for i in range(num_classes))
        return cls(tuple(names), {i: i for i in range(num_classes)})

    @classmethod
    def canonical(cls) -> "ClassMap":
        """Identity map over the default 7-class taxonomy."""
        return cls(CANONICAL_CLASSES, {i: i for i in range(len(CANONICAL_CLASSES))})

    @classmethod
    def semantic_kitti(cls) -> "ClassMap":
        return cls(CANONICAL_CLASSES, dict(SEMANTIC_KITTI_TO_CANONICAL))

    @classmethod
    def from_file(cls, path, canonical_names=CANONICAL_CLASSES) -> "ClassMap":
        """Load a plain-text two-column table "raw_id canonical_id".

        IGNORE is spelled as -1; lines starting with '#' are comments.
        """
        table = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'raw_id canonical_id'")
            raw, canon = int(parts[0]), int(parts[1])
            if raw in table:
                raise ValueError(f"{path}:{lineno}: raw id {raw} mapped twice")
            table[raw] = canon
        return cls(tuple(canonical_names), table)


def remap_labels(raw, class_map: ClassMap) -> LabelField:
    """Replace raw dataset ids by canonical ids (or IGNORE)."""
    raw = np.asarray(raw, dtype=np.int64)
    present = np.unique(raw)
    unknown = [int(r) for r in present if int(r) not in class_map.raw_to_canonical]
    if unknown:
        raise UnknownRawId(f"raw ids {unknown} absent from the class map")
    lut_size = int(present.max()) + 1 if present.size else 1
    lut = np.full(lut_size, IGNORE, dtype=np.int64)
    for r, c in class_map.raw_to_canonical.items():
        if 0 <= r < lut_size:
            lut[r] = c
    if np.any(raw < 0):
        raise UnknownRawId("negative raw ids are not mappable")
    return LabelField(lut[raw])
