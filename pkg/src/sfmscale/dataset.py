"""Dataset interchange: a JSON manifest referencing CSV blocks.

Layout of a dataset directory::

    manifest.json            format marker, units, pose convention, file names
    poses.csv                id,qw,qx,qy,qz,tx,ty,tz
    rig.csv                  qw,qx,qy,qz,tx,ty,tz,fx,fy,cx,cy
    correspondences.csv      i,j,u_i,v_i,u_j,v_j
    grid.csv                 id,row,col              (optional ground truth)

Quaternions are wxyz, re-normalized on ingest; rotations are re-orthonormalized.
Poses are world-to-camera by default; camera-to-world inputs are converted on
load when the manifest says so.  All numeric fields must be finite.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, RigidTransform, orthonormalize
from .solver import StereoRig

FORMAT_NAME = "sfmscale-dataset"
FORMAT_VERSION = 1

MANIFEST = "manifest.json"
POSES_CSV = "poses.csv"
RIG_CSV = "rig.csv"
CORRESPONDENCES_CSV = "correspondences.csv"
GRID_CSV = "grid.csv"


class ParseError(ValueError):
    """Malformed file content; the message carries a file/record locator."""


class ValidationError(ValueError):
    """Structurally valid input that breaks a dataset invariant."""


@dataclass(frozen=True)
class GridGroundTruth:
    """Known camera grid: viewpoint id -> (row, col), spaced `pitch` apart."""

    cells: dict[int, tuple[int, int]]
    pitch: float

    def __post_init__(self):
        if not self.pitch > 0:
            raise ValidationError("grid pitch must be positive")
        object.__setattr__(
            self,
            "cells",
            {int(k): (int(r), int(c)) for k, (r, c) in self.cells.items()},
        )

    def distance(self, i: int, j: int) -> float:
        """True camera separation from integer grid offsets."""
        ri, ci = self.cells[i]
        rj, cj = self.cells[j]
        return self.pitch * math.hypot(ri - rj, ci - cj)

    @property
    def viewpoints(self) -> tuple[int, ...]:
        return tuple(sorted(self.cells))


@dataclass(frozen=True)
class Dataset:
    """Everything one estimation run consumes."""

    poses: dict[int, RigidTransform]
    rig: StereoRig
    correspondences: dict[tuple[int, int], np.ndarray]
    ground_truth: GridGroundTruth | None = None
    up_to_scale: bool = True
    units: str = "scene"

    def __post_init__(self):
        for (i, j), block in self.correspondences.items():
            arr = np.asarray(block, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 4 or len(arr) == 0:
                raise ValidationError(
                    f"correspondence block ({i},{j}) must be a non-empty (n, 4) array"
                )
            if not np.isfinite(arr).all():
                raise ValidationError(f"non-finite pixel in correspondence block ({i},{j})")
            for v in (i, j):
                if v not in self.poses:
                    raise ValidationError(
                        f"correspondence pair ({i},{j}) references unknown viewpoint {v}"
                    )
        if self.ground_truth is not None:
            for v in self.ground_truth.cells:
                if v not in self.poses:
                    raise ValidationError(
                        f"ground truth references unknown viewpoint {v}"
                    )


def _require_finite(values, where: str):
    for v in values:
        if not math.isfinite(v):
            raise ParseError(f"non-finite value in {where}")


def _quat_to_rotation(qw, qx, qy, qz, where: str) -> np.ndarray:
    norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if norm < 1e-12:
        raise ParseError(f"zero-norm quaternion in {where}")
    w, x, y, z = qw / norm, qx / norm, qy / norm, qz / norm
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return orthonormalize(r)


def _rotation_to_quat(r: np.ndarray) -> tuple[float, float, float, float]:
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        return (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    i = int(np.argmax(np.diag(r)))
    if i == 0:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif i == 1:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    if q[0] < 0:
        q = tuple(-v for v in q)
    return q


def _read_csv(path: Path, expected_header: list[str]):
    try:
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header != expected_header:
                raise ParseError(
                    f"{path.name}: expected header {','.join(expected_header)}"
                )
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(expected_header):
                    raise ParseError(f"{path.name}:{line_no}: wrong field count")
                try:
                    yield line_no, [float(v) for v in row]
                except ValueError as exc:
                    raise ParseError(f"{path.name}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    """Load and fully validate a dataset directory (or manifest path)."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    root = manifest_path.parent
    try:
        with open(manifest_path) as handle:
            manifest = json.load(handle)
    except OSError as exc:
        raise ParseError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path.name}: invalid JSON: {exc}") from exc

    if manifest.get("format") != FORMAT_NAME:
        raise ParseError(f"{manifest_path.name}: unknown format marker")
    convention = manifest.get("pose_convention", "world_to_camera")
    if convention not in ("world_to_camera", "camera_to_world"):
        raise ParseError(f"{manifest_path.name}: unknown pose convention {convention!r}")

    poses: dict[int, RigidTransform] = {}
    for line_no, row in _read_csv(
        root / manifest.get("poses", POSES_CSV),
        ["id", "qw", "qx", "qy", "qz", "tx", "ty", "tz"],
    ):
        _require_finite(row, f"poses.csv:{line_no}")
        view = int(row[0])
        if view in poses:
            raise ValidationError(f"duplicate viewpoint id {view}")
        rotation = _quat_to_rotation(*row[1:5], where=f"poses.csv:{line_no}")
        pose = RigidTransform(rotation, row[5:8])
        if convention == "camera_to_world":
            pose = pose.inverse()
        poses[view] = pose
    if not poses:
        raise ValidationError("dataset has no poses")

    rig_rows = list(
        _read_csv(
            root / manifest.get("rig", RIG_CSV),
            ["qw", "qx", "qy", "qz", "tx", "ty", "tz", "fx", "fy", "cx", "cy"],
        )
    )
    if len(rig_rows) != 1:
        raise ParseError("rig.csv must contain exactly one record")
    _, rig_row = rig_rows[0]
    _require_finite(rig_row, "rig.csv")
    rig = StereoRig(
        RigidTransform(_quat_to_rotation(*rig_row[0:4], where="rig.csv"), rig_row[4:7]),
        Intrinsics(*rig_row[7:11]),
    )

    blocks: dict[tuple[int, int], list] = {}
    for line_no, row in _read_csv(
        root / manifest.get("correspondences", CORRESPONDENCES_CSV),
        ["i", "j", "u_i", "v_i", "u_j", "v_j"],
    ):
        _require_finite(row, f"correspondences.csv:{line_no}")
        blocks.setdefault((int(row[0]), int(row[1])), []).append(row[2:6])
    correspondences = {
        pair: np.array(rows, dtype=float) for pair, rows in blocks.items()
    }

    ground_truth = None
    gt_section = manifest.get("ground_truth")
    if gt_section is not None:
        cells = {}
        for line_no, row in _read_csv(
            root / gt_section.get("file", GRID_CSV), ["id", "row", "col"]
        ):
            _require_finite(row, f"grid.csv:{line_no}")
            view = int(row[0])
            if view in cells:
                raise ValidationError(f"duplicate grid entry for viewpoint {view}")
            cells[view] = (int(row[1]), int(row[2]))
        ground_truth = GridGroundTruth(cells, float(gt_section.get("pitch", 0.0)))

    return Dataset(
        poses=poses,
        rig=rig,
        correspondences=correspondences,
        ground_truth=ground_truth,
        up_to_scale=bool(manifest.get("up_to_scale", True)),
        units=str(manifest.get("units", "scene")),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write a dataset directory; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    with open(root / POSES_CSV, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for view in sorted(dataset.poses):
            pose = dataset.poses[view]
            q = _rotation_to_quat(pose.rotation)
            writer.writerow(
                [view, *(repr(float(v)) for v in q), *(repr(float(v)) for v in pose.translation)]
            )

    with open(root / RIG_CSV, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["qw", "qx", "qy", "qz", "tx", "ty", "tz", "fx", "fy", "cx", "cy"])
        q = _rotation_to_quat(dataset.rig.extrinsic.rotation)
        k = dataset.rig.intrinsics_secondary
        writer.writerow(
            [
                *(repr(float(v)) for v in q),
                *(repr(float(v)) for v in dataset.rig.extrinsic.translation),
                repr(float(k.fx)), repr(float(k.fy)), repr(float(k.cx)), repr(float(k.cy)),
            ]
        )

    with open(root / CORRESPONDENCES_CSV, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["i", "j", "u_i", "v_i", "u_j", "v_j"])
        for (i, j) in sorted(dataset.correspondences):
            for row in dataset.correspondences[(i, j)]:
                writer.writerow([i, j, *(repr(float(v)) for v in row)])

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "units": dataset.units,
        "pose_convention": "world_to_camera",
        "up_to_scale": dataset.up_to_scale,
        "poses": POSES_CSV,
        "rig": RIG_CSV,
        "correspondences": CORRESPONDENCES_CSV,
    }
    if dataset.ground_truth is not None:
        manifest["ground_truth"] = {"file": GRID_CSV, "pitch": dataset.ground_truth.pitch}
        with open(root / GRID_CSV, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["id", "row", "col"])
            for view in dataset.ground_truth.viewpoints:
                r, c = dataset.ground_truth.cells[view]
                writer.writerow([view, r, c])

    with open(root / MANIFEST, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return root / MANIFEST
