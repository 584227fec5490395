"""Point-cloud files, the synthetic hemisphere dataset and prediction dumps.

Cloud files are UTF-8 text::

    MPV1 <N> <C1> <K>
    x y z f1 ... fC1 label        (N lines)

Prediction dumps are::

    MPVPRED <N>
    x y z true pred               (N lines; true is -1 for unlabelled clouds)
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transform import RawCloud

CLOUD_MAGIC = "MPV1"
PRED_MAGIC = "MPVPRED"
CLOUD_SUFFIX = ".mpv"


class CloudFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(eq=False)
class Dataset:
    samples: list[RawCloud]
    class_count: int
    part_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if not self.samples:
            return
        c1 = self.samples[0].num_features
        for i, s in enumerate(self.samples):
            if s.num_features != c1:
                raise ValueError(f"sample {i} has {s.num_features} feature channels, expected {c1}")
            if s.labels is not None and s.labels.size and (
                s.labels.min() < 0 or s.labels.max() >= self.class_count
            ):
                raise ValueError(f"sample {i} has labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def num_features(self) -> int:
        return self.samples[0].num_features


def _fmt(v) -> str:
    return repr(float(v))


def save_cloud(cloud: RawCloud, path, num_classes: int | None = None):
    if cloud.labels is None:
        raise ValueError("cloud files carry a label per point; this cloud has none")
    k = num_classes or cloud.num_classes or int(cloud.labels.max()) + 1
    lines = [f"{CLOUD_MAGIC} {cloud.num_points} {cloud.num_features} {k}"]
    for xyz, f, lab in zip(cloud.coords, cloud.features, cloud.labels):
        lines.append(" ".join([*map(_fmt, xyz), *map(_fmt, f), str(int(lab))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(path, line, magic, n_fields):
    parts = line.split()
    if len(parts) != n_fields or parts[0] != magic:
        raise CloudFormatError(path, 1, f"expected header '{magic}' followed by {n_fields - 1} integers")
    try:
        values = [int(v) for v in parts[1:]]
    except ValueError:
        raise CloudFormatError(path, 1, "header fields must be integers") from None
    return values


def load_cloud(path) -> RawCloud:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CloudFormatError(path, 1, "empty file")
    n, c1, k = _parse_header(path, lines[0], CLOUD_MAGIC, 4)
    if n < 1 or c1 < 0 or k < 2:
        raise CloudFormatError(path, 1, f"invalid header values N={n} C1={c1} K={k}")
    body = list(lines[1:])
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise CloudFormatError(path, len(lines), f"header declares {n} points, found {len(body)}")
    width = 3 + c1 + 1
    coords = np.empty((n, 3))
    feats = np.empty((n, c1))
    labels = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(body):
        lineno = i + 2
        parts = ln.split()
        if len(parts) != width:
            raise CloudFormatError(path, lineno, f"expected {width} columns, found {len(parts)}")
        try:
            vals = [float(v) for v in parts[:-1]]
            lab = int(parts[-1])
        except ValueError as exc:
            raise CloudFormatError(path, lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise CloudFormatError(path, lineno, "non-finite value")
        if not 0 <= lab < k:
            raise CloudFormatError(path, lineno, f"label {lab} outside [0, {k})")
        coords[i] = vals[:3]
        feats[i] = vals[3:]
        labels[i] = lab
    return RawCloud(coords, feats.astype(np.float32), labels, k)


def save_dataset(dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(dataset))))
    for i, cloud in enumerate(dataset.samples):
        save_cloud(cloud, directory / f"cloud_{i:0{width}d}{CLOUD_SUFFIX}", dataset.class_count)


def load_dataset(path) -> Dataset:
    """Load one cloud file or every ``*.mpv`` file of a directory (sorted)."""
    path = Path(path)
    files = sorted(path.glob(f"*{CLOUD_SUFFIX}")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no {CLOUD_SUFFIX} files under {path}")
    clouds = [load_cloud(f) for f in files]
    ks = {c.num_classes for c in clouds}
    if len(ks) != 1:
        raise ValueError(f"cloud files disagree on the class count: {sorted(ks)}")
    return Dataset(clouds, ks.pop())


# ---------------------------------------------------------------------------
# synthetic hemispheres
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 200
    points_per_cloud: int = 512
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.points_per_cloud < 16:
            raise ValueError(f"points_per_cloud must be >= 16, got {self.points_per_cloud}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _yaw(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Two-part unit spheres: label 1 for the upper hemisphere of the
    canonical frame, 0 for the lower.

    Points are uniform on the sphere, jittered by isotropic Gaussian noise,
    then rotated about the vertical axis and translated by a random amount.
    Features are one constant channel.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(spec.n_samples):
        n = spec.points_per_cloud
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        labels = (v[:, 2] > 0).astype(np.int64)
        v = v + rng.normal(0.0, spec.noise_sigma, size=(n, 3)) if spec.noise_sigma else v
        rot = _yaw(rng.uniform(0.0, 2 * math.pi))
        shift = rng.uniform(-1.0, 1.0, size=3)
        coords = v @ rot.T + shift
        samples.append(RawCloud(coords, np.ones((n, 1), np.float32), labels, 2))
    return Dataset(samples, 2, ("lower", "upper"))


# ---------------------------------------------------------------------------
# prediction dumps
# ---------------------------------------------------------------------------


def dump_predictions(cloud: RawCloud, predicted_labels, path):
    pred = np.asarray(predicted_labels).reshape(-1)
    if pred.size != cloud.num_points:
        raise ValueError(
            f"{pred.size} predictions for a cloud of {cloud.num_points} points"
        )
    true = cloud.labels if cloud.labels is not None else np.full(cloud.num_points, -1)
    lines = [f"{PRED_MAGIC} {cloud.num_points}"]
    for xyz, t, p in zip(cloud.coords, true, pred):
        lines.append(f"{_fmt(xyz[0])} {_fmt(xyz[1])} {_fmt(xyz[2])} {int(t)} {int(p)}")
    tmp = f"{path}.tmp{os.getpid()}"
    Path(tmp).write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_predictions(path):
    """Return ``(coords [N,3], true [N], pred [N])`` from a prediction dump."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise CloudFormatError(path, 1, "empty file")
    (n,) = _parse_header(path, lines[0], PRED_MAGIC, 2)
    if len(lines) - 1 != n:
        raise CloudFormatError(path, len(lines), f"header declares {n} points, found {len(lines) - 1}")
    coords = np.empty((n, 3))
    true = np.empty(n, np.int64)
    pred = np.empty(n, np.int64)
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != 5:
            raise CloudFormatError(path, i + 2, f"expected 5 columns, found {len(parts)}")
        coords[i] = [float(v) for v in parts[:3]]
        true[i], pred[i] = int(parts[3]), int(parts[4])
    return coords, true, pred
