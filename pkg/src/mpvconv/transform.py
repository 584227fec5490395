"""Coordinate normalization into the unit cube."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class RawCloud:
    """A point cloud in world units.

    ``coords`` is ``[N, 3]``, ``features`` is ``[N, C1]`` and ``labels``, when
    present, holds one integer part id per point.
    """

    coords: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.features = np.asarray(self.features)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be [N>=1, 3], got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if self.features.shape[0] != self.coords.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows for {self.coords.shape[0]} points"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError(f"labels must be [N], got {self.labels.shape}")

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm) -> "RawCloud":
        return RawCloud(
            self.coords[perm],
            self.features[perm],
            None if self.labels is None else self.labels[perm],
            self.num_classes,
        )


@dataclass(eq=False)
class NormalizedCloud:
    coords_hat: np.ndarray
    features: np.ndarray
    centroid: np.ndarray
    radius: float


def normalize_coords(cloud: RawCloud) -> NormalizedCloud:
    """Center on the mean point and scale so the farthest point sits at
    distance 0.5 from ``(0.5, 0.5, 0.5)``.

    A cloud whose points all coincide maps every point to the cube center.
    Features are passed through untouched. Arithmetic is done in float64
    regardless of the input dtype.
    """
    coords = cloud.coords.astype(np.float64)
    centroid = coords.mean(axis=0)
    centered = coords - centroid
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if radius == 0.0 or np.all(coords == coords[0]):
        radius = 0.0
        coords_hat = np.full_like(centered, 0.5)
    else:
        coords_hat = centered / (2.0 * radius) + 0.5
        # the farthest point may overshoot by an ulp
        np.clip(coords_hat, 0.0, 1.0, out=coords_hat)
    return NormalizedCloud(coords_hat, cloud.features, centroid, radius)
