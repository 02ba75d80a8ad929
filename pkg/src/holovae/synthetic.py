"""Parametric point-cloud classes used as a desk-scale training benchmark.

Each class is a small labelled point cloud (two point types, ``"A"`` and
``"B"``) drawn with random shape parameters, jittered, centred and randomly
rotated, always inside the unit ball.
"""

from __future__ import annotations

import numpy as np

from .fourier import PointCloud, ZftConfig, zft_point_cloud
from .so3 import Rotation
from .steerable import SteerableTensor, stack

CLASS_NAMES = ("helix", "ring", "shells", "cross", "tetra")
POINT_LABELS = ("A", "B")
R_MAX = 1.0
JITTER = 0.05 * R_MAX


def _helix(rng, n):
    turns = rng.uniform(1.5, 2.0)
    t = np.linspace(0.0, 2 * np.pi * turns, n)
    a = rng.uniform(0.35, 0.45)
    pts = np.stack([a * np.cos(t), a * np.sin(t), np.linspace(-0.6, 0.6, n)], axis=1)
    return pts, (np.arange(n) % 3 == 0).astype(int)


def _ring(rng, n):
    t = np.sort(rng.uniform(0.0, 2 * np.pi, n))
    a = rng.uniform(0.6, 0.75)
    pts = np.stack([a * np.cos(t), a * np.sin(t), np.zeros(n)], axis=1)
    return pts, (t < np.pi / 3).astype(int)


def _shells(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    side = np.where(np.arange(n) < n // 2, 1.0, -1.0)
    r = rng.uniform(0.25, 0.32)
    pts = v * r + np.outer(side, [0.0, 0.0, 0.42])
    return pts, (side > 0).astype(int)


def _cross(rng, n):
    axis = np.arange(n) % 3
    s = rng.uniform(-0.75, 0.75, n)
    pts = np.zeros((n, 3))
    pts[np.arange(n), axis] = s
    return pts, (axis == 0).astype(int)


def _tetra(rng, n):
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3) * 0.6
    which = np.arange(n) % 4
    pts = verts[which] + rng.normal(scale=0.08, size=(n, 3))
    return pts, (which == 0).astype(int)


_MAKERS = (_helix, _ring, _shells, _cross, _tetra)


def make_cloud(cls: int, rng, rotate: bool = True) -> PointCloud:
    n = int(rng.integers(20, 41))
    pts, lab = _MAKERS[cls](rng, n)
    pts = pts + rng.normal(scale=JITTER, size=pts.shape)
    pts -= pts.mean(axis=0)
    r = np.linalg.norm(pts, axis=1).max()
    if r > 0.95 * R_MAX:
        pts *= 0.95 * R_MAX / r
    if rotate:
        pts = Rotation.random(rng).apply(pts)
    labels = np.array(POINT_LABELS)[lab]
    return PointCloud.from_cartesian(pts, labels, POINT_LABELS)


def make_dataset(n: int, seed: int = 0, rotate: bool = True) -> tuple[list[PointCloud], np.ndarray]:
    """``n`` clouds with balanced classes (round-robin), plus class indices."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % len(CLASS_NAMES)
    return [make_cloud(int(c), rng, rotate) for c in y], y


def make_tensors(n: int, seed: int = 0, L: int = 4, N: int = 8, rotate: bool = True) -> tuple[SteerableTensor, np.ndarray]:
    clouds, y = make_dataset(n, seed, rotate)
    cfg = ZftConfig(L, N, R_MAX)
    return stack([zft_point_cloud(c, cfg) for c in clouds]), y
