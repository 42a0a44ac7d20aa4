"""Gaussian parameter storage and sub-maps."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose, quat_normalize, quat_to_matrix

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    """A single anisotropic splat in unconstrained storage."""

    mean: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def realize_covariance(g: Gaussian3D) -> np.ndarray:
    """World-space covariance R S S^T R^T with S = diag(exp(log_scales))."""
    R = quat_to_matrix(quat_normalize(g.rotation))
    M = R * np.exp(np.asarray(g.log_scales, dtype=np.float64))[None, :]
    return M @ M.T


def covariances(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched version of realize_covariance, (N, 3, 3)."""
    R = quat_to_matrix(quat_normalize(quats))
    M = R * np.exp(log_scales)[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


class GaussianCloud:
    """Struct-of-arrays collection of Gaussians.

    Arrays are float64 and owned by the cloud; the optimizer updates them in
    place through `params()`.
    """

    def __init__(self, means=None, quats=None, log_scales=None, opacity_logits=None, colors=None):
        n = 0 if means is None else len(means)
        self.means = _arr(means, (n, 3))
        self.quats = _arr(quats, (n, 4)) if quats is not None else np.tile([1.0, 0, 0, 0], (n, 1))
        self.log_scales = _arr(log_scales, (n, 3))
        self.opacity_logits = _arr(opacity_logits, (n,))
        self.colors = _arr(colors, (n, 3)) if colors is not None else np.full((n, 3), 0.5)
        for name in PARAM_NAMES:
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def from_list(cls, gaussians: list[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            return cls()
        return cls(
            np.array([g.mean for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.log_scales for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.array([g.color for g in gaussians]),
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(),
            self.quats[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, name).copy() for name in PARAM_NAMES))

    def append(self, other: "GaussianCloud") -> None:
        for name in PARAM_NAMES:
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, name)[index].copy() for name in PARAM_NAMES))

    def keep(self, mask: np.ndarray) -> None:
        for name in PARAM_NAMES:
            setattr(self, name, getattr(self, name)[mask])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def packed(self) -> np.ndarray:
        """(N, 14) rows: mean, quat, log_scales, opacity_logit, color."""
        return np.concatenate(
            [self.means, self.quats, self.log_scales, self.opacity_logits[:, None], self.colors], axis=1
        )

    @classmethod
    def from_packed(cls, rows: np.ndarray) -> "GaussianCloud":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 14)
        return cls(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:14])


def _arr(a, shape) -> np.ndarray:
    if a is None:
        return np.zeros(shape)
    return np.array(a, dtype=np.float64).reshape(shape)


@dataclass
class Keyframe:
    index: int
    pose: Pose
    frame: Optional[object] = None  # RGBDFrame; dropped once a sub-map is finalized


@dataclass
class SubMap:
    gaussians: GaussianCloud = field(default_factory=GaussianCloud)
    anchor_pose: Pose = field(default_factory=Pose.identity)
    keyframes: list[Keyframe] = field(default_factory=list)

    def add_keyframe(self, kf: Keyframe) -> None:
        if not self.keyframes:
            self.anchor_pose = kf.pose
        self.keyframes.append(kf)
