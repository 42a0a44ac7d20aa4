"""Adam over named parameter groups.

Rows of a parameter array (one row per Gaussian) carry their own step count so
Gaussians appended mid-optimization start with fresh, zero moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamGroupConfig:
    name: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    unit_norm: bool = False  # renormalize rows after each step (quaternions)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"{self.name}: learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"{self.name}: betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"{self.name}: eps must be positive")


MAPPING_GROUPS = (
    ParamGroupConfig("means", 1e-4),
    ParamGroupConfig("quats", 1e-3, unit_norm=True),
    ParamGroupConfig("log_scales", 1e-3),
    ParamGroupConfig("opacity_logits", 5e-2),
    ParamGroupConfig("colors", 2.5e-3),
)

TRACKING_GROUPS = (
    ParamGroupConfig("pose_q", 1e-3, unit_norm=True),
    ParamGroupConfig("pose_t", 2e-3),
)


class _State:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0] if shape else 1, dtype=np.int64)


class Adam:
    def __init__(self, groups):
        self.groups = {g.name: g for g in groups}
        self.state: dict[str, _State] = {}
        self.skipped = 0
        self.steps = 0

    def _state_for(self, name, p):
        st = self.state.get(name)
        if st is None or st.m.shape != p.shape:
            if st is not None and st.m.shape[1:] == p.shape[1:] and len(st.m) < len(p):
                self.grow(name, len(p) - len(st.m))
                st = self.state[name]
            else:
                st = self.state[name] = _State(p.shape)
        return st

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update every array in `params` in place from the matching gradient."""
        self.steps += 1
        for name, p in params.items():
            cfg = self.groups.get(name)
            g = grads.get(name)
            if cfg is None or g is None:
                continue
            st = self._state_for(name, p)
            rows = p.reshape(p.shape[0], -1) if p.ndim else p.reshape(1, 1)
            g = np.asarray(g, dtype=np.float64).reshape(rows.shape)
            m = st.m.reshape(rows.shape)
            v = st.v.reshape(rows.shape)
            ok = np.all(np.isfinite(g), axis=1)
            self.skipped += int((~ok).sum())
            if not ok.any():
                continue
            st.t[ok] += 1
            m[ok] = cfg.beta1 * m[ok] + (1 - cfg.beta1) * g[ok]
            v[ok] = cfg.beta2 * v[ok] + (1 - cfg.beta2) * g[ok] ** 2
            t = st.t[ok][:, None]
            m_hat = m[ok] / (1 - cfg.beta1**t)
            v_hat = v[ok] / (1 - cfg.beta2**t)
            rows[ok] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            if cfg.unit_norm:
                rows[ok] /= np.linalg.norm(rows[ok], axis=1, keepdims=True)

    def grow(self, name: str, count: int) -> None:
        """Append zero-moment rows for `count` new entries."""
        st = self.state.get(name)
        if st is None or count <= 0:
            return
        st.m = np.concatenate([st.m, np.zeros((count,) + st.m.shape[1:])])
        st.v = np.concatenate([st.v, np.zeros((count,) + st.v.shape[1:])])
        st.t = np.concatenate([st.t, np.zeros(count, dtype=np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        """Drop rows where `mask` is False, in every group."""
        for st in self.state.values():
            if len(st.m) == len(mask):
                st.m = st.m[mask]
                st.v = st.v[mask]
                st.t = st.t[mask]
