"""Whole-image SSIM, NMSE and the SSIM constraint functions.

Images are arrays of shape ``(H, W, C)`` (a 2-D array is treated as a single
channel).  Statistics are global per channel with population variance; SSIM
and the constraints are averaged over channels.

The ``batch_*`` functions take stacks ``(N, H, W, C)`` and are what the
attacks call inside their loops; the single-image functions wrap them.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


@dataclass(frozen=True)
class SsimParams:
    range: float = 1.0

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"dynamic range must be positive, got {self.range}")

    @property
    def c1(self) -> float:
        return (0.01 * self.range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.range) ** 2


@dataclass(frozen=True)
class ConstraintThresholds:
    zeta1: float = 0.9
    zeta2: float = 0.9

    def __post_init__(self):
        for name in ("zeta1", "zeta2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


class ImageStats(NamedTuple):
    mean: float
    variance: float
    covariance: Optional[float] = None


DEFAULT_PARAMS = SsimParams()


def _as_hwc(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None, None]
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim == 3:
        return x
    raise DimensionError(f"expected an image of rank 1-3, got shape {x.shape}")


def _pair(x, y):
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise DimensionError("empty image")
    return x, y


def _flat(batch):
    # (N, ...spatial..., C) -> (N, P, C)
    batch = np.asarray(batch, dtype=np.float64)
    return batch.reshape(batch.shape[0], -1, batch.shape[-1])


def image_stats(x, y=None) -> ImageStats:
    """Mean and population variance of a single-channel image.

    With ``y`` given, also the population covariance between the two.
    Multi-channel callers iterate over channels themselves.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise DimensionError("empty image")
    mu = x.mean()
    xc = x - mu
    var = float(np.dot(xc, xc) / x.size)
    if y is None:
        return ImageStats(float(mu), var)
    y = np.asarray(y, dtype=np.float64)
    if y.size != x.size:
        raise DimensionError(f"shape mismatch: {x.size} vs {y.size} pixels")
    yc = y.ravel() - y.mean()
    return ImageStats(float(mu), var, float(np.dot(xc, yc) / x.size))


def batch_ssim(x, y, p: SsimParams = DEFAULT_PARAMS) -> np.ndarray:
    """SSIM for each pair in two stacks of images; returns shape ``(N,)``."""
    xf, yf = _flat(x), _flat(y)
    if xf.shape != yf.shape:
        raise DimensionError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")
    n = xf.shape[1]
    mx, my = xf.mean(axis=1), yf.mean(axis=1)
    xc, yc = xf - mx[:, None], yf - my[:, None]
    vx = np.einsum("npc,npc->nc", xc, xc) / n
    vy = np.einsum("npc,npc->nc", yc, yc) / n
    cov = np.einsum("npc,npc->nc", xc, yc) / n
    s1 = (2 * mx * my + p.c1) / (mx * mx + my * my + p.c1)
    s2 = (2 * cov + p.c2) / (vx + vy + p.c2)
    return (s1 * s2).mean(axis=1)


def ssim(x, y, p: SsimParams = DEFAULT_PARAMS) -> float:
    """Whole-image SSIM ``S1 * S2`` averaged over channels."""
    x, y = _pair(x, y)
    return float(batch_ssim(x[None], y[None], p)[0])


def nmse(u, v, C: float) -> float:
    """Normalised squared error ``|u - v|^2 / (|u|^2 + |v|^2 + C)``."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64)).ravel()
    v = np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.size} vs {v.size}")
    if C < 0:
        raise ValueError("C must be non-negative")
    d = u - v
    den = np.dot(u, u) + np.dot(v, v) + C
    num = np.dot(d, d)
    if num == 0.0:
        return 0.0
    return float(num / den)


def _constraint_parts(y, x, p):
    yf, xf = _flat(y), _flat(x)
    if yf.shape != xf.shape:
        raise DimensionError(f"shape mismatch: {np.shape(y)} vs {np.shape(x)}")
    mx, my = xf.mean(axis=1), yf.mean(axis=1)
    v, u = xf - mx[:, None], yf - my[:, None]
    return xf.shape[1], mx, my, v, u


def batch_constraints(y, x, p: SsimParams, t: ConstraintThresholds) -> np.ndarray:
    """Constraint values ``g1..g4`` for candidates ``y`` against originals ``x``.

    Returns shape ``(N, 4)``; each entry is the average over channels.
    """
    _, mx, my, v, u = _constraint_parts(y, x, p)
    a = mx - my
    g1 = t.zeta1 - 1.0 + a * a / (mx * mx + my * my + p.c1)
    d = v - u
    num = np.einsum("npc,npc->nc", d, d)
    den = np.einsum("npc,npc->nc", v, v) + np.einsum("npc,npc->nc", u, u) + p.c2
    g2 = t.zeta2 - 1.0 + num / den
    g3 = -2.0 * mx * my - p.c1
    g4 = -2.0 * np.einsum("npc,npc->nc", v, u) - p.c2
    return np.stack([g1, g2, g3, g4], axis=-1).mean(axis=1)


def batch_constraint_gradients(y, x, p: SsimParams, t: ConstraintThresholds) -> np.ndarray:
    """Gradients of ``g1..g4`` with respect to ``y``.

    Returns shape ``(N, 4) + y.shape[1:]``.
    """
    y = np.asarray(y, dtype=np.float64)
    n, mx, my, v, u = _constraint_parts(y, x, p)
    nch = mx.shape[1]

    a = mx - my
    den1 = mx * mx + my * my + p.c1
    # d/dmu_y of a^2/den1, spread evenly over the pixels of the channel
    dg1 = (-2.0 * a * den1 - 2.0 * a * a * my) / (den1 * den1) / n
    grad1 = np.broadcast_to(dg1[:, None, :], u.shape)

    d = u - v
    num = np.einsum("npc,npc->nc", d, d)
    den2 = np.einsum("npc,npc->nc", v, v) + np.einsum("npc,npc->nc", u, u) + p.c2
    # centring projection is a no-op here: both d and u have zero mean
    grad2 = 2.0 * (d * den2[:, None] - num[:, None] * u) / (den2 * den2)[:, None]

    grad3 = np.broadcast_to((-2.0 * mx / n)[:, None, :], u.shape)
    grad4 = -2.0 * v

    out = np.stack([grad1, grad2, grad3, grad4], axis=1) / nch
    return out.reshape((y.shape[0], 4) + y.shape[1:])


def constraints(y, x, p: SsimParams = DEFAULT_PARAMS,
                t: ConstraintThresholds = ConstraintThresholds()) -> np.ndarray:
    """``(g1, g2, g3, g4)`` for candidate ``y`` and original ``x``; feasible iff all <= 0."""
    x, y = _pair(x, y)
    return batch_constraints(y[None], x[None], p, t)[0]


def constraint_gradients(y, x, p: SsimParams = DEFAULT_PARAMS,
                         t: ConstraintThresholds = ConstraintThresholds()) -> np.ndarray:
    """Array of shape ``(4,) + y.shape`` holding ``dg_i/dy``."""
    shape = np.shape(y)
    x, y = _pair(x, y)
    return batch_constraint_gradients(y[None], x[None], p, t)[0].reshape((4,) + shape)


def lp_distortion(delta, p) -> float:
    delta = np.asarray(delta, dtype=np.float64).ravel()
    if p in (1, "1", "l1"):
        return float(np.abs(delta).sum())
    if p in (2, "2", "l2"):
        return float(np.sqrt(np.dot(delta, delta)))
    if p in (np.inf, "inf", "linf"):
        return float(np.abs(delta).max()) if delta.size else 0.0
    raise ValueError(f"unsupported norm {p!r}; use 1, 2 or inf")


def batch_lp(delta) -> np.ndarray:
    """L1, L2 and Linf of each perturbation in a stack; shape ``(N, 3)``."""
    d = np.asarray(delta, dtype=np.float64).reshape(len(delta), -1)
    a = np.abs(d)
    return np.stack([a.sum(axis=1), np.sqrt((d * d).sum(axis=1)), a.max(axis=1)], axis=1)
