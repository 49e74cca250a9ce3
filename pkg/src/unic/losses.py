"""Token-level distillation losses, their aggregation, and teacher balancing.

All loss functions are batched over leading axes: vectors live on the last
axis, so ``cosine_loss`` on (B, P, d) inputs returns (B, P).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

NORM_FLOOR = 1e-12
BALANCING_KINDS = ("none", "tdrop", "manual", "random_one", "adaloss")

# Philox stream ids for the different random draws
_STREAM_TDROP_IMAGE = 0
_STREAM_TDROP_PATCH = 1
_STREAM_RANDOM_ONE = 2


def _check_widths(s, t):
    if s.shape[-1] != t.shape[-1] or s.shape != t.shape:
        raise DimensionError(f"loss operands of shape {s.shape} and {t.shape} differ")


def cosine_loss(s, t):
    """1 - cos(s, t) along the last axis; norms are floored at 1e-12."""
    s, t = T.as_tensor(s), T.as_tensor(t)
    _check_widths(s, t)
    dot = T.sum_(T.mul(s, t), axis=-1)
    ns = T.clamp_min(T.sqrt(T.sum_(T.mul(s, s), axis=-1)), NORM_FLOOR)
    nt = T.clamp_min(T.sqrt(T.sum_(T.mul(t, t), axis=-1)), NORM_FLOOR)
    return T.sub(1.0, T.div(dot, T.mul(ns, nt)))


def smooth_l1_loss(s, t, elementwise=False):
    """Vector-level smooth-l1.

    0.5 * ||s - t||_2^2 when ||s - t||_1 < 1, else ||s - t||_1 - 0.5. With
    ``elementwise=True`` the usual per-coordinate Huber (beta 1) is averaged
    over the last axis instead.
    """
    s, t = T.as_tensor(s), T.as_tensor(t)
    _check_widths(s, t)
    diff = T.sub(s, t)
    a = T.abs_(diff)
    if elementwise:
        quad = a.data < 1.0
        per = T.add(T.mul(T.mul(diff, diff), T.Tensor(0.5 * quad)),
                    T.mul(T.sub(a, 0.5), T.Tensor(~quad * 1.0)))
        return T.mean(per, axis=-1)
    l1 = T.sum_(a, axis=-1)
    sq = T.sum_(T.mul(diff, diff), axis=-1)
    quad = l1.data < 1.0
    return T.add(T.mul(T.scale(sq, 0.5), T.Tensor(quad * 1.0)),
                 T.mul(T.sub(l1, 0.5), T.Tensor(~quad * 1.0)))


def token_loss(projected, target, elementwise_l1=False):
    """Mean of the cosine and smooth-l1 losses for each token."""
    return T.scale(T.add(cosine_loss(projected, target),
                         smooth_l1_loss(projected, target, elementwise_l1)), 0.5)


def image_loss(cls_losses, patch_losses):
    """Per-teacher image loss (L(c) + mean_p L(p)) / 2 and the unweighted total.

    ``cls_losses[t]`` is (B,), ``patch_losses[t]`` is (B, |P|). Returns
    ``({t: (B,)}, total (B,))``.
    """
    per_teacher = {}
    for t, pl in patch_losses.items():
        if pl.shape[-1] == 0:
            raise ContractError("image loss needs at least one patch token")
        per_teacher[t] = T.scale(T.add(cls_losses[t], T.mean(pl, axis=-1)), 0.5)
    total = None
    for lt in per_teacher.values():
        total = lt if total is None else T.add(total, lt)
    return per_teacher, total


# ---------------------------------------------------------------- randomness

def counter_generator(seed, stream, epoch, step, index):
    """Generator keyed by (seed, stream) at counter (epoch, step, index).

    Philox increments the lowest counter word, which is left at zero, so draws
    for different indices never overlap.
    """
    key = (int(seed) << 8) | int(stream)
    bitgen = np.random.Philox(key=key, counter=[0, int(index), int(step), int(epoch)])
    return np.random.Generator(bitgen)


def draw_drop_flags(seed, epoch, step, image_indices, num_teachers, p, positions=None):
    """Bernoulli(p) flags per (image, teacher), or per (image, position, teacher)."""
    rows = []
    for i in image_indices:
        if positions is None:
            rng = counter_generator(seed, _STREAM_TDROP_IMAGE, epoch, step, i)
            rows.append(rng.random(num_teachers) < p)
        else:
            rng = counter_generator(seed, _STREAM_TDROP_PATCH, epoch, step, i)
            rows.append(rng.random((positions, num_teachers)) < p)
    return np.array(rows, dtype=bool)


# ---------------------------------------------------------------- balancing

def tdrop_coefficients(losses, p, drop_flags):
    """Teacher-dropping coefficients.

    ``losses`` is (..., M) detached per-teacher losses; the teacher with the
    largest loss (lowest index on ties) is always kept, every other teacher
    is kept unless its flag in ``drop_flags`` is set. Returns (alpha, delta).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape[-1] < 1:
        raise ContractError("teacher dropping needs at least one teacher")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1], got {p}")
    delta = np.asarray(drop_flags, dtype=bool)
    keep = np.argmax(losses, axis=-1)
    is_max = np.zeros(losses.shape, dtype=bool)
    np.put_along_axis(is_max, keep[..., None], True, axis=-1)
    alpha = np.where(is_max, 1.0, 1.0 - delta)
    return alpha, delta


def tdrop_patch_level(cls_losses, patch_losses, p, cls_flags, patch_flags):
    """Per-position dropping: CLS is its own position.

    ``cls_losses`` (B, M), ``patch_losses`` (B, P, M). Returns
    (alpha_cls (B, M), alpha_patch (B, P, M)).
    """
    a_cls, _ = tdrop_coefficients(cls_losses, p, cls_flags)
    a_patch, _ = tdrop_coefficients(patch_losses, p, patch_flags)
    return a_cls, a_patch


def adaloss_weights(averages, floor=1e-8):
    """Weights inversely proportional to the running average losses, summing to M."""
    avg = np.maximum(np.asarray(averages, dtype=np.float64), floor)
    inv = 1.0 / avg
    return inv * (len(avg) / inv.sum())


def random_one_teacher(num_teachers, seed, epoch, step):
    """One-hot coefficients selecting a uniformly random teacher for this batch."""
    if num_teachers < 1:
        raise ContractError("need at least one teacher")
    rng = counter_generator(seed, _STREAM_RANDOM_ONE, epoch, step, 0)
    alpha = np.zeros(num_teachers)
    alpha[rng.integers(num_teachers)] = 1.0
    return alpha


def manual_weights(weights):
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ConfigError(f"manual weights must be positive, got {list(w)}")
    return w


@dataclass
class BalancingStrategy:
    kind: str = "none"
    p: float = 0.25
    granularity: str = "image"
    manual_weights: Optional[list] = None
    adaloss_decay: float = 0.99

    def __post_init__(self):
        if self.kind not in BALANCING_KINDS:
            raise ConfigError(f"balancing kind must be one of {BALANCING_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"drop probability must lie in [0, 1], got {self.p}")
        if self.granularity not in ("image", "patch"):
            raise ConfigError(f"granularity must be 'image' or 'patch', got {self.granularity!r}")
        if self.kind == "manual":
            if not self.manual_weights:
                raise ConfigError("manual balancing needs weights")
            manual_weights(self.manual_weights)
        if not 0.0 < self.adaloss_decay < 1.0:
            raise ConfigError(f"adaloss decay must lie in (0, 1), got {self.adaloss_decay}")


@dataclass
class LossBreakdown:
    """Detached per-image, per-teacher loss values for one step.

    Arrays are indexed (image, teacher) unless noted. ``alpha`` is the image
    level coefficient (mean over positions for patch-level dropping).
    """

    teachers: list
    cls_loss: np.ndarray
    patch_loss: np.ndarray
    per_patch: np.ndarray  # (B, P, M)
    alpha: np.ndarray
    delta: np.ndarray
    teacher_total: np.ndarray
    image_total: np.ndarray  # (B,)
    weights: Dict[str, float] = field(default_factory=dict)

    def argmax_kept(self):
        """True when every image keeps its largest-loss teacher."""
        keep = np.argmax(self.teacher_total, axis=1)
        return bool(np.all(self.alpha[np.arange(len(keep)), keep] == 1.0))
