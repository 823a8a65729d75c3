"""Normalized multiscale gradient (NMG) loss and the ordinal-ranking baseline.

The NMG loss compares finite differences of a predicted inverse-depth map
``q`` with finite differences of a disparity map ``d`` after rescaling the
prediction by a single ratio ``s``. Differences cancel the unknown disparity
offset, and ``s`` absorbs the unknown focal-length-times-baseline factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DegenerateScale, InsufficientValidPixels
from .fields import MaskedField, as_masked

DEFAULT_SPACINGS = (2, 8, 32, 64)
KINK_ULPS = 16


@dataclass(frozen=True)
class NmgConfig:
    spacings: tuple[int, ...] = DEFAULT_SPACINGS
    epsilon_norm: float = 1e-12

    def __post_init__(self):
        spacings = tuple(int(k) for k in self.spacings)
        if not spacings or min(spacings) <= 0:
            raise ValueError(f"spacings must be a non-empty set of positive ints, got {self.spacings}")
        if not self.epsilon_norm > 0:
            raise ValueError("epsilon_norm must be positive")
        object.__setattr__(self, "spacings", spacings)

    def check_shape(self, shape: tuple[int, int]) -> None:
        """Spacings too wide for the grid simply contribute no pairs; at least one must fit."""
        if all(k >= max(shape) for k in self.spacings):
            raise ValueError(f"no spacing in {self.spacings} fits a {shape[0]}x{shape[1]} grid")


class NmgResult(NamedTuple):
    total: float
    pair_count: int
    scale: float

    @property
    def mean(self) -> float:
        return self.total / self.pair_count if self.pair_count else 0.0


def _pairs(shape, k) -> Iterator[tuple[tuple[slice, slice], tuple[slice, slice]]]:
    # (tail, head) slices: difference is field[head] - field[tail]
    if k < shape[1]:
        yield (slice(None), slice(0, shape[1] - k)), (slice(None), slice(k, None))
    if k < shape[0]:
        yield (slice(0, shape[0] - k), slice(None)), (slice(k, None), slice(None))


def _gradients(q: MaskedField, d: MaskedField, cfg: NmgConfig):
    if q.shape != d.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {d.shape}")
    cfg.check_shape(q.shape)
    valid = q.valid & d.valid
    # zero out invalid samples so NaNs never reach the sums
    qv = np.where(valid, q.values, 0.0)
    dv = np.where(valid, d.values, 0.0)
    out = []
    for k in cfg.spacings:
        for tail, head in _pairs(q.shape, k):
            m = valid[tail] & valid[head]
            gq = np.where(m, qv[head] - qv[tail], 0.0)
            gd = np.where(m, dv[head] - dv[tail], 0.0)
            out.append((tail, head, m, gq, gd))
    return out


def _scale(grads, cfg: NmgConfig) -> tuple[float, float, float]:
    num = 0.0
    den = 0.0
    for *_, gq, gd in grads:
        num += float(np.abs(gd).sum())
        den += float(np.abs(gq).sum())
    if den < cfg.epsilon_norm:
        raise DegenerateScale(f"prediction has no gradient (sum |grad q| = {den:g})")
    return num / den, num, den


def nmg_scale(q, d, cfg: NmgConfig = NmgConfig()) -> float:
    """Ratio of total absolute disparity gradient to total absolute prediction gradient."""
    q, d = as_masked(q), as_masked(d)
    return _scale(_gradients(q, d, cfg), cfg)[0]


def nmg_loss(q, d, cfg: NmgConfig = NmgConfig()) -> NmgResult:
    """Evaluate the NMG loss of prediction ``q`` against disparity ``d``.

    A spacing-k pair contributes only when both endpoints are valid in both
    fields. Returns the summed loss, the number of contributing pairs and the
    scale that was used.
    """
    q, d = as_masked(q), as_masked(d)
    grads = _gradients(q, d, cfg)
    s = _scale(grads, cfg)[0]
    total = 0.0
    count = 0
    for _, _, m, gq, gd in grads:
        total += float(np.abs(s * gq - gd).sum())
        count += int(m.sum())
    return NmgResult(total, count, s)


def nmg_gradient(q, d, cfg: NmgConfig = NmgConfig()) -> np.ndarray:
    """Analytic derivative of :func:`nmg_loss` total with respect to ``q``.

    The scale ``s`` is differentiated through. With per-pair residuals
    ``r = s*gq - gd`` and ``Q = sum |gq|``, each pair's coefficient is

        sign(r) * s  -  (s / Q) * A * sign(gq),    A = sum sign(r) * gq

    which is scattered as +coef to the head pixel and -coef to the tail.
    sign(0) = 0 gives the zero subgradient at kinks. A residual within a
    few ulps of its operands counts as a kink, since its sign is rounding
    noise; this makes the gradient exactly zero at an affine fit.
    """
    q, d = as_masked(q), as_masked(d)
    grads = _gradients(q, d, cfg)
    s, _, den = _scale(grads, cfg)
    # rounding in a difference scales with the endpoint magnitudes
    mag = s * np.abs(np.where(q.valid, q.values, 0.0)) + np.abs(np.where(d.valid, d.values, 0.0))
    residual_signs = []
    for tail, head, _, gq, gd in grads:
        r = s * gq - gd
        noise = KINK_ULPS * np.finfo(np.float64).eps * (mag[tail] + mag[head])
        residual_signs.append(np.where(np.abs(r) <= noise, 0.0, np.sign(r)))
    A = sum(float((sr * g[3]).sum()) for sr, g in zip(residual_signs, grads))
    out = np.zeros(q.shape)
    for sr, (tail, head, m, gq, _) in zip(residual_signs, grads):
        coef = np.where(m, s * sr - (s / den) * A * np.sign(gq), 0.0)
        out[head] += coef
        out[tail] -= coef
    return out


def ordinal_loss(q, pairs) -> float:
    """Ranking loss over labelled pixel pairs.

    ``pairs`` is a sequence of ``(i, j, label)`` with flat pixel indices into
    ``q`` and ``label`` in {-1, 0, +1}. Ordered pairs cost
    ``log(1 + exp(-label * (q_i - q_j)))``; equal pairs cost ``(q_i - q_j)**2``.
    """
    flat = np.asarray(q, dtype=np.float64).ravel()
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if len(pairs) == 0:
        return 0.0
    i, j, label = pairs.T
    if i.min() < 0 or j.min() < 0 or max(i.max(), j.max()) >= flat.size:
        raise IndexError("pair index out of range")
    diff = flat[i] - flat[j]
    ranked = label != 0
    total = np.logaddexp(0.0, -label[ranked] * diff[ranked]).sum()
    total += np.square(diff[~ranked]).sum()
    return float(total)


def sample_ordinal_pairs(d, n_pairs: int, ratio_thresh: float = 1.02, rng_seed: int = 0) -> np.ndarray:
    """Draw random pixel pairs from the valid part of ``d`` and label them.

    Disparities are shifted so the smallest valid one becomes 1; a pair is
    +1 when ``d_i / d_j > ratio_thresh``, -1 when ``d_i / d_j < 1 / ratio_thresh``
    and 0 otherwise. Returns an ``(n_pairs, 3)`` int array of ``(i, j, label)``.
    """
    d = as_masked(d)
    idx = np.flatnonzero(d.valid.ravel())
    if idx.size < 2:
        raise InsufficientValidPixels(f"need at least 2 valid pixels, have {idx.size}")
    rng = np.random.default_rng(rng_seed)
    first = rng.integers(0, idx.size, n_pairs)
    # offset in [1, n-1] guarantees two distinct pixels
    second = (first + rng.integers(1, idx.size, n_pairs)) % idx.size
    i, j = idx[first], idx[second]
    flat = d.values.ravel()
    shifted = flat - flat[idx].min() + 1.0
    ratio = shifted[i] / shifted[j]
    label = np.zeros(n_pairs, dtype=np.int64)
    label[ratio > ratio_thresh] = 1
    label[ratio < 1.0 / ratio_thresh] = -1
    return np.stack([i, j, label], axis=1)
