"""Truncated signatures of piecewise-linear paths.

A path is given by its sample points, shape ``(..., n, e)``; leading axes are
batch axes. Between samples the path is linear, so the signature is the
truncated tensor product of the segment exponentials
``exp(dx) = (1, dx, dx^2/2!, ..., dx^N/N!)``.

Level ``k`` is stored flattened with ``e**k`` coefficients in lexicographic
multi-index order ``(i_1, ..., i_k)``; level 0 is kept explicitly as ``1`` so
the flattened length is ``sum_k e**k``.

All functions work on plain arrays and on :class:`~sigdde.autodiff.Tensor`
values recorded on a tape; in the latter case gradients flow back to the path
points through every Chen product.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def sig_dimension(channels: int, depth: int) -> int:
    """Number of coefficients in a depth-``depth`` signature, level 0 included."""
    if channels < 1 or depth < 0:
        raise ValueError(f"need channels >= 1 and depth >= 0, got {channels}, {depth}")
    if channels == 1:
        return depth + 1
    return (channels ** (depth + 1) - 1) // (channels - 1)


@dataclass(frozen=True)
class TruncatedSignature:
    depth: int
    channels: int
    levels: tuple  # Tensor per level, shape (..., channels**k)

    @property
    def batch_shape(self) -> tuple:
        return self.levels[0].shape[:-1]

    def level(self, k: int) -> np.ndarray:
        """Level ``k`` as a numpy array of shape ``batch + (channels,) * k``."""
        data = self.levels[k].data
        return data.reshape(self.batch_shape + (self.channels,) * k)

    def flat(self) -> Tensor:
        return ad.concat(self.levels, axis=-1)

    def to_numpy(self) -> np.ndarray:
        return np.concatenate([lv.data for lv in self.levels], axis=-1)

    def __len__(self):
        return sig_dimension(self.channels, self.depth)


def _flat_outer(a: Tensor, b: Tensor) -> Tensor:
    out = ad.outer(a, b)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-2] * out.shape[-1],))


def segment_signature(increment, depth: int) -> TruncatedSignature:
    """Signature of a single linear segment: level ``k`` is ``increment^{(x)k} / k!``."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    inc = ad.as_tensor(increment)
    e = inc.shape[-1]
    levels = [Tensor(np.ones(inc.shape[:-1] + (1,))), inc]
    for k in range(2, depth + 1):
        levels.append(ad.scale(_flat_outer(levels[-1], inc), 1.0 / k))
    return TruncatedSignature(depth, e, tuple(levels))


def chen_concat(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Truncated tensor product; the signature of path ``a`` followed by path ``b``."""
    if a.channels != b.channels or a.depth != b.depth:
        raise ValueError(
            f"signature mismatch: channels {a.channels} vs {b.channels}, "
            f"depth {a.depth} vs {b.depth}"
        )
    levels = [a.levels[0]]
    for k in range(1, a.depth + 1):
        acc = ad.add(a.levels[k], b.levels[k])
        for i in range(1, k):
            acc = ad.add(acc, _flat_outer(a.levels[i], b.levels[k - i]))
        levels.append(acc)
    return TruncatedSignature(a.depth, a.channels, tuple(levels))


def _check_path(points):
    pts = ad.as_tensor(points)
    if pts.ndim < 2:
        raise ValueError(f"path must have shape (..., n, e), got {pts.shape}")
    n, e = pts.shape[-2:]
    if n < 2 or e < 1:
        raise ValueError(f"path needs n >= 2 points and e >= 1 channels, got n={n}, e={e}")
    return pts


def increments(points) -> Tensor:
    pts = _check_path(points)
    return ad.sub(pts[..., 1:, :], pts[..., :-1, :])


def signature(points, depth: int) -> TruncatedSignature:
    """Depth-``depth`` signature of the piecewise-linear path through ``points``.

    Left fold of :func:`chen_concat` over the segment exponentials; cost is
    ``O(n * e**depth)``.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    incs = increments(points)
    n_seg = incs.shape[-2]
    sig = segment_signature(incs[..., 0, :], depth)
    for j in range(1, n_seg):
        sig = chen_concat(sig, segment_signature(incs[..., j, :], depth))
    return sig


def time_augment(points, times):
    """Prepend ``times`` as channel 0 of the path.

    ``times`` is constant data of shape ``(n,)`` (shared across the batch) or
    the path's leading shape ``(..., n)``.
    """
    pts = _check_path(points)
    t = np.asarray(times, dtype=np.float64)
    if t.shape[-1] != pts.shape[-2]:
        raise ValueError(f"need {pts.shape[-2]} timestamps, got {t.shape[-1]}")
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    t = np.broadcast_to(t, pts.shape[:-1])[..., None]
    return ad.concat([Tensor(t), pts], axis=-1)


def level_norms(sig: TruncatedSignature) -> np.ndarray:
    """Euclidean norm of each level, shape ``batch + (depth + 1,)``."""
    return np.stack([np.linalg.norm(lv.data, axis=-1) for lv in sig.levels], axis=-1)


def total_variation(points) -> np.ndarray:
    """Sum of Euclidean segment lengths (the 1-variation of a polyline)."""
    pts = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    return np.linalg.norm(np.diff(pts, axis=-2), axis=-1).sum(axis=-1)


def factorial_bound(points, depth: int) -> np.ndarray:
    """``TV^k / k!`` for ``k = 0..depth``."""
    tv = total_variation(points)
    return np.stack([tv ** k / factorial(k) for k in range(depth + 1)], axis=-1)
