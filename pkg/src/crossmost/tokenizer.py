"""Sub-cloud and image-patch tokenization, and the masking patterns.

Point clouds become K groups of G center-subtracted neighbours around
farthest-point-sampled centers; images become non-overlapping square patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass
class PointTokenBatch:
    groups: np.ndarray  # (B, K, G, 3), center-subtracted
    centers: np.ndarray  # (B, K, 3)
    mask: np.ndarray | None = None  # (B, K) bool, True = masked

    def mask_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.mask] if self.mask is not None else []


@dataclass
class ImageTokenBatch:
    patches: np.ndarray  # (B, K_img, patch_size**2)
    patch_size: int
    mask: np.ndarray | None = None  # (B, K_img) bool

    def mask_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.mask] if self.mask is not None else []


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return (diff * diff).sum(axis=-1)


def fps(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest point sampling from index 0; ties go to the lowest index."""
    n = points.shape[0]
    if k > n:
        raise DomainError(f"cannot sample {k} centers from {n} points")
    return fps_batch(points[None], k)[0]


def fps_batch(points: np.ndarray, k: int) -> np.ndarray:
    b, n, _ = points.shape
    if k > n:
        raise DomainError(f"cannot sample {k} centers from {n} points")
    x, y, z = np.moveaxis(points.astype(np.float64, copy=False), -1, 0)
    picked = np.zeros((b, k), dtype=np.int64)
    rows = np.arange(b)
    min_d = np.full((b, n), np.inf)
    for i in range(1, k):
        last = picked[:, i - 1]
        d = (x - x[rows, last, None]) ** 2 + (y - y[rows, last, None]) ** 2 + (z - z[rows, last, None]) ** 2
        np.minimum(min_d, d, out=min_d)
        picked[:, i] = np.argmax(min_d, axis=1)
    return picked


def knn_group(points: np.ndarray, center_indices: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``g`` nearest points to each center, minus the center. Returns (groups, centers)."""
    groups, centers = knn_group_batch(points[None], center_indices[None], g)
    return groups[0], centers[0]


def knn_group_batch(points: np.ndarray, center_indices: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    b, n, _ = points.shape
    if g > n:
        raise DomainError(f"group size {g} exceeds point count {n}")
    rows = np.arange(b)[:, None]
    centers = points[rows, center_indices]  # (B, K, 3)
    d = np.zeros((b, centers.shape[1], n), dtype=points.dtype)
    for axis in range(3):
        diff = points[:, None, :, axis] - centers[:, :, None, axis]
        d += diff * diff
    nearest = _smallest_stable(d, g)
    groups = points[rows[..., None], nearest] - centers[:, :, None, :]
    return groups, centers


def _smallest_stable(d: np.ndarray, g: int) -> np.ndarray:
    """Indices of the ``g`` smallest entries along the last axis, ordered by (value, index)."""
    lead, n = d.shape[:-1], d.shape[-1]
    if g >= n:
        return np.argsort(d, axis=-1, kind="stable")
    flat = d.reshape(-1, n)
    kth = np.partition(flat, g - 1, axis=-1)[:, g - 1 : g]
    # every entry <= the g-th value is a candidate; ties at the cut are resolved by index
    rows, cols = np.nonzero(flat <= kth)
    order = np.lexsort((cols, flat[rows, cols], rows))
    starts = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=flat.shape[0]))[:-1]])
    take = order[(starts[:, None] + np.arange(g)).ravel()]
    return cols[take].reshape(*lead, g)


def tokenize_points(points: np.ndarray, n_groups: int, group_size: int) -> PointTokenBatch:
    """(B, N, 3) clouds to an unmasked PointTokenBatch."""
    idx = fps_batch(points, n_groups)
    groups, centers = knn_group_batch(points, idx, group_size)
    return PointTokenBatch(groups.astype(np.float32), centers.astype(np.float32))


def patchify_image(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major non-overlapping patches, each flattened row-major. Accepts (P,P) or (B,P,P)."""
    p = img.shape[-1]
    if img.shape[-2] != p or p % patch_size:
        raise ConfigurationError(f"patch size {patch_size} does not divide image side {p}")
    g = p // patch_size
    lead = img.shape[:-2]
    x = img.reshape(*lead, g, patch_size, g, patch_size)
    x = np.moveaxis(x, -3, -2)  # (..., g, g, ps, ps)
    return x.reshape(*lead, g * g, patch_size * patch_size)


def unpatchify_image(patches: np.ndarray, patch_size: int) -> np.ndarray:
    k = patches.shape[-2]
    g = int(round(k**0.5))
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, g, g, patch_size, patch_size)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, g * patch_size, g * patch_size)


def mask_image_patches(k_img: int, rng: np.random.Generator, ratio: float = 0.30) -> np.ndarray:
    m = int(round(ratio * k_img))
    return np.sort(rng.choice(k_img, size=m, replace=False))


def mask_point_blocks(
    centers: np.ndarray,
    rng: np.random.Generator,
    ratio_range: tuple[float, float] = (0.30, 0.40),
    ratio: float | None = None,
) -> np.ndarray:
    """A seed center plus its nearest centers, round(ratio * K) in total."""
    k = centers.shape[0]
    if k < 4:
        raise DomainError(f"block masking needs at least 4 tokens, got {k}")
    if ratio is None:
        ratio = rng.uniform(*ratio_range)
    m = max(1, int(round(ratio * k)))
    seed = int(rng.integers(k))
    d = _sq_dist(centers.astype(np.float64), centers[seed].astype(np.float64))
    d[seed] = -1.0  # the seed is always included even if another center coincides with it
    return np.sort(np.argsort(d, kind="stable")[:m])


def index_sets_to_mask(sets: list[np.ndarray], k: int) -> np.ndarray:
    mask = np.zeros((len(sets), k), dtype=bool)
    for i, s in enumerate(sets):
        mask[i, s] = True
    return mask
