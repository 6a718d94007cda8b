"""Procedural shape corpus: paired point clouds and depth views, plus augmentations.

Every sample is a pure function of ``(master_seed, sample_id)``; rng streams are
derived with :func:`sample_rng` so samples can be generated in any order or in
parallel without changing the result.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import map_coordinates

from .config import AugConfig, DataConfig
from .errors import ConfigurationError, DomainError

FAMILIES = ("sphere", "box", "cone", "cylinder", "torus", "pyramid", "ellipsoid", "capsule")

ELEVATION_DEG = 30.0

# id offsets keep sample ids unique across splits
SPLIT_BASES = {"pretrain": 0, "train": 1 << 32, "test": 2 << 32, "exemplars": 3 << 32}

# (name, lo, hi, banded): banded parameters are scaled by TIER_FACTOR ** tier so
# that classes reusing a family occupy disjoint ranges (every hi/lo < TIER_FACTOR)
TIER_FACTOR = 1.6
FAMILY_PARAMS = {
    "sphere": [("sz", 0.9, 1.1, True)],
    "box": [("x", 0.8, 1.0, False), ("y", 0.6, 0.9, False), ("z", 0.45, 0.65, True)],
    "cone": [("r", 0.9, 1.1, False), ("h", 1.6, 2.3, True)],
    "cylinder": [("r", 0.9, 1.1, False), ("h", 1.3, 1.9, True)],
    "torus": [("R", 1.0, 1.0, False), ("r", 0.25, 0.38, True)],
    "pyramid": [("b", 1.0, 1.0, False), ("h", 0.7, 1.05, True)],
    "ellipsoid": [("a", 1.0, 1.0, False), ("b", 0.5, 0.7, True), ("c", 0.3, 0.45, False)],
    "capsule": [("r", 1.0, 1.0, False), ("l", 1.2, 1.8, True)],
}

_TAGS = {"gen": 1, "pose": 2, "train": 3, "shuffle": 4, "mask": 5, "pretrain": 6, "eval": 7, "shift": 8}


def sample_rng(seed: int, sample_id: int, tag: str, *extra: int) -> np.random.Generator:
    """Counter-derived generator for one (seed, sample, stage) triple."""
    return np.random.default_rng([int(seed), int(sample_id), _TAGS[tag], *[int(e) for e in extra]])


@dataclass
class ShapeSpec:
    class_id: int
    family: str
    param_ranges: dict[str, tuple[float, float]]
    seed: int


@dataclass
class PointCloud:
    points: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


@dataclass
class ViewImage:
    pixels: np.ndarray
    view_id: int
    azimuth: float
    elevation: float = ELEVATION_DEG


@dataclass
class Sample:
    pcl: PointCloud
    views: list[ViewImage]
    label: int
    sample_id: int

    def view_stack(self) -> np.ndarray:
        return np.stack([v.pixels for v in self.views])


@dataclass
class DatasetSplit:
    pretrain: list[Sample]
    train: list[Sample]
    test: list[Sample]
    class_names: list[str]
    # clean canonical renders of every downstream class; stand-ins for class names
    exemplars: list[Sample] = field(default_factory=list)

    def with_views(self, v: int, splat: int = 1) -> "DatasetSplit":
        """Downstream splits restricted to the first ``v`` views.

        Valid because azimuth sets are nested (see :func:`view_azimuths`) only when
        ``v`` divides the stored count; re-rendering covers the other cases.
        """
        return DatasetSplit(
            pretrain=self.pretrain,
            train=[_restrict_views(s, v, splat) for s in self.train],
            test=[_restrict_views(s, v, splat) for s in self.test],
            class_names=self.class_names,
            exemplars=self.exemplars,
        )


def _restrict_views(sample: Sample, v: int, splat: int = 1) -> Sample:
    stored = len(sample.views)
    if stored % v == 0:
        step = stored // v
        views = [
            ViewImage(view.pixels, i, view.azimuth, view.elevation)
            for i, view in enumerate(sample.views[::step][:v])
        ]
    else:
        views = render_views(sample.pcl, v, sample.views[0].pixels.shape[0], splat=splat)
    return Sample(sample.pcl, views, sample.label, sample.sample_id)


# ---------------------------------------------------------------------------
# geometry


def family_of(class_id: int) -> tuple[str, int]:
    return FAMILIES[class_id % len(FAMILIES)], class_id // len(FAMILIES)


def class_name(class_id: int) -> str:
    family, tier = family_of(class_id)
    return family if tier == 0 else f"{family}_{tier}"


def class_spec(class_id: int, seed: int) -> ShapeSpec:
    family, tier = family_of(class_id)
    k = TIER_FACTOR**tier
    ranges = {
        name: (lo * k, hi * k) if banded else (lo, hi)
        for name, lo, hi, banded in FAMILY_PARAMS[family]
    }
    return ShapeSpec(class_id=class_id, family=family, param_ranges=ranges, seed=seed)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(rng, n, radius):
    rho = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    return rho * np.cos(phi), rho * np.sin(phi)


def _split_counts(rng, n, areas):
    areas = np.asarray(areas, dtype=float)
    return rng.multinomial(n, areas / areas.sum())


def _triangle(rng, n, a, b, c):
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _sample_surface(family, p, rng, n):
    if family in ("sphere", "ellipsoid"):
        axes = np.array([1.0, 1.0, p["sz"]]) if family == "sphere" else np.array([p["a"], p["b"], p["c"]])
        return _unit_vectors(rng, n) * axes
    if family == "box":
        dims = np.array([p["x"], p["y"], p["z"]])
        areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]]
        counts = _split_counts(rng, n, areas)
        out = []
        for axis, cnt in enumerate(counts):
            pts = (rng.uniform(size=(cnt, 3)) - 0.5) * dims
            pts[:, axis] = np.where(rng.uniform(size=cnt) < 0.5, -0.5, 0.5) * dims[axis]
            out.append(pts)
        return np.concatenate(out)
    if family in ("cylinder", "cone"):
        r, h = p["r"], p["h"]
        if family == "cylinder":
            side, caps = 2 * np.pi * r * h, 2 * np.pi * r * r
        else:
            side, caps = np.pi * r * math.hypot(r, h), np.pi * r * r
        n_side, n_cap = _split_counts(rng, n, [side, caps])
        phi = rng.uniform(0, 2 * np.pi, size=n_side)
        if family == "cylinder":
            z = rng.uniform(-h / 2, h / 2, size=n_side)
            rad = np.full(n_side, r)
        else:
            # lateral area density grows linearly with distance from the apex
            t = np.sqrt(rng.uniform(size=n_side))
            rad = r * t
            z = h / 2 - h * t
        side_pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
        x, y = _disk(rng, n_cap, r)
        if family == "cylinder":
            zc = np.where(rng.uniform(size=n_cap) < 0.5, -h / 2, h / 2)
        else:
            zc = np.full(n_cap, -h / 2)
        return np.concatenate([side_pts, np.stack([x, y, zc], axis=1)])
    if family == "torus":
        big, small = p["R"], p["r"]
        theta = rng.uniform(0, 2 * np.pi, size=n)
        # rejection sampling of the tube angle for area-uniform density
        phi = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
            keep = rng.uniform(size=cand.size) * (big + small) < big + small * np.cos(cand)
            cand = cand[keep][: n - filled]
            phi[filled : filled + cand.size] = cand
            filled += cand.size
        ring = big + small * np.cos(phi)
        return np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    if family == "pyramid":
        b, h = p["b"], p["h"]
        half = b / 2
        corners = np.array([[-half, -half, -h / 2], [half, -half, -h / 2], [half, half, -h / 2], [-half, half, -h / 2]])
        apex = np.array([0.0, 0.0, h / 2])
        face_area = 0.5 * b * math.hypot(half, h)
        counts = _split_counts(rng, n, [b * b] + [face_area] * 4)
        base = np.stack(
            [rng.uniform(-half, half, counts[0]), rng.uniform(-half, half, counts[0]), np.full(counts[0], -h / 2)],
            axis=1,
        )
        faces = [_triangle(rng, counts[i + 1], corners[i], corners[(i + 1) % 4], apex) for i in range(4)]
        return np.concatenate([base] + faces)
    if family == "capsule":
        r, length = p["r"], p["l"]
        n_side, n_caps = _split_counts(rng, n, [2 * np.pi * r * length, 4 * np.pi * r * r])
        phi = rng.uniform(0, 2 * np.pi, size=n_side)
        side = np.stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(-length / 2, length / 2, n_side)], axis=1)
        caps = _unit_vectors(rng, n_caps) * r
        caps[:, 2] += np.sign(caps[:, 2]) * length / 2
        return np.concatenate([side, caps])
    raise ConfigurationError(f"unknown shape family {family!r}")


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    centered = points - points.mean(axis=0)
    return centered / np.linalg.norm(centered, axis=1).max()


def generate_shape(spec: ShapeSpec, n_points: int = 1024) -> PointCloud:
    if spec.family not in FAMILIES:
        raise ConfigurationError(f"unknown shape family {spec.family!r}")
    if n_points < 128:
        raise ConfigurationError(f"need at least 128 points, got {n_points}")
    rng = np.random.default_rng(spec.seed)
    params = {name: rng.uniform(lo, hi) for name, (lo, hi) in sorted(spec.param_ranges.items())}
    points = _sample_surface(spec.family, params, rng, n_points)
    # shuffle so point order carries no face/part information
    points = points[rng.permutation(n_points)]
    return PointCloud(normalize_points(points))


# ---------------------------------------------------------------------------
# rendering


def view_azimuths(v: int) -> np.ndarray:
    """Equally spaced over a half turn, so 0/90 for two views and nested sets for v, 2v."""
    return np.arange(v) * (180.0 / v)


def camera_axes(azimuth: float, elevation: float = ELEVATION_DEG) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(right, up, towards-camera) unit vectors of an orthographic camera looking at the origin."""
    a, e = np.deg2rad(azimuth), np.deg2rad(elevation)
    toward = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    right = np.array([-np.sin(a), np.cos(a), 0.0])
    up = np.cross(toward, right)
    return right, up, toward


def project(points: np.ndarray, azimuth: float, pixels: int, elevation: float = ELEVATION_DEG):
    """Pixel rows/cols and depth (toward camera) of each point; no visibility test."""
    right, up, toward = camera_axes(azimuth, elevation)
    u, v, depth = points @ right, points @ up, points @ toward
    cols = np.clip(np.floor((u + 1) / 2 * pixels), 0, pixels - 1).astype(np.int64)
    rows = np.clip(np.floor((1 - v) / 2 * pixels), 0, pixels - 1).astype(np.int64)
    return rows, cols, depth


def render_views(
    pcl: PointCloud, v: int, p: int, azimuths: Iterable[float] | None = None, splat: int = 1
) -> list[ViewImage]:
    """Orthographic depth views. Each point covers a (2*splat+1)^2 pixel footprint so the
    silhouette has no sampling holes; the nearest point still wins every pixel."""
    if pcl.n_points == 0:
        raise DomainError("cannot render an empty point cloud")
    if v < 1 or p < 16:
        raise ConfigurationError("render_views needs v >= 1 and p >= 16")
    az = view_azimuths(v) if azimuths is None else np.asarray(list(azimuths), dtype=float)
    out = []
    for i, a in enumerate(az):
        rows, cols, depth = project(pcl.points, float(a), p)
        # depth in [-1, 1] maps to intensity in [0.1, 1]; nearer is brighter
        intensity = 0.55 + 0.45 * np.clip(depth, -1.0, 1.0)
        img = np.zeros((p, p))
        for dr in range(-splat, splat + 1):
            for dc in range(-splat, splat + 1):
                rr, cc = rows + dr, cols + dc
                ok = (rr >= 0) & (rr < p) & (cc >= 0) & (cc < p)
                np.maximum.at(img, (rr[ok], cc[ok]), intensity[ok])
        out.append(ViewImage(img.astype(np.float32), i, float(a)))
    return out


# ---------------------------------------------------------------------------
# augmentation


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def augment_pcl_weak(pcl: PointCloud, rng: np.random.Generator, cfg: AugConfig | None = None) -> PointCloud:
    cfg = cfg or AugConfig()
    lim = np.deg2rad(cfg.weak_rot_deg)
    rot = rotation_matrix(*rng.uniform(-lim, lim, size=3))
    scale = rng.uniform(*cfg.weak_scale)
    return PointCloud((pcl.points @ rot.T * scale).astype(pcl.points.dtype))


def crop_halfspace(points: np.ndarray, rng: np.random.Generator, min_keep: float) -> np.ndarray:
    """Boolean mask keeping the points below a random plane, at least ``min_keep`` of them."""
    n = points.shape[0]
    frac = rng.uniform(min_keep, 1.0)
    keep_n = max(int(math.ceil(frac * n)), 1)
    if keep_n >= n:
        return np.ones(n, dtype=bool)
    direction = _unit_vectors(rng, 1)[0]
    order = np.argsort(points @ direction, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep_n]] = True
    return mask


def augment_pcl_strong(pcl: PointCloud, rng: np.random.Generator, cfg: AugConfig | None = None) -> PointCloud:
    cfg = cfg or AugConfig()
    pts = pcl.points
    n = pts.shape[0]
    idx = np.flatnonzero(crop_halfspace(pts, rng, cfg.strong_crop_min))
    n_drop = int(np.floor(rng.uniform(0.0, cfg.strong_dropout_max) * idx.size))
    if n_drop:
        idx = np.sort(rng.permutation(idx)[: idx.size - n_drop])
    if idx.size < n:
        idx = np.concatenate([idx, rng.choice(idx, n - idx.size, replace=True)])
    out = pts[idx]
    lim = np.deg2rad(cfg.strong_rot_deg)
    # full turn about the gravity axis; the other axes stay upright like the corpus
    rot = rotation_matrix(0.0, 0.0, rng.uniform(-lim, lim))
    shift = rng.uniform(-cfg.strong_translate, cfg.strong_translate, size=3)
    scale = rng.uniform(*cfg.strong_scale)
    return PointCloud(((out @ rot.T) * scale + shift).astype(pts.dtype))


def _resized_crop(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    p = img.shape[0]
    if h == p and w == p:
        return img.copy()
    rows = top + (np.arange(p) + 0.5) * h / p - 0.5
    cols = left + (np.arange(p) + 0.5) * w / p - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(img, [rr, cc], order=1, mode="nearest").astype(img.dtype)


def augment_img_weak(img: np.ndarray, rng: np.random.Generator, cfg: AugConfig | None = None) -> np.ndarray:
    cfg = cfg or AugConfig()
    p = img.shape[0]
    side = min(p, max(1, int(round(p * math.sqrt(rng.uniform(cfg.img_weak_min_area, 1.0))))))
    top, left = rng.integers(0, p - side + 1, size=2)
    return np.clip(_resized_crop(img, int(top), int(left), side, side), 0.0, 1.0)


def _intensity_op(name: str, img: np.ndarray, m: float) -> np.ndarray:
    if name == "invert":
        return 1.0 - img
    if name == "contrast":
        mean = img.mean()
        return mean + (1.0 + 0.9 * (2 * m - 1)) * (img - mean)
    if name == "brightness":
        return img * (1.0 + 0.9 * (2 * m - 1))
    if name == "posterize":
        levels = 2 ** (1 + int(m * 3))
        return np.round(img * (levels - 1)) / (levels - 1)
    raise ValueError(name)


INTENSITY_OPS = ("invert", "contrast", "brightness", "posterize")


def augment_img_strong(img: np.ndarray, rng: np.random.Generator, cfg: AugConfig | None = None) -> np.ndarray:
    cfg = cfg or AugConfig()
    p = img.shape[0]
    area = rng.uniform(*cfg.img_strong_area)
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    h = min(p, max(1, int(round(p * math.sqrt(area / ratio)))))
    w = min(p, max(1, int(round(p * math.sqrt(area * ratio)))))
    if cfg.img_strong_area == (1.0, 1.0):
        h = w = p
    top = int(rng.integers(0, p - h + 1))
    left = int(rng.integers(0, p - w + 1))
    out = _resized_crop(img, top, left, h, w)
    if rng.uniform() < cfg.img_flip_p:
        out = out[:, ::-1].copy()
    if cfg.img_n_ops:
        for name in rng.choice(INTENSITY_OPS, size=cfg.img_n_ops, replace=False):
            out = _intensity_op(str(name), out, rng.uniform())
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------------------
# corpus


def shift_domain(points: np.ndarray, rng: np.random.Generator, occlusion: float, noise_std: float) -> np.ndarray:
    """Scan-like corruption: one side cut away (up to ``occlusion`` of the points), refilled
    by resampling the survivors, plus isotropic jitter. Keeps N fixed."""
    n = points.shape[0]
    if occlusion > 0:
        keep = np.flatnonzero(crop_halfspace(points, rng, 1.0 - occlusion))
        if keep.size < n:
            extra = rng.choice(keep, size=n - keep.size, replace=True)
            points = points[np.sort(np.concatenate([keep, extra]))]
    if noise_std > 0:
        points = points + rng.normal(scale=noise_std, size=points.shape)
    return points


def make_sample(
    class_id: int,
    sample_id: int,
    cfg: DataConfig,
    seed: int,
    views: int,
    canonical: bool = False,
    shifted: bool = False,
) -> Sample:
    gen_seed = int(sample_rng(seed, sample_id, "gen").integers(0, 2**63))
    pcl = generate_shape(class_spec(class_id, gen_seed), cfg.n_points)
    rng = sample_rng(seed, sample_id, "pose")
    pts = pcl.points
    if cfg.random_yaw and not canonical:
        pts = pts @ rotation_matrix(0.0, 0.0, rng.uniform(0, 2 * np.pi)).T
    if cfg.noise_std > 0 and not canonical:
        pts = pts + rng.normal(scale=cfg.noise_std, size=pts.shape)
    if shifted:
        pts = shift_domain(pts, sample_rng(seed, sample_id, "shift"), cfg.shift_occlusion, cfg.shift_noise_std)
    pcl = PointCloud(normalize_points(pts).astype(np.float32))
    return Sample(pcl, render_views(pcl, views, cfg.pixels, splat=cfg.render_splat), class_id, sample_id)


def _make_split(name, classes, per_class, cfg, seed, views, canonical=False, label_of=None):
    out = []
    # only the unlabeled downstream data carries the domain shift
    shifted = name in ("train", "test")
    for i in range(per_class * len(classes)):
        cls = classes[i % len(classes)]
        sample = make_sample(cls, SPLIT_BASES[name] + i, cfg, seed, views, canonical, shifted)
        if label_of is not None:
            sample.label = label_of(cls)
        out.append(sample)
    return out


def make_dataset(cfg: DataConfig, seed: int) -> DatasetSplit:
    """Deterministic pretrain/train/test/exemplar splits for a master seed."""
    c = cfg.n_classes
    downstream = list(range(c))
    pretrain_classes = list(range(c, 2 * c)) if cfg.disjoint_classes else downstream
    return DatasetSplit(
        pretrain=_make_split("pretrain", pretrain_classes, cfg.pretrain_per_class, cfg, seed, cfg.pretrain_views),
        train=_make_split("train", downstream, cfg.train_per_class, cfg, seed, cfg.views),
        test=_make_split("test", downstream, cfg.test_per_class, cfg, seed, cfg.views),
        class_names=[class_name(k) for k in downstream],
        exemplars=_make_split("exemplars", downstream, cfg.exemplars_per_class, cfg, seed, cfg.pretrain_views, canonical=True),
    )


# ---------------------------------------------------------------------------
# on-disk format
#
# samples.bin is a little-endian record stream. Each record is the header
#   sample_id:u64, label:u32, N:u32, V:u32, P:u32
# followed by N*3 float32 point coordinates (row-major) and V*P*P float32
# pixels (view-major, then row-major). View i sits at azimuth view_azimuths(V)[i].

_HEADER = struct.Struct("<QIIII")
SPLIT_NAMES = ("pretrain", "train", "test", "exemplars")


def write_samples(samples: list[Sample], path: Path) -> None:
    with open(path, "wb") as fh:
        for s in samples:
            views = s.view_stack()
            fh.write(_HEADER.pack(s.sample_id, s.label, s.pcl.n_points, views.shape[0], views.shape[1]))
            fh.write(np.ascontiguousarray(s.pcl.points, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(views, dtype="<f4").tobytes())


def read_samples(path: Path) -> list[Sample]:
    blob = Path(path).read_bytes()
    out, off = [], 0
    while off < len(blob):
        sid, label, n, v, p = _HEADER.unpack_from(blob, off)
        off += _HEADER.size
        pts = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off).reshape(n, 3).astype(np.float32)
        off += n * 3 * 4
        pix = np.frombuffer(blob, dtype="<f4", count=v * p * p, offset=off).reshape(v, p, p).astype(np.float32)
        off += v * p * p * 4
        az = view_azimuths(v)
        views = [ViewImage(pix[i], i, float(az[i])) for i in range(v)]
        out.append(Sample(PointCloud(pts), views, int(label), int(sid)))
    return out


def write_dataset(ds: DatasetSplit, out_dir: str | Path, meta: dict) -> None:
    out_dir = Path(out_dir)
    for name in SPLIT_NAMES:
        split_dir = out_dir / name
        split_dir.mkdir(parents=True, exist_ok=True)
        samples = getattr(ds, name)
        write_samples(samples, split_dir / "samples.bin")
        record = dict(meta, split=name, n_samples=len(samples), class_names=ds.class_names)
        record["checksum"] = zlib.crc32((split_dir / "samples.bin").read_bytes())
        (split_dir / "meta.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_dataset(in_dir: str | Path) -> tuple[DatasetSplit, dict]:
    in_dir = Path(in_dir)
    if not (in_dir / "train" / "meta.json").exists():
        raise FileNotFoundError(f"no dataset found under {in_dir}")
    meta = json.loads((in_dir / "train" / "meta.json").read_text())
    splits = {name: read_samples(in_dir / name / "samples.bin") for name in SPLIT_NAMES}
    return DatasetSplit(class_names=list(meta["class_names"]), **splits), meta
