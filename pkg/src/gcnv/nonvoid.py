"""Nonvoid voxelization: bias-free patch embedding, occupancy and sparse extraction.

A patch whose centred input is identically zero embeds to an exactly zero
feature vector, because the embedding convolution has no bias. Thresholding
feature norms at a tiny epsilon therefore separates background from
foreground without any tuning.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import defaults
from . import tensor as T
from .tensor import Tensor
from .volume import derive_background_constant

TABLE_COLUMNS = (
    "Dataset",
    "Non-zero Ratio (%)",
    "Cropped Ratio (%)",
    "Nonvoid Voxels (k)",
    "Traditional Voxels (k)",
    "Embedded Voxel Saving (%)",
)


@dataclass(frozen=True)
class EmbedConfig:
    kernel: int = defaults.EMBED_KERNEL
    stride: int = defaults.EMBED_STRIDE
    channels: int = defaults.CHANNELS[0]
    epsilon: float = defaults.EPSILON
    p: int = defaults.NORM_ORDER
    tau_soft: float = defaults.TAU_SOFT
    lambda_nv: float = defaults.LAMBDA_NV

    def __post_init__(self):
        if self.epsilon <= 0 or self.tau_soft <= 0:
            raise ValueError("epsilon and tau_soft must be positive")
        if self.lambda_nv < 0:
            raise ValueError("lambda_nv must be non-negative")
        if self.kernel < 1 or self.stride < 1 or self.channels < 1:
            raise ValueError("kernel, stride and channels must be >= 1")
        if self.p not in (1, 2):
            raise ValueError(f"norm order must be 1 or 2, got {self.p}")


@dataclass
class OccupancyMap:
    bits: np.ndarray

    @property
    def extents(self):
        return self.bits.shape

    @property
    def count(self):
        return int(self.bits.sum())


@dataclass
class SparseVoxelSet:
    """Coordinates, feature rows and stable ids of the occupied voxels at one level."""

    coords: np.ndarray
    features: Tensor
    ids: np.ndarray
    extents: tuple
    level: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.extents = tuple(int(e) for e in self.extents)
        n = len(self.coords)
        if self.features.shape[0] != n or len(self.ids) != n:
            raise ValueError(f"{n} coords, {self.features.shape[0]} feature rows, {len(self.ids)} ids")

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self):
        return self.features.shape[1]

    def with_features(self, features):
        return SparseVoxelSet(self.coords, features, self.ids, self.extents, self.level)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return SparseVoxelSet(self.coords[perm], T.gather(self.features, perm), self.ids[perm], self.extents, self.level)

    def flat_index(self):
        return np.ravel_multi_index(tuple(self.coords.T), self.extents) if len(self) else np.zeros(0, np.int64)

    def densify(self):
        """Scatter feature rows into a zero (H', W', D', C) grid."""
        n_cells = int(np.prod(self.extents))
        grid = T.scatter(self.features, self.flat_index(), n_cells)
        return T.reshape(grid, self.extents + (self.channels,))

    def sorted_by_id(self):
        return self.permuted(np.argsort(self.ids, kind="stable"))


def init_embed_weights(cfg, modalities, seed=defaults.SEED):
    """Uniform in +-1/sqrt(k^3 M): keeps foreground feature norms of order one."""
    bound = 1.0 / np.sqrt(cfg.kernel**3 * modalities)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(cfg.kernel,) * 3 + (modalities, cfg.channels))


def embed_volume(volume, background, weights, cfg):
    """Feature map ``conv3d(X - b, W)`` with stride ``cfg.stride`` and no bias."""
    x = volume.intensities if hasattr(volume, "intensities") else T.as_tensor(volume)
    if any(n < cfg.kernel for n in x.shape[:3]):
        raise ValueError(f"volume extents {x.shape[:3]} smaller than embedding kernel {cfg.kernel}")
    centred = T.sub(x, np.asarray(background, dtype=np.float64))
    return T.conv3d(centred, weights, stride=cfg.stride)


def feature_norms(features, p=defaults.NORM_ORDER):
    return T.lp_norm(features, p=p, axis=-1)


def compute_occupancy(features, cfg):
    norms = feature_norms(T.as_tensor(features), cfg.p).data
    return OccupancyMap(norms > cfg.epsilon)


def voxelize(features, occupancy, level=0):
    """Gather the feature rows of occupied cells in lexicographic (x, y, z) order.

    Ids are the scan-order ranks 0..phi-1 and are carried unchanged downstream.
    """
    features = T.as_tensor(features)
    extents = features.shape[:3]
    if occupancy.bits.shape != extents:
        raise ValueError(f"occupancy extents {occupancy.bits.shape} differ from feature map {extents}")
    flat = np.flatnonzero(occupancy.bits.reshape(-1))
    coords = np.stack(np.unravel_index(flat, extents), axis=1) if flat.size else np.zeros((0, 3), np.int64)
    rows = T.gather(T.reshape(features, (-1, features.shape[3])), flat)
    return SparseVoxelSet(coords, rows, np.arange(len(flat)), extents, level)


def soft_nonvoid_ratio(features, cfg):
    """Mean over all embedded cells of ``sigmoid((||f||_p - eps) / tau_soft)``."""
    features = T.as_tensor(features)
    c = features.shape[-1]
    n_cells = features.size // c
    if n_cells < 1:
        raise ValueError("soft_nonvoid_ratio needs at least one embedded voxel")
    norms = feature_norms(T.reshape(features, (n_cells, c)), cfg.p)
    return T.mean(T.sigmoid(T.mul(T.sub(norms, cfg.epsilon), 1.0 / cfg.tau_soft)))


def total_loss(seg_loss, r_nv, lambda_nv):
    return T.add(seg_loss, T.mul(r_nv, float(lambda_nv)))


# -- statistics -----------------------------------------------------------------------


def saving_from_counts(nonvoid, traditional):
    """Embedded voxel saving, ``1 - nonvoid / traditional``, as a fraction."""
    if traditional <= 0:
        raise ValueError("traditional count must be positive")
    return 1.0 - nonvoid / traditional


def _nonzero_mask(volume, background):
    return np.any(volume.array != np.asarray(background, dtype=np.float64), axis=3)


def cropped_ratio(mask):
    """Bounding box of the set voxels as a fraction of the whole grid."""
    if not mask.any():
        return 0.0
    box = 1
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        box *= hit[-1] - hit[0] + 1
    return box / mask.size


@dataclass
class SavingRow:
    name: str
    nonzero_ratio: float
    cropped_ratio: float
    nonvoid: float
    traditional: float

    @property
    def saving(self):
        return saving_from_counts(self.nonvoid, self.traditional)

    def as_table_row(self):
        return {
            TABLE_COLUMNS[0]: self.name,
            TABLE_COLUMNS[1]: round(100 * self.nonzero_ratio, 2),
            TABLE_COLUMNS[2]: round(100 * self.cropped_ratio, 2),
            TABLE_COLUMNS[3]: round(self.nonvoid / 1000, 4),
            TABLE_COLUMNS[4]: round(self.traditional / 1000, 4),
            TABLE_COLUMNS[5]: round(100 * self.saving, 2),
        }


@dataclass
class SavingTable:
    rows: list = field(default_factory=list)

    def aggregate(self, name="Average"):
        n = len(self.rows)
        return SavingRow(
            name,
            sum(r.nonzero_ratio for r in self.rows) / n,
            sum(r.cropped_ratio for r in self.rows) / n,
            sum(r.nonvoid for r in self.rows) / n,
            sum(r.traditional for r in self.rows) / n,
        )

    def records(self):
        return [r.as_table_row() for r in self.rows] + [self.aggregate().as_table_row()]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.records())
        return buf.getvalue()

    def to_json(self):
        return json.dumps(self.records(), indent=2) + "\n"


def voxel_saving_row(name, volume, weights, cfg, background=None):
    b = derive_background_constant(volume) if background is None else background
    feats = embed_volume(volume, b, weights, cfg)
    occ = compute_occupancy(feats, cfg)
    mask = _nonzero_mask(volume, b)
    return SavingRow(name, float(mask.mean()), cropped_ratio(mask), occ.count, int(np.prod(occ.extents)))


def voxel_saving_stats(volumes, weights, cfg):
    """Table of voxel-saving statistics for ``{name: DenseVolume}``."""
    if not volumes:
        raise ValueError("no volumes to summarise")
    return SavingTable([voxel_saving_row(name, vol, weights, cfg) for name, vol in volumes.items()])


def epsilon_sweep(volume, weights, cfg, eps_grid, background=None):
    """Saving fraction for each threshold in a strictly increasing grid."""
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if np.any(eps_grid <= 0) or np.any(np.diff(eps_grid) <= 0):
        raise ValueError("epsilon grid must be positive and strictly increasing")
    b = derive_background_constant(volume) if background is None else background
    norms = feature_norms(embed_volume(volume, b, weights, cfg), cfg.p).data
    total = norms.size
    return [(float(e), 1.0 - int(np.count_nonzero(norms > e)) / total) for e in eps_grid]
