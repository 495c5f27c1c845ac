"""Window partitioning and tri-directional subset construction.

Voxels are grouped into disjoint t x t x t windows. Inside a window, each of
the three plane directions sorts the members along its normal axis and cuts
the sorted run into chunks of at most ``tau_cap`` voxels; attention is then
computed within chunks only.
"""

import json
from dataclasses import dataclass, field

import numpy as np

# direction name -> (sort axis, tie-break axes); ties resolve in plane raster
# order (higher axis index first), then by voxel id
DIRECTIONS = {
    "XY": (2, (1, 0)),
    "XZ": (1, (2, 0)),
    "YZ": (0, (2, 1)),
}
DIRECTION_ORDER = ("XY", "XZ", "YZ")


@dataclass
class WindowPartition:
    """Window key -> row positions (into the voxel set), each sorted by voxel id."""

    window_size: int
    windows: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.windows)

    def sizes(self):
        return np.array([len(m) for m in self.windows.values()], dtype=np.int64)


@dataclass
class DirectionalSubsets:
    direction: str
    tau_cap: int
    order: np.ndarray
    subsets: list

    def subset_ids(self, ids):
        return [ids[s] for s in self.subsets]


def partition_windows(voxels, t):
    """Assign voxel (x, y, z) to window (x // t, y // t, z // t); empty windows are absent."""
    if t < 1:
        raise ValueError(f"window size must be >= 1, got {t}")
    part = WindowPartition(t)
    if len(voxels) == 0:
        return part
    keys = voxels.coords // t
    order = np.lexsort((voxels.ids, keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    breaks = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
    for chunk in np.split(order, breaks):
        part.windows[tuple(int(v) for v in keys[chunk[0]])] = chunk
    return part


def subset_count(phi, tau_cap):
    if phi < 1 or tau_cap < 1:
        raise ValueError("phi and tau_cap must be >= 1")
    return phi // tau_cap + int(phi % tau_cap > 0)


def axis_partition(coords, ids, direction, tau_cap):
    """Sort one window's members for ``direction`` and chunk them by ``tau_cap``.

    ``coords``/``ids`` describe the window members; returned positions index
    into them.
    """
    coords = np.asarray(coords).reshape(-1, 3)
    ids = np.asarray(ids)
    if len(coords) == 0:
        raise ValueError("axis_partition needs a non-empty window")
    axis, ties = DIRECTIONS[direction]
    order = np.lexsort((ids, coords[:, ties[1]], coords[:, ties[0]], coords[:, axis]))
    n_sub = subset_count(len(order), tau_cap)
    subsets = [order[s * tau_cap : (s + 1) * tau_cap] for s in range(n_sub)]
    return DirectionalSubsets(direction, tau_cap, order, subsets)


def attention_pair_count(partition, voxels, tau_cap, mode="tri_directional"):
    """Exact number of (query, key) pairs attention evaluates over the partition."""
    if mode == "dense3d":
        return int(sum(int(n) ** 2 for n in partition.sizes()))
    if mode != "tri_directional":
        raise ValueError(f"unknown mode {mode!r}")
    total = 0
    for rows in partition.windows.values():
        for direction in DIRECTION_ORDER:
            subs = axis_partition(voxels.coords[rows], voxels.ids[rows], direction, tau_cap)
            total += sum(len(s) ** 2 for s in subs.subsets)
    return total


def pair_count_report(partition, voxels, tau_cap):
    dense = attention_pair_count(partition, voxels, tau_cap, "dense3d")
    tri = attention_pair_count(partition, voxels, tau_cap, "tri_directional")
    return {
        "window_size": partition.window_size,
        "tau_cap": tau_cap,
        "windows": len(partition),
        "voxels": int(partition.sizes().sum()) if len(partition) else 0,
        "dense3d_pairs": dense,
        "tri_directional_pairs": tri,
        "reduction_factor": dense / tri if tri else None,
    }


def pair_count_json(partition, voxels, tau_cap):
    return json.dumps(pair_count_report(partition, voxels, tau_cap), indent=2) + "\n"
