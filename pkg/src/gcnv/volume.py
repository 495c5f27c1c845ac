"""Dense volumes: normalisation metadata, background constant, phantoms and I/O.

On disk a volume is two files: ``<stem>.raw`` holding little-endian float32
values in (H, W, D, M) row-major order, and ``<stem>.json`` holding
``{"extents": [H, W, D], "modalities": M, "scheme": ..., "stats": {...}}``.
The same raw+JSON layout, with an explicit dtype per entry, stores named
weight tensors (:func:`write_tensors` / :func:`read_tensors`).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import defaults
from .tensor import Tensor

SCHEMES = ("CT", "MRI_MASKED", "MRI_UNMASKED")


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """How intensities were normalised; CT needs per-channel global stats."""

    scheme: str
    mean: tuple = None
    std: tuple = None
    p005: tuple = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise VolumeFormatError(f"unknown normalization scheme {self.scheme!r}; expected one of {SCHEMES}")

    def stats_dict(self):
        out = {}
        for key in ("mean", "std", "p005"):
            val = getattr(self, key)
            if val is not None:
                out[key] = [float(v) for v in val]
        return out


@dataclass
class DenseVolume:
    intensities: Tensor
    norm: Normalization = field(default_factory=lambda: Normalization("MRI_MASKED"))

    def __post_init__(self):
        if not isinstance(self.intensities, Tensor):
            self.intensities = Tensor(self.intensities)
        arr = self.intensities.data
        if arr.ndim == 3:
            self.intensities = Tensor(arr[..., None])
            arr = self.intensities.data
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"volume must be H x W x D x M with all extents >= 1, got {arr.shape}")

    @property
    def array(self):
        return self.intensities.data

    @property
    def extents(self):
        return self.array.shape[:3]

    @property
    def modalities(self):
        return self.array.shape[3]


def derive_background_constant(volume, bins=defaults.HISTOGRAM_BINS):
    """Per-channel value that background voxels hold after normalisation.

    CT uses the fingerprint stats, ``(p0.5 - mean) / std``. Masked MRI has a
    zero background. Unmasked MRI takes the histogram mode: the fullest of
    ``bins`` uniform bins over [min, max] (lowest bin on ties), then the most
    frequent exact value inside that bin (smallest on ties), so the
    constant equals the stored background value bit for bit.
    """
    norm = volume.norm
    m = volume.modalities
    if norm.scheme == "CT":
        if norm.mean is None or norm.std is None or norm.p005 is None:
            raise ValueError("CT normalization requires mean, std and p005 stats")
        mean, std, p005 = (np.broadcast_to(np.asarray(v, dtype=np.float64), (m,)) for v in (norm.mean, norm.std, norm.p005))
        if np.any(std <= 0):
            raise ValueError("CT std must be positive")
        # intensities are stored as float32, so the constant must be too
        return ((p005 - mean) / std).astype(np.float32).astype(np.float64)
    if norm.scheme == "MRI_MASKED":
        return np.zeros(m)
    return np.array([_histogram_mode(volume.array[..., c].ravel(), bins) for c in range(m)])


def _histogram_mode(values, bins):
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return lo
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    b = int(np.argmax(counts))
    inside = values[(values >= edges[b]) & ((values < edges[b + 1]) if b < bins - 1 else (values <= hi))]
    uniq, cnt = np.unique(inside, return_counts=True)
    return float(uniq[np.argmax(cnt)])


# -- phantoms -------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    intensity: tuple = defaults.PHANTOM_INTENSITY
    label: int = 1

    def mask(self, grid):
        c = np.asarray(self.center, dtype=np.float64)
        d2 = sum((grid[i] - c[i]) ** 2 for i in range(3))
        return d2 <= self.radius**2

    def fits(self, extents):
        return all(self.center[i] - self.radius >= -0.5 and self.center[i] + self.radius <= extents[i] - 0.5 for i in range(3))


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    intensity: tuple = defaults.PHANTOM_INTENSITY
    label: int = 1

    def mask(self, grid):
        m = np.ones(grid[0].shape, dtype=bool)
        for i in range(3):
            m &= (grid[i] >= self.lo[i]) & (grid[i] < self.hi[i])
        return m

    def fits(self, extents):
        return all(0 <= self.lo[i] < self.hi[i] <= extents[i] for i in range(3))


@dataclass
class Phantom:
    seed: int
    background_fraction: float
    shapes: tuple
    volume: DenseVolume
    labels: np.ndarray
    background: np.ndarray

    @property
    def achieved_background_fraction(self):
        return float(np.mean(self.labels == 0))


def generate_phantom(
    seed,
    extents,
    background_fraction=None,
    shapes=None,
    modalities=1,
    background=0.0,
    margin=defaults.PHANTOM_MARGIN,
    norm=None,
):
    """Synthetic volume whose label is 0 exactly where every channel equals background.

    With ``shapes`` the foreground is their union (later shapes overwrite
    labels). Without, ``n`` foreground voxels, ``n = round((1 - f) * N)``, are
    taken as the voxels nearest (in radius-scaled distance) to a few random
    blob centres, which hits the requested fraction to within one voxel.
    Foreground intensities are at least ``margin`` away from background.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 1:
        raise ValueError(f"extents must be three positive ints, got {extents}")
    rng = np.random.default_rng(seed)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float32), (modalities,)).astype(np.float64)
    grid = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extents), indexing="ij")
    total = int(np.prod(extents))
    labels = np.zeros(extents, dtype=np.int64)
    lows = np.zeros(extents + (modalities,))
    highs = np.zeros(extents + (modalities,))

    if shapes is not None:
        for shp in shapes:
            if not shp.fits(extents):
                raise ValueError(f"{shp} does not fit in extents {extents}")
            m = shp.mask(grid)
            labels[m] = shp.label
            lows[m], highs[m] = shp.intensity
        achieved = float(np.mean(labels == 0))
        if background_fraction is None:
            background_fraction = achieved
        elif abs(achieved - background_fraction) > defaults.PHANTOM_FRACTION_TOLERANCE:
            raise ValueError(
                f"shapes give background fraction {achieved:.4f}, requested {background_fraction:.4f}"
            )
    else:
        if background_fraction is None:
            raise ValueError("either background_fraction or shapes is required")
        if not 0.0 <= background_fraction < 1.0:
            raise ValueError(f"background_fraction must be in [0, 1), got {background_fraction}")
        n_fg = int(round((1.0 - background_fraction) * total))
        n_blobs = int(rng.integers(1, 4))
        centers = rng.uniform(0.25, 0.75, size=(n_blobs, 3)) * np.asarray(extents)
        scales = rng.uniform(0.6, 1.4, size=n_blobs)
        pts = np.stack([g.ravel() for g in grid], axis=1)
        score = np.min(
            np.linalg.norm(pts[:, None, :] - centers[None], axis=2) / scales[None], axis=1
        )
        order = np.lexsort((np.arange(total), score))
        flat = np.zeros(total, dtype=np.int64)
        flat[order[:n_fg]] = 1
        labels = flat.reshape(extents)
        lows[labels > 0], highs[labels > 0] = defaults.PHANTOM_INTENSITY
        shapes = ()

    fg = labels > 0
    data = np.broadcast_to(bg, extents + (modalities,)).copy()
    if fg.any():
        lo, hi = lows[fg], highs[fg]
        vals = lo + rng.uniform(0.0, 1.0, size=lo.shape) * (hi - lo)
        gap = np.abs(vals - bg)
        # push draws out of the forbidden band; the slack survives float32 rounding
        vals = np.where(gap < margin, bg + margin * (1 + 1e-4) + gap, vals)
        data[fg] = vals
    data = data.astype(np.float32).astype(np.float64)
    vol = DenseVolume(Tensor(data), norm or Normalization("MRI_MASKED" if np.all(bg == 0) else "MRI_UNMASKED"))
    return Phantom(seed, float(np.mean(labels == 0)), tuple(shapes), vol, labels, bg)


# -- file I/O -------------------------------------------------------------------


def _paths(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".raw", ".json") else p
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def write_volume(volume, path):
    raw, meta = _paths(path)
    header = {
        "extents": list(volume.extents),
        "modalities": volume.modalities,
        "scheme": volume.norm.scheme,
        "stats": volume.norm.stats_dict(),
    }
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(volume.array.astype("<f4").tobytes(order="C"))
    meta.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return raw, meta


def read_volume(path):
    raw, meta = _paths(path)
    try:
        header = json.loads(meta.read_text(encoding="utf-8"))
        extents = [int(e) for e in header["extents"]]
        m = int(header["modalities"])
        scheme = header["scheme"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{meta}: malformed header ({exc})") from None
    if scheme not in SCHEMES:
        raise VolumeFormatError(f"{meta}: unknown scheme {scheme!r}")
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    expected = int(np.prod(extents)) * m
    if payload.size != expected or raw.stat().st_size % 4:
        raise VolumeFormatError(f"{raw}: header declares {expected} floats, payload holds {raw.stat().st_size / 4:g}")
    stats = header.get("stats", {})
    norm = Normalization(scheme, *(tuple(stats[k]) if k in stats else None for k in ("mean", "std", "p005")))
    data = payload.astype(np.float64).reshape(extents + [m])
    return DenseVolume(Tensor(data), norm)


_DTYPES = {"float32": "<f4", "float64": "<f8"}


def write_tensors(tensors, path, dtype="float64"):
    """Named arrays to one raw payload plus a JSON index of (shape, offset)."""
    raw, meta = _paths(path)
    code = _DTYPES[dtype]
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name])
        buf = arr.astype(code).tobytes(order="C")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(b"".join(chunks))
    meta.write_text(json.dumps({"dtype": dtype, "tensors": index}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return raw, meta


def read_tensors(path):
    raw, meta = _paths(path)
    header = json.loads(meta.read_text(encoding="utf-8"))
    code = _DTYPES.get(header.get("dtype"))
    if code is None:
        raise VolumeFormatError(f"{meta}: unknown dtype {header.get('dtype')!r}")
    blob = raw.read_bytes()
    width = np.dtype(code).itemsize
    out = {}
    for name, entry in header["tensors"].items():
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + count * width > len(blob):
            raise VolumeFormatError(f"{raw}: tensor {name!r} runs past end of payload")
        out[name] = np.frombuffer(blob, dtype=code, count=count, offset=start).astype(np.float64).reshape(entry["shape"])
    return out
