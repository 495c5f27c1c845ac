"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba versions are used when numba imports and ``GCNV_DISABLE_NUMBA`` is
unset (or "0"). Both paths are kept importable as ``numpy_*`` / ``numba_*``
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.

All kernels reduce in a fixed index order, so a given path is bit-for-bit
deterministic. The two paths agree to rounding, not bitwise.
"""

import os

import numpy as np

_flag = os.environ.get("GCNV_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by GCNV_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _out_extent(n, k, s):
    return (n - k) // s + 1


# --------------------------------------------------------------------------
# dense 3D convolution, channels-last, no bias, no padding (pad beforehand)
# x: (H, W, D, Cin)   w: (k, k, k, Cin, Cout)   out: (H', W', D', Cout)
# --------------------------------------------------------------------------


def numpy_conv3d(x, w, stride):
    k = w.shape[0]
    H, W, D, _ = x.shape
    ho, wo, do = _out_extent(H, k, stride), _out_extent(W, k, stride), _out_extent(D, k, stride)
    out = np.zeros((ho, wo, do, w.shape[4]))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = x[
                    a : a + stride * (ho - 1) + 1 : stride,
                    b : b + stride * (wo - 1) + 1 : stride,
                    c : c + stride * (do - 1) + 1 : stride,
                ]
                out += patch @ w[a, b, c]
    return out


def numpy_conv3d_grad_input(g, w, stride, x_shape):
    k = w.shape[0]
    ho, wo, do, _ = g.shape
    gx = np.zeros(x_shape)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gx[
                    a : a + stride * (ho - 1) + 1 : stride,
                    b : b + stride * (wo - 1) + 1 : stride,
                    c : c + stride * (do - 1) + 1 : stride,
                ] += g @ w[a, b, c].T
    return gx


def numpy_conv3d_grad_weight(x, g, stride, k):
    ho, wo, do, cout = g.shape
    cin = x.shape[3]
    gw = np.zeros((k, k, k, cin, cout))
    g2 = g.reshape(-1, cout)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                patch = x[
                    a : a + stride * (ho - 1) + 1 : stride,
                    b : b + stride * (wo - 1) + 1 : stride,
                    c : c + stride * (do - 1) + 1 : stride,
                ]
                gw[a, b, c] = patch.reshape(-1, cin).T @ g2
    return gw


def _nb_conv3d(x, w, stride):
    k = w.shape[0]
    H, W, D, cin = x.shape
    cout = w.shape[4]
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1
    do = (D - k) // stride + 1
    out = np.zeros((ho, wo, do, cout))
    for i in range(ho):
        for j in range(wo):
            for l in range(do):
                for o in range(cout):
                    acc = 0.0
                    for a in range(k):
                        for b in range(k):
                            for c in range(k):
                                for m in range(cin):
                                    acc += x[i * stride + a, j * stride + b, l * stride + c, m] * w[a, b, c, m, o]
                    out[i, j, l, o] = acc
    return out


def _nb_conv3d_grad_input(g, w, stride, x_shape):
    k = w.shape[0]
    ho, wo, do, cout = g.shape
    cin = w.shape[3]
    gx = np.zeros((x_shape[0], x_shape[1], x_shape[2], x_shape[3]))
    for i in range(ho):
        for j in range(wo):
            for l in range(do):
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            for m in range(cin):
                                acc = 0.0
                                for o in range(cout):
                                    acc += g[i, j, l, o] * w[a, b, c, m, o]
                                gx[i * stride + a, j * stride + b, l * stride + c, m] += acc
    return gx


def _nb_conv3d_grad_weight(x, g, stride, k):
    ho, wo, do, cout = g.shape
    cin = x.shape[3]
    gw = np.zeros((k, k, k, cin, cout))
    for a in range(k):
        for b in range(k):
            for c in range(k):
                for m in range(cin):
                    for o in range(cout):
                        acc = 0.0
                        for i in range(ho):
                            for j in range(wo):
                                for l in range(do):
                                    acc += x[i * stride + a, j * stride + b, l * stride + c, m] * g[i, j, l, o]
                        gw[a, b, c, m, o] = acc
    return gw


# --------------------------------------------------------------------------
# sparse neighbourhood lookup: row index of each occupied neighbour, -1 if void
# --------------------------------------------------------------------------


def _offsets(radius):
    r = np.arange(-radius, radius + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3).astype(np.int64)


def numpy_neighbor_table(coords, extents, radius):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    ext = np.asarray(extents, dtype=np.int64)
    offs = _offsets(radius)
    grid = np.full(tuple(ext), -1, dtype=np.int64)
    grid[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(len(coords))
    table = np.full((len(coords), len(offs)), -1, dtype=np.int64)
    for o, off in enumerate(offs):
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < ext), axis=1)
        table[ok, o] = grid[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
    return table


def _nb_neighbor_table(coords, ext, offs):
    n = coords.shape[0]
    grid = np.full((ext[0], ext[1], ext[2]), -1, dtype=np.int64)
    for i in range(n):
        grid[coords[i, 0], coords[i, 1], coords[i, 2]] = i
    table = np.full((n, offs.shape[0]), -1, dtype=np.int64)
    for i in range(n):
        for o in range(offs.shape[0]):
            x = coords[i, 0] + offs[o, 0]
            y = coords[i, 1] + offs[o, 1]
            z = coords[i, 2] + offs[o, 2]
            if 0 <= x < ext[0] and 0 <= y < ext[1] and 0 <= z < ext[2]:
                table[i, o] = grid[x, y, z]
    return table


# --------------------------------------------------------------------------
# nearest Euclidean distance from every point of `a` to the point set `b`
# --------------------------------------------------------------------------


def numpy_nearest_distances(a, b, chunk=2048):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(a))
    for start in range(0, len(a), chunk):
        blk = a[start : start + chunk]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _nb_nearest_distances(a, b):
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out


# --------------------------------------------------------------------------
# signed-rank statistic for every one of the 2**n sign assignments
# --------------------------------------------------------------------------


def numpy_signed_rank_sums(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    n = len(ranks)
    bits = (np.arange(2**n, dtype=np.int64)[:, None] >> np.arange(n, dtype=np.int64)) & 1
    return bits.astype(np.float64) @ ranks


def _nb_signed_rank_sums(ranks):
    n = ranks.shape[0]
    out = np.zeros(2**n)
    for mask in range(2**n):
        acc = 0.0
        for i in range(n):
            if (mask >> i) & 1:
                acc += ranks[i]
        out[mask] = acc
    return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = njit(cache=True, nogil=True)
    numba_conv3d = _jit(_nb_conv3d)
    numba_conv3d_grad_input = _jit(_nb_conv3d_grad_input)
    numba_conv3d_grad_weight = _jit(_nb_conv3d_grad_weight)
    _numba_neighbor_table = _jit(_nb_neighbor_table)
    _numba_nearest = _jit(_nb_nearest_distances)
    _numba_rank_sums = _jit(_nb_signed_rank_sums)

    def numba_neighbor_table(coords, extents, radius):
        coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, 3)
        return _numba_neighbor_table(coords, np.asarray(extents, dtype=np.int64), _offsets(radius))

    def numba_nearest_distances(a, b):
        a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
        b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
        return _numba_nearest(a, b)

    def numba_signed_rank_sums(ranks):
        return _numba_rank_sums(np.ascontiguousarray(ranks, dtype=np.float64))

    def conv3d(x, w, stride):
        return numba_conv3d(np.ascontiguousarray(x), np.ascontiguousarray(w), stride)

    def conv3d_grad_input(g, w, stride, x_shape):
        return numba_conv3d_grad_input(
            np.ascontiguousarray(g), np.ascontiguousarray(w), stride, tuple(x_shape)
        )

    def conv3d_grad_weight(x, g, stride, k):
        return numba_conv3d_grad_weight(np.ascontiguousarray(x), np.ascontiguousarray(g), stride, k)

    neighbor_table = numba_neighbor_table
    nearest_distances = numba_nearest_distances
    signed_rank_sums = numba_signed_rank_sums
else:
    conv3d = numpy_conv3d
    conv3d_grad_input = numpy_conv3d_grad_input
    conv3d_grad_weight = numpy_conv3d_grad_weight
    neighbor_table = numpy_neighbor_table
    nearest_distances = numpy_nearest_distances
    signed_rank_sums = numpy_signed_rank_sums

offsets = _offsets
