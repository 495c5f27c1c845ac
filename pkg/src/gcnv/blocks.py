"""Network building blocks on sparse voxel sets.

Blocks are plain functions of ``(inputs, params)`` where ``params`` maps
dotted names to tensors; ``init_*`` functions return matching dicts of numpy
arrays. Variable-length groups (attention subsets, pooling windows) are
bucketed by length and run as one batched call per bucket, so no padding or
masking enters the arithmetic.
"""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, defaults
from . import tensor as T
from .nonvoid import SparseVoxelSet
from .partition import DIRECTION_ORDER, axis_partition, partition_windows


@dataclass
class CostCounter:
    """Per-layer FLOPs (one multiply-accumulate = 2) and attention pairs."""

    flops: dict = field(default_factory=lambda: defaultdict(int))
    pairs: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, layer, flops=0, pairs=0):
        self.flops[layer] += int(flops)
        self.pairs[layer] += int(pairs)

    @property
    def total_flops(self):
        return sum(self.flops.values())

    @property
    def total_pairs(self):
        return sum(self.pairs.values())


def matmul_flops(m, k, n):
    return 2 * m * k * n


def _count(counter, layer, flops=0, pairs=0):
    if counter is not None:
        counter.add(layer, flops, pairs)


def sub_params(params, prefix):
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def prefixed(prefix, params):
    return {f"{prefix}.{k}": v for k, v in params.items()}


# -- positional embedding --------------------------------------------------------------


def positional_embedding(coords, channels, base=defaults.PE_BASE):
    """Fixed 3D sinusoidal code: C/3 dims per axis as sin/cos pairs at geometric frequencies."""
    if channels % 6:
        raise ValueError(f"positional embedding needs channels divisible by 6, got {channels}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    pairs = channels // 6
    freqs = base ** (-6.0 * np.arange(pairs) / channels)
    blocks = []
    for axis in range(3):
        ang = coords[:, axis, None] * freqs
        blocks.append(np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(coords), 2 * pairs))
    return T.Tensor(np.concatenate(blocks, axis=1))


# -- dense layers ----------------------------------------------------------------------


def init_linear(rng, cin, cout, bias=True):
    bound = 1.0 / np.sqrt(cin)
    p = {"w": rng.uniform(-bound, bound, size=(cin, cout))}
    if bias:
        p["b"] = np.zeros(cout)
    return p


def linear(x, params):
    y = T.matmul(x, params["w"])
    return T.add(y, params["b"]) if "b" in params else y


def init_mlp(rng, cin, cout=None, hidden=None):
    cout = cin if cout is None else cout
    hidden = defaults.MLP_RATIO * max(cin, cout) if hidden is None else hidden
    return {**prefixed("fc1", init_linear(rng, cin, hidden)), **prefixed("fc2", init_linear(rng, hidden, cout))}


def mlp(x, params, counter=None, layer="mlp"):
    w1, w2 = params["fc1.w"], params["fc2.w"]
    rows = int(np.prod(x.shape[:-1]))
    _count(counter, layer, matmul_flops(rows, w1.shape[0], w1.shape[1]) + matmul_flops(rows, w2.shape[0], w2.shape[1]))
    return linear(T.gelu(linear(x, sub_params(params, "fc1"))), sub_params(params, "fc2"))


def init_norm(c, bias=True):
    p = {"g": np.ones(c)}
    if bias:
        p["b"] = np.zeros(c)
    return p


def norm(x, params):
    y = T.mul(T.layer_norm(x), params["g"])
    return T.add(y, params["b"]) if "b" in params else y


# -- attention -------------------------------------------------------------------------


def init_attention(rng, channels, q_dim=None, kv_dim=None):
    q_dim = channels if q_dim is None else q_dim
    kv_dim = channels if kv_dim is None else kv_dim
    return {
        **prefixed("q", init_linear(rng, q_dim, channels)),
        **prefixed("k", init_linear(rng, kv_dim, channels)),
        **prefixed("v", init_linear(rng, kv_dim, channels)),
        **prefixed("o", init_linear(rng, channels, channels)),
    }


def _split_heads(x, heads):
    *batch, n, c = x.shape
    x = T.reshape(x, tuple(batch) + (n, heads, c // heads))
    nb = len(batch)
    return T.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))


def _merge_heads(x):
    *batch, h, n, d = x.shape
    nb = len(batch)
    x = T.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return T.reshape(x, tuple(batch) + (n, h * d))


def multi_head_attention(q_in, kv_in, params, heads=defaults.HEADS, mask=None, counter=None, layer="attn", return_weights=False):
    """Scaled dot-product attention over the last two axes, batched over any leading axes.

    ``q_in`` is (..., n_q, C_q), ``kv_in`` is (..., n_kv, C_kv). ``mask`` is an
    optional additive (..., n_q | 1, n_kv) array of logit offsets.
    """
    q_in, kv_in = T.as_tensor(q_in), T.as_tensor(kv_in)
    channels = params["q.w"].shape[1]
    if channels % heads:
        raise ValueError(f"{heads} heads do not divide model dim {channels}")
    if kv_in.shape[-2] < 1:
        raise ValueError("attention needs at least one key")
    if q_in.shape[:-2] != kv_in.shape[:-2]:
        raise T.ShapeError(f"attention batch shapes differ: {q_in.shape} vs {kv_in.shape}")
    d = channels // heads
    q = _split_heads(linear(q_in, sub_params(params, "q")), heads)
    k = _split_heads(linear(kv_in, sub_params(params, "k")), heads)
    v = _split_heads(linear(kv_in, sub_params(params, "v")), heads)
    scores = T.mul(T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = T.add(scores, np.expand_dims(np.asarray(mask, dtype=np.float64), -3))
    weights = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.matmul(weights, v))
    out = linear(ctx, sub_params(params, "o"))
    if counter is not None:
        batch = int(np.prod(q_in.shape[:-2]))
        nq, nkv = q_in.shape[-2], kv_in.shape[-2]
        pairs = batch * nq * nkv
        flops = (
            matmul_flops(batch * nq, q_in.shape[-1], channels)
            + 2 * matmul_flops(batch * nkv, kv_in.shape[-1], channels)
            + 2 * matmul_flops(pairs, 1, channels)
            + matmul_flops(batch * nq, channels, channels)
        )
        counter.add(layer, flops, pairs)
    return (out, weights) if return_weights else out


def _bucketed(groups):
    """Group index arrays by length: {length: (G, length) int array}, shortest first."""
    by_len = defaultdict(list)
    for g in groups:
        by_len[len(g)].append(g)
    return {n: np.stack(gs) for n, gs in sorted(by_len.items())}


def _run_buckets(buckets, fn, n_rows):
    """Apply ``fn(index (G, L)) -> (G, L, C)`` per bucket and reassemble rows 0..n_rows-1."""
    outs, positions = [], []
    for idx in buckets.values():
        out = fn(idx)
        outs.append(T.reshape(out, (-1, out.shape[-1])))
        positions.append(idx.reshape(-1))
    pos = np.concatenate(positions)
    inv = np.empty(n_rows, dtype=np.int64)
    inv[pos] = np.arange(len(pos))
    stacked = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    return T.gather(stacked, inv)


# -- tri-directional dynamic nonvoid voxel transformer ------------------------------------


def init_tdnvt(rng, channels, heads=defaults.HEADS):
    p = {}
    for d in DIRECTION_ORDER:
        p.update(prefixed(f"{d}.norm1", init_norm(channels)))
        p.update(prefixed(f"{d}.attn", init_attention(rng, channels)))
        p.update(prefixed(f"{d}.norm2", init_norm(channels)))
        p.update(prefixed(f"{d}.mlp", init_mlp(rng, channels)))
    return p


def tdnvt_block(
    voxels,
    params,
    window=defaults.WINDOW_SIZE,
    tau_cap=defaults.TAU_CAP,
    heads=defaults.HEADS,
    sequential=True,
    counter=None,
    layer="tdnvt",
):
    """Window partition, then per direction (XY, XZ, YZ): subset self-attention and an MLP.

    Both sublayers are pre-norm residual; the positional code of each voxel's
    coordinates is added to the normalised features entering attention.
    With ``sequential=False`` the three directions run as parallel branches on
    the same input and their residual updates are summed.
    """
    if len(voxels) == 0:
        return voxels
    n, c = len(voxels), voxels.channels
    part = partition_windows(voxels, window)
    pe = positional_embedding(voxels.coords, c)
    x0 = x = voxels.features
    updates = []
    for d in DIRECTION_ORDER:
        if not sequential:
            x = x0
        groups = []
        for rows in part.windows.values():
            subs = axis_partition(voxels.coords[rows], voxels.ids[rows], d, tau_cap)
            groups.extend(rows[s] for s in subs.subsets)
        h = T.add(norm(x, sub_params(params, f"{d}.norm1")), pe)
        attn_p = sub_params(params, f"{d}.attn")

        def run(idx, h=h, attn_p=attn_p, d=d):
            seq = T.reshape(T.gather(h, idx.reshape(-1)), idx.shape + (c,))
            return multi_head_attention(seq, seq, attn_p, heads, counter=counter, layer=f"{layer}.{d}.attn")

        x = T.add(x, _run_buckets(_bucketed(groups), run, n))
        x = T.add(x, mlp(norm(x, sub_params(params, f"{d}.norm2")), sub_params(params, f"{d}.mlp"), counter, f"{layer}.{d}.mlp"))
        updates.append(T.sub(x, x0))
    if not sequential:
        x = x0
        for u in updates:
            x = T.add(x, u)
    return voxels.with_features(x)


# -- residual convolution blocks ------------------------------------------------------------


def init_residual_conv(rng, channels, kernel=3):
    bound = 1.0 / np.sqrt(kernel**3 * channels)
    shape = (kernel,) * 3 + (channels, channels)
    return {
        "conv1.w": rng.uniform(-bound, bound, size=shape),
        "norm1.g": np.ones(channels),
        "conv2.w": rng.uniform(-bound, bound, size=shape),
        "norm2.g": np.ones(channels),
    }


def residual_sparse_conv(voxels, params, counter=None, layer="spconv"):
    """Submanifold residual block: outputs only at occupied sites, void neighbours read as zero.

    ``x + act(norm(conv2(act(norm(conv1(x))))))``; convs and norms carry no
    bias, so zero conv weights give the identity.
    """
    if len(voxels) == 0:
        return voxels
    k = params["conv1.w"].shape[0]
    n, c = len(voxels), voxels.channels
    table = _kernels.neighbor_table(voxels.coords, voxels.extents, k // 2)
    table = np.where(table < 0, n, table).reshape(-1)
    zero_row = np.zeros((1, c))

    def stage(x, w, g):
        cols = T.reshape(T.gather(T.concat([x, zero_row], axis=0), table), (n, k**3 * c))
        y = T.matmul(cols, T.reshape(w, (k**3 * c, w.shape[-1])))
        _count(counter, layer, matmul_flops(n, k**3 * c, w.shape[-1]))
        return T.gelu(T.mul(T.layer_norm(y), g))

    x = voxels.features
    h = stage(x, params["conv1.w"], params["norm1.g"])
    h = stage(h, params["conv2.w"], params["norm2.g"])
    return voxels.with_features(T.add(x, h))


def residual_dense_conv(grid, params, counter=None, layer="conv"):
    """The same block on a dense (H, W, D, C) grid with zero padding."""
    k = params["conv1.w"].shape[0]
    sites = int(np.prod(grid.shape[:3]))

    def stage(x, w, g):
        y = T.conv3d(x, w, stride=1, padding=k // 2)
        _count(counter, layer, matmul_flops(sites, k**3 * w.shape[3], w.shape[4]))
        return T.gelu(T.mul(T.layer_norm(y), g))

    h = stage(grid, params["conv1.w"], params["norm1.g"])
    h = stage(h, params["conv2.w"], params["norm2.g"])
    return T.add(grid, h)


# -- geometrical cross-attention ----------------------------------------------------------------


def init_gca_down(rng, c_in, c_out=None):
    c_out = c_in if c_out is None else c_out
    return {
        **prefixed("kv_mlp", init_mlp(rng, c_in, c_out)),
        **prefixed("attn", init_attention(rng, c_out, q_dim=c_in, kv_dim=c_out)),
    }


def gca_down(voxels, pool_stride, params, heads=defaults.HEADS, counter=None, layer="gca_down"):
    """One coarse voxel per non-empty ``pool_stride`` window.

    Query: max-pooled window features plus the coarse coordinate code.
    Keys/values: MLP of each member's features plus its fine coordinate code.
    The coarse voxel keeps the smallest member id.
    """
    part = partition_windows(voxels, pool_stride)
    coarse_extents = tuple(-(-e // pool_stride) for e in voxels.extents)
    keys = np.array(list(part.windows.keys()), dtype=np.int64).reshape(-1, 3)
    c_in = voxels.channels
    if len(part) == 0:
        c_out = params["attn.q.w"].shape[1]
        return SparseVoxelSet(keys, T.Tensor(np.zeros((0, c_out))), np.zeros(0, np.int64), coarse_extents, voxels.level + 1)
    members = list(part.windows.values())
    ids = np.array([voxels.ids[m].min() for m in members], dtype=np.int64)
    kv = mlp(T.add(voxels.features, positional_embedding(voxels.coords, c_in)), sub_params(params, "kv_mlp"), counter, f"{layer}.mlp")
    pe_coarse = positional_embedding(keys, c_in).data
    attn_p = sub_params(params, "attn")

    by_len = defaultdict(list)
    for w, m in enumerate(members):
        by_len[len(m)].append(w)
    outs, order = [], []
    for length, wins in sorted(by_len.items()):
        idx = np.stack([members[w] for w in wins])
        feats = T.reshape(T.gather(voxels.features, idx.reshape(-1)), idx.shape + (c_in,))
        pooled = T.tmax(feats, axis=1, keepdims=True)
        q = T.add(pooled, pe_coarse[wins][:, None, :])
        kvb = T.reshape(T.gather(kv, idx.reshape(-1)), idx.shape + (kv.shape[-1],))
        out = multi_head_attention(q, kvb, attn_p, heads, counter=counter, layer=f"{layer}.attn")
        outs.append(T.reshape(out, (len(wins), out.shape[-1])))
        order.extend(wins)
    inv = np.empty(len(members), dtype=np.int64)
    inv[np.asarray(order)] = np.arange(len(order))
    stacked = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    return SparseVoxelSet(keys, T.gather(stacked, inv), ids, coarse_extents, voxels.level + 1)


def init_gca_up(rng, c_fine, c_coarse=None):
    c_coarse = c_fine if c_coarse is None else c_coarse
    return {
        **prefixed("q_mlp", init_mlp(rng, c_fine)),
        **prefixed("attn", init_attention(rng, c_fine, q_dim=c_fine, kv_dim=c_coarse)),
        **prefixed("out_mlp", init_mlp(rng, c_fine)),
    }


def gca_up(fine, coarse, pool_stride, params, heads=defaults.HEADS, radius=defaults.GCA_UP_RADIUS, counter=None, layer="gca_up"):
    """Refine fine voxels by attending from their features to the coarse level.

    Query: MLP of fine features plus fine coordinate code. Keys/values: the
    coarse voxel covering the query's window plus its coordinate code, and with
    ``radius > 0`` also the occupied coarse voxels within that Chebyshev radius.
    An output MLP gives the new fine features; coords and ids are unchanged.
    """
    if len(fine) == 0:
        return fine
    c_f, c_c = fine.channels, coarse.channels
    parent = fine.coords // pool_stride
    lookup = np.full(coarse.extents, -1, dtype=np.int64)
    if len(coarse):
        lookup[tuple(coarse.coords.T)] = np.arange(len(coarse))
    inside = np.all(parent < np.asarray(coarse.extents), axis=1)
    rows = np.full(len(fine), -1, dtype=np.int64)
    rows[inside] = lookup[tuple(parent[inside].T)]
    if np.any(rows < 0):
        missing = fine.coords[np.flatnonzero(rows < 0)[0]]
        raise ValueError(f"fine voxel at {tuple(missing)} has no coarse counterpart")

    q = mlp(T.add(fine.features, positional_embedding(fine.coords, c_f)), sub_params(params, "q_mlp"), counter, f"{layer}.q_mlp")
    kv_all = T.add(coarse.features, positional_embedding(coarse.coords, c_c))
    attn_p = sub_params(params, "attn")
    q3 = T.reshape(q, (len(fine), 1, c_f))
    if radius == 0:
        kv = T.reshape(T.gather(kv_all, rows), (len(fine), 1, c_c))
        ctx = multi_head_attention(q3, kv, attn_p, heads, counter=counter, layer=f"{layer}.attn")
    else:
        table = _kernels.neighbor_table(coarse.coords, coarse.extents, radius)[rows]
        mask = np.where(table < 0, defaults.MASK_LOGIT, 0.0)[:, None, :]
        padded = T.concat([kv_all, np.zeros((1, c_c))], axis=0)
        idx = np.where(table < 0, len(coarse), table)
        kv = T.reshape(T.gather(padded, idx.reshape(-1)), idx.shape + (c_c,))
        ctx = multi_head_attention(q3, kv, attn_p, heads, mask=mask, counter=None)
        if counter is not None:
            real = int((table >= 0).sum())
            counter.add(f"{layer}.attn", 2 * matmul_flops(real, 1, c_f) + matmul_flops(len(fine), c_f, c_f) * 2 + 2 * matmul_flops(real, c_c, c_f), real)
    out = mlp(T.reshape(ctx, (len(fine), c_f)), sub_params(params, "out_mlp"), counter, f"{layer}.out_mlp")
    return fine.with_features(out)
