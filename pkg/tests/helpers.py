"""Shared fixtures-as-functions and brute-force oracles for the test suite."""

import itertools

import numpy as np

from gcnv import tensor as T
from gcnv.nonvoid import SparseVoxelSet


def naive_conv3d(x, w, stride=1, padding=0):
    """Seven nested loops over output position, kernel offset and channels."""
    if padding:
        x = np.pad(x, ((padding, padding),) * 3 + ((0, 0),))
    k, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    out_ext = [(n - k) // stride + 1 for n in x.shape[:3]]
    out = np.zeros(out_ext + [cout])
    for i, j, l in itertools.product(*(range(e) for e in out_ext)):
        for a, b, c in itertools.product(range(k), repeat=3):
            for ci in range(cin):
                for co in range(cout):
                    out[i, j, l, co] += x[i * stride + a, j * stride + b, l * stride + c, ci] * w[a, b, c, ci, co]
    return out


def random_voxels(rng, n, channels, extents=(8, 8, 8), level=0, requires_grad=False):
    """``n`` distinct random sites with random features and shuffled ids."""
    cells = rng.choice(int(np.prod(extents)), size=n, replace=False)
    coords = np.stack(np.unravel_index(np.sort(cells), extents), axis=1)
    feats = T.Tensor(rng.uniform(-1, 1, size=(n, channels)), requires_grad=requires_grad)
    return SparseVoxelSet(coords, feats, rng.permutation(n), extents, level)


def brute_attention(q_in, kv_in, p, heads):
    """Per-head loops: softmax(q k^T / sqrt(d)) v, concatenated, output-projected."""
    q = q_in @ p["q.w"] + p["q.b"]
    k = kv_in @ p["k.w"] + p["k.b"]
    v = kv_in @ p["v.w"] + p["v.b"]
    c = q.shape[1]
    d = c // heads
    ctx = np.zeros((q.shape[0], c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            logits = np.array([q[i, sl] @ k[j, sl] / np.sqrt(d) for j in range(k.shape[0])])
            e = np.exp(logits - logits.max())
            wts = e / e.sum()
            ctx[i, sl] = sum(wts[j] * v[j, sl] for j in range(k.shape[0]))
    return ctx @ p["o.w"] + p["o.b"]


def numpy_params(params):
    return {k: np.asarray(v.data if isinstance(v, T.Tensor) else v) for k, v in params.items()}


def randomize(params, rng, scale=0.3):
    """Perturb every parameter (biases and gains included) so gradient checks see generic values."""
    return {k: v + scale * rng.standard_normal(np.shape(v)) for k, v in params.items()}
