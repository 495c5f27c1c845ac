"""The full segmentation network, its loss, a toy training loop and FLOP accounting.

Layout: bias-free patch embedding and nonvoid voxelization, then per encoder
stage a 3DNVT block and GCA down-sampling. Every encoder level passes through
a feature-extraction block (residual sparse conv at the finest
``conv_levels`` levels, 3DNVT elsewhere, including the bottleneck). The decoder
climbs back with GCA up-sampling added to the extracted encoder features, and a
per-patch linear head expands each finest-level voxel back to its ``s^3``
input voxels. Void patches receive a learned fill logit vector.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import blocks as B
from . import defaults
from . import tensor as T
from .nonvoid import EmbedConfig, OccupancyMap, compute_occupancy, embed_volume, init_embed_weights, soft_nonvoid_ratio, total_loss, voxelize
from .volume import derive_background_constant


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stages: int = defaults.STAGES
    channels: tuple = defaults.CHANNELS
    windows: tuple = defaults.WINDOWS
    tau_caps: tuple = (defaults.TAU_CAP,) * defaults.STAGES
    pool_stride: int = defaults.POOL_STRIDE
    classes: int = defaults.CLASSES
    heads: int = defaults.HEADS
    conv_levels: int = defaults.CONV_LEVELS
    gca_up_radius: int = defaults.GCA_UP_RADIUS
    sequential_directions: bool = True
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    seed: int = defaults.SEED

    def __post_init__(self):
        for name in ("channels", "windows", "tau_caps"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.stages < 1:
            raise ValueError("need at least one stage")
        for name in ("channels", "windows", "tau_caps"):
            if len(getattr(self, name)) != self.stages:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {self.stages} stages")
        for c in self.channels:
            if c % 6 or c % self.heads:
                raise ValueError(f"channel count {c} must be divisible by 6 and by heads={self.heads}")
        if self.embed.channels != self.channels[0]:
            raise ValueError(f"embedding channels {self.embed.channels} differ from stage-0 channels {self.channels[0]}")
        if self.embed.kernel != self.embed.stride:
            raise ValueError("the per-patch head needs embedding kernel == stride")
        if self.classes < 2 or self.pool_stride < 1:
            raise ValueError("need classes >= 2 and pool_stride >= 1")

    @property
    def level_channels(self):
        """Channels at levels 0..stages (the bottleneck repeats the last stage)."""
        return self.channels + (self.channels[-1],)

    @property
    def required_divisor(self):
        return self.embed.stride * self.pool_stride**self.stages

    def check_extents(self, extents):
        d = self.required_divisor
        if any(e % d for e in extents):
            raise ValueError(
                f"volume extents {tuple(extents)} must be divisible by {d} "
                f"(embedding stride {self.embed.stride} x pool stride {self.pool_stride}^{self.stages})"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "embed" in d and isinstance(d["embed"], dict):
            d["embed"] = EmbedConfig(**d["embed"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def init_weights(cfg, modalities=1, seed=None):
    """Fresh parameters as a flat ``{dotted name: ndarray}`` dict."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    ch = cfg.level_channels
    w = {"embed.w": init_embed_weights(cfg.embed, modalities, seed)}
    for i in range(cfg.stages):
        w.update(B.prefixed(f"enc{i}", B.init_tdnvt(rng, ch[i], cfg.heads)))
        w.update(B.prefixed(f"down{i}", B.init_gca_down(rng, ch[i], ch[i + 1])))
    for lvl in range(cfg.stages + 1):
        if lvl < cfg.conv_levels:
            w.update(B.prefixed(f"ext{lvl}", B.init_residual_conv(rng, ch[lvl])))
        else:
            w.update(B.prefixed(f"ext{lvl}", B.init_tdnvt(rng, ch[lvl], cfg.heads)))
    for i in range(cfg.stages):
        w.update(B.prefixed(f"up{i}", B.init_gca_up(rng, ch[i], ch[i + 1])))
    s3k = cfg.embed.stride**3 * cfg.classes
    w.update(B.prefixed("head", B.init_linear(rng, ch[0], s3k)))
    w["head.fill"] = np.tile(np.eye(cfg.classes)[0] * 2.0, cfg.embed.stride**3)
    return w


def as_params(weights, requires_grad=False):
    return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in weights.items()}


@dataclass
class Prediction:
    logits: T.Tensor

    @property
    def probabilities(self):
        z = self.logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def labels(self):
        return np.argmax(self.logits.data, axis=-1)


@dataclass
class ForwardResult:
    prediction: Prediction
    embedded: T.Tensor
    occupancy: OccupancyMap
    levels: list
    counter: B.CostCounter


def _extract(cfg, lvl, voxels, params, counter):
    p = B.sub_params(params, f"ext{lvl}")
    if lvl < cfg.conv_levels:
        return B.residual_sparse_conv(voxels, p, counter, f"ext{lvl}.spconv")
    t = cfg.windows[min(lvl, cfg.stages - 1)]
    tau = cfg.tau_caps[min(lvl, cfg.stages - 1)]
    return B.tdnvt_block(voxels, p, t, tau, cfg.heads, cfg.sequential_directions, counter, f"ext{lvl}.tdnvt")


def forward(volume, cfg, params, background=None, dense=False, counter=None):
    """Run the network; ``dense=True`` forces every embedded cell to be occupied."""
    cfg.check_extents(volume.extents)
    params = {k: T.as_tensor(v) for k, v in params.items()}
    counter = B.CostCounter() if counter is None else counter
    b = derive_background_constant(volume) if background is None else background
    s, k, ch = cfg.embed.stride, cfg.classes, cfg.level_channels

    feats = embed_volume(volume, b, params["embed.w"], cfg.embed)
    grid = feats.shape[:3]
    counter.add("embed", B.matmul_flops(int(np.prod(grid)), s**3 * volume.modalities, ch[0]))
    occ = OccupancyMap(np.ones(grid, dtype=bool)) if dense else compute_occupancy(feats, cfg.embed)
    x = voxelize(feats, occ)

    skips = []
    for i in range(cfg.stages):
        x = B.tdnvt_block(x, B.sub_params(params, f"enc{i}"), cfg.windows[i], cfg.tau_caps[i], cfg.heads, cfg.sequential_directions, counter, f"enc{i}.tdnvt")
        skips.append(x)
        x = B.gca_down(x, cfg.pool_stride, B.sub_params(params, f"down{i}"), cfg.heads, counter, f"down{i}")
    levels = skips + [x]
    d = _extract(cfg, cfg.stages, x, params, counter)
    for i in reversed(range(cfg.stages)):
        skip = _extract(cfg, i, skips[i], params, counter)
        up = B.gca_up(skip, d, cfg.pool_stride, B.sub_params(params, f"up{i}"), cfg.heads, cfg.gca_up_radius, counter, f"up{i}")
        d = skip.with_features(T.add(skip.features, up.features))

    rows = B.linear(d.features, B.sub_params(params, "head"))
    counter.add("head", B.matmul_flops(len(d), ch[0], s**3 * k))
    n_cells = int(np.prod(grid))
    void = (~occ.bits).reshape(n_cells, 1).astype(np.float64)
    patches = T.add(T.scatter(rows, d.flat_index(), n_cells), T.mul(void, T.reshape(params["head.fill"], (1, s**3 * k))))
    patches = T.reshape(patches, grid + (s, s, s, k))
    logits = T.reshape(T.transpose(patches, (0, 3, 1, 4, 2, 5, 6)), tuple(g * s for g in grid) + (k,))
    return ForwardResult(Prediction(logits), feats, occ, levels, counter)


# -- loss -------------------------------------------------------------------------------


def seg_loss(logits, labels, classes=None, smooth=defaults.DICE_SMOOTH):
    """Soft Dice (per class, averaged) plus mean cross-entropy."""
    dice, ce = seg_loss_terms(logits, labels, classes, smooth)
    return T.add(dice, ce)


def seg_loss_terms(logits, labels, classes=None, smooth=defaults.DICE_SMOOTH):
    """(Dice loss, cross-entropy) as separate scalars."""
    logits = logits.logits if isinstance(logits, Prediction) else T.as_tensor(logits)
    k = logits.shape[-1] if classes is None else classes
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise T.ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), found range [{labels.min()}, {labels.max()}]")
    n = labels.size
    onehot = np.eye(k)[labels.reshape(-1)]
    z = T.reshape(logits, (n, k))
    logp = T.log_softmax(z, axis=-1)
    ce = T.neg(T.div(T.tsum(T.mul(logp, onehot)), n))
    p = T.softmax(z, axis=-1)
    inter = T.tsum(T.mul(p, onehot), axis=0)
    denom = T.add(T.tsum(p, axis=0), onehot.sum(axis=0) + smooth)
    dice = T.div(T.add(T.mul(inter, 2.0), smooth), denom)
    return T.sub(1.0, T.mean(dice)), ce


def loss_terms(volume, labels, cfg, params, lambda_nv=None, background=None):
    lam = cfg.embed.lambda_nv if lambda_nv is None else lambda_nv
    res = forward(volume, cfg, params, background)
    l_seg = seg_loss(res.prediction, labels, cfg.classes)
    r_nv = soft_nonvoid_ratio(res.embedded, cfg.embed)
    return l_seg, r_nv, total_loss(l_seg, r_nv, lam)


# -- training ------------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    weights: dict

    def to_csv(self):
        lines = ["step,l_seg,r_nv,l_total"]
        lines += [f"{h['step']},{h['l_seg']:.17g},{h['r_nv']:.17g},{h['l_total']:.17g}" for h in self.history]
        return "\n".join(lines) + "\n"


def train_toy(phantoms, cfg, steps=defaults.TRAIN_STEPS, lr=defaults.LEARNING_RATE, lambda_nv=None, weights=None):
    """Plain gradient descent on the summed loss over ``phantoms``.

    History holds ``steps + 1`` entries: the loss at the initial weights and
    after each of the ``steps`` updates.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    phantoms = [phantoms] if not isinstance(phantoms, (list, tuple)) else list(phantoms)
    if weights is None:
        weights = init_weights(cfg, phantoms[0].volume.modalities)
    weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
    history = []
    for step in range(steps + 1):
        params = as_params(weights, requires_grad=True)
        l_seg = r_nv = l_tot = None
        for ph in phantoms:
            try:
                s, r, t = loss_terms(ph.volume, ph.labels, cfg, params, lambda_nv, ph.background)
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(f"training diverged at step {step}: {exc}") from None
            l_seg = s if l_seg is None else T.add(l_seg, s)
            r_nv = r if r_nv is None else T.add(r_nv, r)
            l_tot = t if l_tot is None else T.add(l_tot, t)
        m = len(phantoms)
        entry = {"step": step, "l_seg": l_seg.item() / m, "r_nv": r_nv.item() / m, "l_total": l_tot.item() / m}
        if not np.isfinite(entry["l_total"]) or entry["l_total"] > defaults.DIVERGENCE_LIMIT:
            raise TrainingDivergedError(f"training diverged at step {step}: loss {entry['l_total']}")
        history.append(entry)
        if step == steps:
            break
        grads = T.backward(T.div(l_tot, m), wrt=list(params.values()))
        for name, p in params.items():
            weights[name] = weights[name] - lr * grads[p]
    return TrainResult(history, weights)


# -- FLOPs ---------------------------------------------------------------------------------


def count_flops(cfg, volume, weights=None, dense=False, background=None):
    """Per-layer FLOP report of one forward pass (multiply-accumulate = 2 FLOPs)."""
    weights = init_weights(cfg, volume.modalities) if weights is None else weights
    res = forward(volume, cfg, as_params(weights), background, dense=dense)
    c = res.counter
    return {
        "mode": "dense" if dense else "nonvoid",
        "occupied": res.occupancy.count,
        "cells": int(res.occupancy.bits.size),
        "layers": dict(sorted(c.flops.items())),
        "attention_pairs": dict(sorted((k, v) for k, v in c.pairs.items() if v)),
        "total": c.total_flops,
    }


def flops_comparison(cfg, volume, weights=None, background=None):
    sparse = count_flops(cfg, volume, weights, False, background)
    dense = count_flops(cfg, volume, weights, True, background)
    return {
        "nonvoid_total": sparse["total"],
        "dense_total": dense["total"],
        "saving_percent": 100.0 * (1.0 - sparse["total"] / dense["total"]),
        "nonvoid": sparse,
        "dense": dense,
    }


# -- end-to-end gradient check ---------------------------------------------------------------


@dataclass
class NetGradCheck:
    reports: dict
    directional: list
    tolerance: float

    @property
    def worst(self):
        vals = [r.worst for r in self.reports.values()] + [e for _, _, e in self.directional]
        return max(vals) if vals else 0.0

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        n = sum(len(r.indices) for r in self.reports.values())
        return f"{verdict} worst relative error {self.worst:.3e} over {n} coordinates in {len(self.reports)} tensors and {len(self.directional)} random directions (tolerance {self.tolerance:g})"


def gradcheck_network(volume, labels, cfg, weights=None, per_tensor=2, directions=3, full=False, tolerance=defaults.E2E_TOLERANCE, seed=0, background=None, h=defaults.E2E_FD_STEP):
    """Finite-difference check of the total loss against every parameter tensor.

    Per tensor, the coordinate with the largest analytic gradient plus
    ``per_tensor`` random coordinates are probed (all coordinates with
    ``full``), and ``directions`` random directions over all parameters are
    checked as directional derivatives.
    """
    weights = init_weights(cfg, volume.modalities) if weights is None else weights
    rng = np.random.default_rng(seed)
    b = derive_background_constant(volume) if background is None else background

    def loss_of(params):
        return loss_terms(volume, labels, cfg, params, background=b)[2]

    params = as_params(weights, requires_grad=True)
    grads = T.backward(loss_of(params), wrt=list(params.values()))
    grads = {k: grads[p] for k, p in params.items()}
    reports = {}
    for name in sorted(weights):
        w = weights[name]
        if full:
            idx = None
        else:
            pick = {int(np.argmax(np.abs(grads[name]).reshape(-1)))}
            pick.update(int(i) for i in rng.choice(w.size, size=min(per_tensor, w.size), replace=False))
            idx = np.array(sorted(pick))

        def fn(x, name=name):
            p = dict(as_params(weights))
            p[name] = x
            return loss_of(p)

        reports[name] = T.finite_diff_check(fn, w, tolerance, h=h, indices=idx)
    directional = []
    for _ in range(directions):
        v = {k: rng.standard_normal(w.shape) for k, w in weights.items()}
        analytic = sum(float(np.sum(grads[k] * v[k])) for k in weights)
        plus = loss_of(as_params({k: weights[k] + h * v[k] for k in weights})).item()
        minus = loss_of(as_params({k: weights[k] - h * v[k] for k in weights})).item()
        numeric = (plus - minus) / (2 * h)
        directional.append((analytic, numeric, float(T.relative_error(analytic, numeric))))
    return NetGradCheck(reports, directional, tolerance)


def replace_config(cfg, **changes):
    """``dataclasses.replace`` that also accepts embed-level keys."""
    embed_keys = set(EmbedConfig.__dataclass_fields__)
    embed_changes = {k: changes.pop(k) for k in list(changes) if k in embed_keys and k != "channels"}
    if "channels" in changes and "embed" not in changes:
        embed_changes["channels"] = tuple(changes["channels"])[0]
    embed = replace(cfg.embed, **embed_changes) if embed_changes else cfg.embed
    return replace(cfg, embed=embed, **changes)
