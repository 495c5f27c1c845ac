"""``gcnv`` command line: one subcommand per experiment, all outputs under ``--out``.

Every run writes ``manifest.json`` next to its outputs with the resolved
arguments, model config, seed and the SHA-256 of each output file. Errors are
reported as one line on stderr, ``error: <kind>: <message>``, with exit code
2 for usage problems and 1 for everything else.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, defaults
from . import metrics as M
from . import net as N
from . import nonvoid as NV
from . import volume as V


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared helpers ----------------------------------------------------------------------


def _load_config(args):
    cfg = N.ModelConfig()
    if getattr(args, "config", None):
        try:
            cfg = N.ModelConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = N.replace_config(cfg, seed=args.seed)
    return cfg


def _phantom(args, extents=None):
    ext = tuple(extents or args.extents)
    return V.generate_phantom(args.seed, ext, background_fraction=args.background_fraction)


def _weights(args, cfg, modalities):
    if getattr(args, "weights", None):
        return V.read_tensors(args.weights)
    return N.init_weights(cfg, modalities)


class _Run:
    """Collects output files of one run and writes the manifest."""

    def __init__(self, args, cfg=None):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.cfg = cfg
        self.files = []

    def text(self, name, content):
        path = self.out / name
        path.write_text(content, encoding="utf-8")
        self.files.append(path)
        return path

    def add(self, *paths):
        self.files.extend(Path(p) for p in paths)

    def finish(self):
        args = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command": self.args.command,
            "arguments": args,
            "seed": getattr(self.args, "seed", None),
            "config": self.cfg.to_dict() if self.cfg is not None else None,
            "version": __version__,
            "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(self.files)},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


# -- subcommands -----------------------------------------------------------------------------


def cmd_voxelize_stats(args):
    if args.nonvoid_k is not None or args.traditional_k is not None:
        if args.nonvoid_k is None or args.traditional_k is None:
            raise UsageError("--nonvoid-k and --traditional-k go together")
        saving = 100.0 * NV.saving_from_counts(args.nonvoid_k, args.traditional_k)
        print(f"{saving:.2f}%")
        return 0
    cfg = _load_config(args)
    volumes = {}
    if args.input:
        src = Path(args.input)
        metas = sorted(src.glob("*.json")) if src.is_dir() else [src]
        if not metas:
            raise ValueError(f"no volumes found in {src}")
        for meta in metas:
            try:
                volumes[meta.stem] = V.read_volume(meta)
            except (OSError, ValueError) as exc:
                print(f"error: {type(exc).__name__}: {meta}: {exc}", file=sys.stderr)
        if not volumes:
            raise ValueError(f"no readable volumes in {src}")
    else:
        for f in args.background_fractions:
            ph = V.generate_phantom(args.seed, tuple(args.extents), background_fraction=f)
            volumes[f"phantom_bg{round(100 * f):02d}"] = ph.volume
    modalities = {v.modalities for v in volumes.values()}
    if len(modalities) != 1:
        raise ValueError(f"volumes mix modality counts {sorted(modalities)}")
    weights = NV.init_embed_weights(cfg.embed, modalities.pop(), cfg.seed)
    table = NV.voxel_saving_stats(volumes, weights, cfg.embed)
    run = _Run(args, cfg)
    csv_text = table.to_csv()
    run.text("voxel_stats.csv", csv_text)
    run.text("voxel_stats.json", table.to_json())
    run.finish()
    sys.stdout.write(csv_text)
    return 0


def cmd_forward(args):
    cfg = _load_config(args)
    vol = V.read_volume(args.input) if args.input else _phantom(args).volume
    weights = _weights(args, cfg, vol.modalities)
    res = N.forward(vol, cfg, N.as_params(weights))
    run = _Run(args, cfg)
    run.add(*V.write_tensors({"logits": res.prediction.logits.data, "labels": res.prediction.labels}, run.out / "prediction"))
    summary = {
        "logits_shape": list(res.prediction.logits.shape),
        "occupied": res.occupancy.count,
        "cells": int(res.occupancy.bits.size),
        "level_sizes": [len(v) for v in res.levels],
        "attention_pairs": res.counter.total_pairs,
        "flops": res.counter.total_flops,
    }
    run.text("forward.json", json.dumps(summary, indent=2) + "\n")
    run.finish()
    print(json.dumps(summary))
    return 0


def cmd_train_toy(args):
    cfg = _load_config(args)
    ph = _phantom(args)
    res = N.train_toy(ph, cfg, args.steps, args.lr, args.lambda_nv)
    run = _Run(args, cfg)
    run.text("trajectory.csv", res.to_csv())
    run.add(*V.write_tensors(res.weights, run.out / "weights"))
    run.finish()
    first, last = res.history[0], res.history[-1]
    print(f"l_total {first['l_total']:.6f} -> {last['l_total']:.6f}; r_nv {first['r_nv']:.6f} -> {last['r_nv']:.6f}")
    return 0


def cmd_gradcheck(args):
    cfg = _load_config(args)
    ph = _phantom(args)
    report = N.gradcheck_network(ph.volume, ph.labels, cfg, _weights(args, cfg, ph.volume.modalities), full=args.full, seed=args.seed)
    run = _Run(args, cfg)
    per_tensor = {k: {"worst": r.worst, "coordinates": [int(i) for i in r.indices]} for k, r in report.reports.items()}
    body = {"passed": report.passed, "worst": report.worst, "tolerance": report.tolerance, "tensors": per_tensor,
            "directional": [{"analytic": a, "numeric": n, "error": e} for a, n, e in report.directional]}
    run.text("gradcheck.json", json.dumps(body, indent=2) + "\n")
    run.finish()
    print(report)
    return 0 if report.passed else 1


def cmd_flops(args):
    cfg = _load_config(args)
    vol = V.read_volume(args.input) if args.input else _phantom(args).volume
    cmp = N.flops_comparison(cfg, vol, _weights(args, cfg, vol.modalities))
    run = _Run(args, cfg)
    run.text("flops.json", json.dumps(cmp, indent=2) + "\n")
    run.finish()
    print(f"nonvoid {cmp['nonvoid_total']} FLOPs; dense {cmp['dense_total']} FLOPs; saving {cmp['saving_percent']:.2f}%")
    return 0


def cmd_qea(args):
    spec = M.PolygonSpec.from_dict(json.loads(Path(args.input).read_text(encoding="utf-8")))
    res = M.qea(spec)
    run = _Run(args)
    run.text("qea.json", res.to_json())
    run.finish()
    for m in res.ranking():
        print(f"{m}: {res.areas[m]:.12g}")
    return 0


def cmd_eps_sweep(args):
    cfg = _load_config(args)
    vol = V.read_volume(args.input) if args.input else _phantom(args).volume
    grid = args.eps if args.eps else np.logspace(-11, 1, 13)
    weights = NV.init_embed_weights(cfg.embed, vol.modalities, cfg.seed)
    rows = NV.epsilon_sweep(vol, weights, cfg.embed, grid)
    run = _Run(args, cfg)
    text = "epsilon,saving_percent\n" + "".join(f"{e:.6g},{100 * s:.6f}\n" for e, s in rows)
    run.text("eps_sweep.csv", text)
    run.finish()
    sys.stdout.write(text)
    return 0


def cmd_significance(args):
    data = json.loads(Path(args.input).read_text(encoding="utf-8"))
    pairs = {name: (np.asarray(v[0], float), np.asarray(v[1], float)) for name, v in data["comparisons"].items()}
    results = M.wilcoxon_holm(pairs, args.alpha)
    run = _Run(args)
    text = M.significance_table(results)
    run.text("significance.csv", text)
    run.finish()
    sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="gcnv", description="Nonvoid voxelization and sparse voxel transformer experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help, model=True, phantom=True, extents=16):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--seed", type=int, default=defaults.SEED)
        if model:
            sp.add_argument("--config", help="model config JSON")
        if phantom:
            sp.add_argument("--extents", type=int, nargs=3, default=[extents] * 3, metavar=("H", "W", "D"))
            sp.add_argument("--background-fraction", type=float, default=0.5)
        return sp

    sp = command("voxelize-stats", cmd_voxelize_stats, "voxel-saving table for volumes or phantoms")
    sp.add_argument("--input", help="volume directory or single volume header")
    sp.add_argument("--background-fractions", type=float, nargs="+", default=[0.2, 0.5, 0.8])
    sp.add_argument("--nonvoid-k", type=float, help="check mode: nonvoid count in thousands")
    sp.add_argument("--traditional-k", type=float, help="check mode: traditional count in thousands")

    sp = command("forward", cmd_forward, "run the network once")
    sp.add_argument("--input", help="volume header; a phantom is generated otherwise")
    sp.add_argument("--weights", help="weight container written by train-toy")

    sp = command("train-toy", cmd_train_toy, "gradient descent on a phantom")
    sp.add_argument("--steps", type=int, default=defaults.TRAIN_STEPS)
    sp.add_argument("--lr", type=float, default=defaults.LEARNING_RATE)
    sp.add_argument("--lambda-nv", type=float, default=None)

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of the full network", extents=8)
    sp.add_argument("--weights")
    sp.add_argument("--full", action="store_true", help="probe every parameter coordinate")

    sp = command("flops", cmd_flops, "FLOPs of the nonvoid path vs the dense-forced path")
    sp.add_argument("--input")
    sp.add_argument("--weights")

    sp = command("qea", cmd_qea, "quality-efficiency polygon areas", model=False, phantom=False)
    sp.add_argument("--input", required=True, help='JSON {"axes": [[name, "higher"|"lower"], ...], "values": {method: [...]}}')

    sp = command("eps-sweep", cmd_eps_sweep, "voxel saving across occupancy thresholds")
    sp.add_argument("--input")
    sp.add_argument("--eps", type=float, nargs="+")

    sp = command("significance", cmd_significance, "paired Wilcoxon tests with Holm correction", model=False, phantom=False)
    sp.add_argument("--input", required=True, help='JSON {"comparisons": {name: [[x...], [y...]]}}')
    sp.add_argument("--alpha", type=float, default=defaults.SIGNIFICANCE)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line report for every failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
