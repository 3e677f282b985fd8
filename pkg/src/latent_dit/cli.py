"""Command-line entry point.

Subcommands read an optional JSON config (``--config``), write their outputs
and a ``manifest.json`` into ``--out`` and exit 0 on success, 2 on an
invalid config and 1 on a runtime failure.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from ._validation import DimensionError, DomainError

# per-command defaults; unknown keys in a config are rejected
DEFAULTS = {
    "data-gen": {"D": 8, "d0": 2, "n": 100, "basis_seed": 0, "mixture": None},
    "train": {
        "data": None, "D": 16, "d0": 4, "n": 4096, "basis_seed": 0,
        "image_side": 2, "patch_side": 2, "n_blocks": 1, "heads": 1, "head_dim": None, "hidden": None,
        "weight_scale": 0.5, "pos_enc_scale": 0.1,
        "train": {"batch_size": 64, "steps": 2000, "learning_rate": 1e-3,
                  "schedule": {"horizon": 5.0, "early_stop": 0.1, "step": 0.01}},
    },
    "sample": {
        "checkpoint": None, "data": None, "D": 8, "d0": 2, "basis_seed": 0, "mixture": None,
        "n": 1000, "schedule": {"horizon": 5.0, "early_stop": 0.01, "step": 0.01},
    },
    "bench-attn": {"L_list": [512, 1024, 2048, 4096, 8192], "c": 0.01, "eps_target": 1e-3},
    "phase-sweep": {"L": 4096, "d": None, "c_list": [0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0], "eps_target": 1e-3},
    "ua-verify": {"d": 1, "L": 2, "delta": 0.5, "lambdas": [10.0, 100.0, 1000.0], "eps": None, "n_random": 1000},
}


class ConfigError(Exception):
    pass


def _merge(defaults, given, path=""):
    out = dict(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(defaults[k], dict) and isinstance(v, dict):
            out[k] = _merge(defaults[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(command, path):
    given = {}
    if path is not None:
        try:
            with open(path) as fh:
                given = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
        if "manifest_of" in given:
            if given["manifest_of"] != command:
                raise ConfigError(f"manifest is for {given['manifest_of']!r}, not {command!r}")
            given = given["config"]
    given = {k: v for k, v in given.items() if k != "seed"}
    return _merge(DEFAULTS[command], given)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)


def _dataset(cfg, seed):
    from .subspace_data import LatentMixtureSpec, read_dataset, sample_basis, sample_dataset

    if cfg.get("data"):
        X, spec, latent, _ = read_dataset(cfg["data"])
        return X, spec, latent
    mix = cfg.get("mixture")
    latent = LatentMixtureSpec.standard(cfg["d0"]) if mix is None else LatentMixtureSpec.from_dict(mix)
    spec = sample_basis(cfg["D"], cfg["d0"], seed=cfg["basis_seed"])
    X = sample_dataset(spec, latent, cfg.get("n", 0), seed=seed) if cfg.get("n") else None
    return X, spec, latent


def cmd_data_gen(cfg, seed, out):
    from .subspace_data import write_dataset

    X, spec, latent = _dataset(cfg, seed)
    write_dataset(os.path.join(out, "data"), X, spec, latent, seed)
    return ["data.csv", "data.json", "data_basis.csv"]


def cmd_train(cfg, seed, out):
    from .diffusion_engine import TrainConfig, train
    from .dit_score_net import ReshapeSpec, ScoreNetwork

    X, spec, _ = _dataset(cfg, seed)
    tc = TrainConfig.from_dict(dict(cfg["train"], seed=seed))
    rs = ReshapeSpec(cfg["image_side"], cfg["patch_side"])
    net = ScoreNetwork.init(X.shape[1], rs, cfg["n_blocks"], cfg["heads"], cfg["head_dim"], cfg["hidden"],
                            cfg["weight_scale"], cfg["pos_enc_scale"], seed=seed)
    net.save(os.path.join(out, "checkpoint_init.json"))
    res = train(tc, X, net, basis=spec.basis)
    res.net.save(os.path.join(out, "checkpoint.json"))
    with open(os.path.join(out, "history.csv"), "w") as fh:
        fh.write("step,loss,subspace_error\n")
        for r in res.history:
            fh.write(f"{r['step']},{r['loss']:.17g},{r['subspace_error']:.17g}\n")
    return ["checkpoint_init.json", "checkpoint.json", "history.csv"]


def cmd_sample(cfg, seed, out):
    from .analytic_score import AnalyticScore
    from .diffusion_engine import backward_sample
    from .dit_score_net import ScoreNetwork, score_forward
    from .subspace_data import DiffusionSchedule, write_dataset

    sched = DiffusionSchedule(**cfg["schedule"])
    _, spec, latent = _dataset(dict(cfg, n=0), seed)
    if cfg["checkpoint"]:
        net = ScoreNetwork.load(cfg["checkpoint"])
        if net.ambient_dim != spec.ambient_dim:
            raise DimensionError("checkpoint and data disagree on D")

        def score(y, t):
            return score_forward(net, y, t, sched)
    else:
        score = AnalyticScore(spec, latent, sched)
    rep = backward_sample(score, sched, cfg["n"], seed=seed, basis=spec.basis)
    write_dataset(os.path.join(out, "samples"), rep.samples, spec, latent, seed)
    _dump(os.path.join(out, "report.json"), {
        "subspace_error": rep.subspace_error, "orth_cov_spectral": rep.orth_cov_spectral,
        "on_cov_spectral": rep.on_cov_spectral, "steps_taken": rep.steps_taken,
    })
    return ["samples.csv", "samples.json", "samples_basis.csv", "report.json"]


def cmd_bench(cfg, seed, out):
    from .bench import bench_scaling

    res = bench_scaling(cfg["L_list"], c=cfg["c"], eps_target=cfg["eps_target"], seed=seed)
    res.write(os.path.join(out, "bench.csv"))
    return ["bench.csv"]


def cmd_phase(cfg, seed, out):
    from .bench import PHASE_HEADER, phase_sweep, write_csv

    rows = phase_sweep(cfg["L"], cfg["c_list"], cfg["eps_target"], cfg["d"])
    write_csv(os.path.join(out, "phase.csv"), rows, PHASE_HEADER)
    return ["phase.csv"]


def cmd_ua(cfg, seed, out):
    from .ua_constructor import GridSpec, verification_report

    grid = GridSpec(cfg["d"], cfg["L"], cfg["delta"])
    rep = verification_report(grid, tuple(cfg["lambdas"]), cfg["eps"], cfg["n_random"], seed)
    _dump(os.path.join(out, "ua_report.json"), rep)
    return ["ua_report.json"]


COMMANDS = {
    "data-gen": cmd_data_gen,
    "train": cmd_train,
    "sample": cmd_sample,
    "bench-attn": cmd_bench,
    "phase-sweep": cmd_phase,
    "ua-verify": cmd_ua,
}


def build_parser():
    p = argparse.ArgumentParser(prog="latent-dit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    seed = args.seed
    if seed is None and args.config:
        with open(args.config) as fh:
            seed = json.load(fh).get("seed")  # manifests and configs both carry it here
    seed = 0 if seed is None else int(seed)
    os.makedirs(args.out, exist_ok=True)
    try:
        outputs = COMMANDS[args.command](cfg, seed, args.out)
    except (DomainError, DimensionError, KeyError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {"manifest_of": args.command, "seed": seed, "config": cfg, "version": __version__,
                "numpy": np.__version__, "outputs": outputs}
    _dump(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
