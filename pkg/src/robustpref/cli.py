"""Command-line entry point: ``python -m robustpref <subcommand>``.

Every subcommand reads an optional JSON ``--config`` whose keys are the
long option names (dashes or underscores).  Explicit flags override config
keys, and ``ROBUSTPREF_SEED`` overrides the seed found in the config.

Exit codes: 0 success, 1 invalid input, 2 verification failure,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, rng
from .data import flip_pairs, load_dataset, perturb_rankings, sample_pairs, sample_rankings, \
    save_dataset
from .env import PolicyParams, load_env, random_env, save_env, tabular_env
from .errors import DivergedError, ProvenanceError, RobustPrefError
from .losses import LossSpec
from .metrics import evaluate
from .optim import ConstantLR, InverseLR, TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class CLIError(RobustPrefError):
    pass


def _settings(args, defaults: dict) -> dict:
    """Merge defaults, the JSON config, ROBUSTPREF_SEED and explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            conf = json.load(fh)
        if not isinstance(conf, dict):
            raise CLIError("config must be a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in conf.items()})
    if "seed" in merged and os.environ.get("ROBUSTPREF_SEED"):
        try:
            merged["seed"] = int(os.environ["ROBUSTPREF_SEED"])
        except ValueError:
            raise CLIError("ROBUSTPREF_SEED must be an integer") from None
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "func"):
            merged[k] = v
    return merged


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CLIError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-")
                                                                  for k in missing))


def _floats(v):
    if isinstance(v, str):
        return [float(x) for x in v.split(",") if x.strip()]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(x) for x in v]


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------------

def cmd_gen_env(args) -> int:
    cfg = _settings(args, {"kind": "random", "prompts": 1, "actions": 8, "dim": 8, "seed": 0,
                           "beta": 1.0, "reward_scale": 1.0, "sft_scale": 0.5,
                           "pref_model": "btl", "rewards": None})
    _need(cfg, "out")
    if cfg["kind"] == "tabular":
        rewards = cfg["rewards"]
        if isinstance(rewards, str):
            rewards = json.loads(rewards)
        if rewards is None:
            gen = np.random.default_rng(cfg["seed"])
            rewards = cfg["reward_scale"] * gen.standard_normal((cfg["prompts"], cfg["actions"]))
        env = tabular_env(rewards, beta=cfg["beta"], pref_model=cfg["pref_model"])
    elif cfg["kind"] == "random":
        env = random_env(cfg["prompts"], cfg["actions"], cfg["dim"], seed=cfg["seed"],
                         reward_scale=cfg["reward_scale"], sft_scale=cfg["sft_scale"],
                         beta=cfg["beta"], pref_model=cfg["pref_model"])
    else:
        raise CLIError(f"unknown env kind {cfg['kind']!r}")
    print(save_env(env, cfg["out"]))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _settings(args, {"eps": 0.0, "seed": 0, "kind": "pair", "K": 3})
    _need(cfg, "env", "n", "out")
    env = load_env(cfg["env"])
    if cfg["kind"] == "pair":
        ds = sample_pairs(env, int(cfg["n"]), cfg["seed"])
        ds = flip_pairs(ds, cfg["eps"], harness.flip_seed(cfg["seed"]))
    elif cfg["kind"] == "rank":
        ds = sample_rankings(env, int(cfg["n"]), int(cfg["K"]), cfg["seed"])
        ds = perturb_rankings(ds, cfg["eps"], harness.flip_seed(cfg["seed"]))
    else:
        raise CLIError(f"unknown data kind {cfg['kind']!r}")
    save_dataset(ds, cfg["out"])
    return EXIT_OK


def _train_config(cfg) -> TrainConfig:
    loss = cfg.get("loss") or {}
    if isinstance(loss, str):
        loss = {"family": loss}
    loss = {"family": cfg.get("family") or loss.get("family", "dpo"),
            "link": cfg.get("link") or loss.get("link", "logistic"),
            "eps": cfg["eps"] if cfg.get("eps") is not None else loss.get("eps", 0.0)}
    if cfg.get("lr_mode", "constant") == "inverse":
        lr = InverseLR(cfg.get("c") or 1.0, cfg.get("lam"))
    else:
        lr = ConstantLR(cfg.get("lr"))
    return TrainConfig(loss=LossSpec.from_dict(loss), bound_B=cfg.get("bound_B", 10.0),
                       steps=cfg.get("steps"), lr=lr, batch=cfg.get("batch", "full"),
                       seed=cfg.get("seed", 0), tol=cfg.get("tol", 1e-10),
                       epochs=cfg.get("epochs", 1), alpha0=cfg.get("alpha0"))


def cmd_train(args) -> int:
    cfg = _settings(args, {"seed": 0})
    _need(cfg, "env", "data", "out")
    env = load_env(cfg["env"])
    ds = load_dataset(cfg["data"], env)
    tcfg = _train_config(cfg)
    theta, trace = train(ds, env, tcfg)
    if cfg.get("trace"):
        trace.to_csv(cfg["trace"])
    _write_json({"env_hash": env.fingerprint(), "theta": theta.theta.tolist(),
                 "bound_B": theta.bound_B, "train": tcfg.to_dict(),
                 "data": {"path": os.path.abspath(cfg["data"]), "n": len(ds),
                          "seed": ds.seed, "eps_true": ds.eps_true, "kind": ds.kind}},
                cfg["out"])
    return EXIT_OK


def _load_theta(path, env):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if "env_hash" in obj and obj["env_hash"] != env.fingerprint():
        raise ProvenanceError(f"{path} was trained on a different environment")
    theta = np.asarray(obj["theta"], dtype=float)
    B = float(obj.get("bound_B", max(np.linalg.norm(theta), 1.0)))
    return PolicyParams(theta, B), obj


def cmd_eval(args) -> int:
    cfg = _settings(args, {"lam": None})
    _need(cfg, "env", "theta")
    env = load_env(cfg["env"])
    test = load_dataset(cfg["test"], env) if cfg.get("test") else None
    rows = []
    paths = [cfg["theta"]] if isinstance(cfg["theta"], str) else cfg["theta"]
    for path in paths:
        theta, meta = _load_theta(path, env)
        data_path = cfg.get("data") or meta.get("data", {}).get("path")
        ds = load_dataset(data_path, env) if data_path and os.path.exists(data_path) else None
        rep = evaluate(env, theta, ds if ds is not None and ds.kind == "pair" else None, test,
                       lam=cfg["lam"])
        spec = LossSpec.from_dict(meta.get("train", {}).get("loss", {}))
        rows.append({
            "method": spec.family if spec.link == "logistic" else f"{spec.family}-{spec.link}",
            "family": spec.family, "link": spec.link,
            "eps_true": ds.eps_true if ds is not None else "", "eps_assumed": spec.eps,
            "n": len(ds) if ds is not None else "", "seed": ds.seed if ds is not None else "",
            "l2_error": rep.l2_error, "seminorm_error": rep.seminorm_error, "lambda": rep.lam,
            "subopt_gap": rep.subopt_gap, "margin_gap": rep.margin_gap,
            "eval_accuracy": rep.eval_accuracy, "kappa_rel_bound": rep.kappa_rel_bound,
            "gamma": rep.gamma, "wall_ms": 0.0, "env_hash": env.fingerprint(),
            "config_digest": harness.config_digest(meta.get("train", {})),
        })
    if cfg.get("csv"):
        harness.write_rows(rows, cfg["csv"], append=True)
    for row in rows:
        print(harness.format_row(row))
    return EXIT_OK


def cmd_tune_eps(args) -> int:
    cfg = _settings(args, {"grid": "0,0.1,0.2,0.3,0.4", "seed": 0})
    _need(cfg, "env", "train", "holdout")
    env = load_env(cfg["env"])
    train_ds = load_dataset(cfg["train"], env)
    holdout = load_dataset(cfg["holdout"], env)
    if os.path.abspath(cfg["train"]) == os.path.abspath(cfg["holdout"]):
        raise CLIError("the holdout file must differ from the training file")
    best, scores = harness.tune_eps(train_ds, holdout, env, _floats(cfg["grid"]),
                                    _train_config(cfg))
    print(json.dumps({"best_eps": best, "accuracy": {repr(k): v for k, v in scores.items()}}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _settings(args, {"workers": 1})
    keys = harness.SweepConfig.__dataclass_fields__
    sweep_cfg = {k: v for k, v in cfg.items() if k in keys or k == "env"}
    for k in ("eps_true", "eps_assumed", "n", "seeds"):
        if isinstance(sweep_cfg.get(k), str):
            parts = sweep_cfg[k].split(",")
            sweep_cfg[k] = [p if p == "true" else (int(p) if k in ("n", "seeds") else float(p))
                            for p in parts]
    if isinstance(sweep_cfg.get("methods"), str):
        sweep_cfg["methods"] = sweep_cfg["methods"].split(",")
    sc = harness.SweepConfig.from_dict(sweep_cfg)
    _need({"env": sc.env_path, "output": sc.output}, "env", "output")
    env = load_env(sc.env_path)
    rows = harness.run_sweep(sc, env, workers=int(cfg["workers"]))
    harness.write_rows(rows, sc.output)
    print(f"{len(rows)} rows -> {sc.output}")
    return EXIT_OK


def cmd_slope(args) -> int:
    cfg = _settings(args, {"x": "n", "y": "l2_error", "boot": 1000})
    _need(cfg, "csv")
    rows = harness.read_rows(cfg["csv"])
    filters = {k: cfg.get(k) for k in ("method", "eps_true", "eps_assumed")}
    res = harness.slope_from_rows(rows, cfg["x"], cfg["y"], n_boot=int(cfg["boot"]), **filters)
    print(json.dumps({"slope": res.slope, "intercept": res.intercept,
                      "ci": [res.ci_low, res.ci_high], "x": list(res.x),
                      "median": list(res.median)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    cfg = _settings(args, {"seed": 0, "scale": 1.0})
    _need(cfg, "suite")
    report = run_suite(cfg["suite"], seed=cfg["seed"], scale=cfg["scale"])
    text = json.dumps(report, indent=2, default=float)
    if cfg.get("out"):
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustpref",
                                description="Noise-robust preference optimization lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of default settings")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-env", cmd_gen_env, "write an environment file")
    sp.add_argument("--kind", choices=["random", "tabular"])
    sp.add_argument("--prompts", type=int)
    sp.add_argument("--actions", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--rewards", help="JSON reward table for --kind tabular")
    sp.add_argument("--reward-scale", type=float)
    sp.add_argument("--sft-scale", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--pref-model", choices=["btl", "probit"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("gen-data", cmd_gen_data, "sample a (noisy) preference dataset")
    sp.add_argument("--env")
    sp.add_argument("--n", type=int)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--kind", choices=["pair", "rank"])
    sp.add_argument("--K", type=int)
    sp.add_argument("--out")

    def train_flags(sp):
        sp.add_argument("--family")
        sp.add_argument("--link", choices=["logistic", "probit"])
        sp.add_argument("--eps", type=float)
        sp.add_argument("--bound-B", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr-mode", choices=["constant", "inverse"])
        sp.add_argument("--c", type=float)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--alpha0", type=float)
        sp.add_argument("--batch", choices=["full", "per-sample"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "fit a policy parameter")
    sp.add_argument("--env")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--trace", help="optional CSV of (step, loss, grad_norm)")
    train_flags(sp)

    sp = add("eval", cmd_eval, "evaluate parameter files and emit CSV rows")
    sp.add_argument("--env")
    sp.add_argument("--theta", nargs="+")
    sp.add_argument("--data", help="training data for the semi-norm (default: from theta file)")
    sp.add_argument("--test", help="clean test data for the accuracy")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--csv", help="append rows to this CSV")

    sp = add("tune-eps", cmd_tune_eps, "select the assumed flip rate on a clean holdout")
    sp.add_argument("--env")
    sp.add_argument("--train")
    sp.add_argument("--holdout")
    sp.add_argument("--grid", help="comma-separated flip rates")
    sp.add_argument("--bound-B", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("sweep", cmd_sweep, "run a grid of train/eval cells")
    sp.add_argument("--env")
    sp.add_argument("--output")
    sp.add_argument("--methods", help="comma-separated loss families")
    sp.add_argument("--eps-true")
    sp.add_argument("--eps-assumed")
    sp.add_argument("--n")
    sp.add_argument("--seeds")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--bound-B", type=float)
    sp.add_argument("--timing", action="store_const", const=True,
                    help="record wall-clock time (rows are then not bit-reproducible)")

    sp = add("slope", cmd_slope, "fit a log-log slope of median error against n")
    sp.add_argument("--csv")
    sp.add_argument("--x")
    sp.add_argument("--y")
    sp.add_argument("--method")
    sp.add_argument("--eps-true")
    sp.add_argument("--eps-assumed")
    sp.add_argument("--boot", type=int)

    sp = add("verify", cmd_verify, "run a property suite")
    sp.add_argument("--suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scale", type=float, help="instance-count multiplier")
    sp.add_argument("--out", help="write the JSON report here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (RobustPrefError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
