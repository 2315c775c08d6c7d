"""Command-line front end for the full pipeline.

Subcommands: gen-data, corrupt, train-oracle, train, eval, report. Every
command is a pure function of its inputs, flags, and seed, and every output
file embeds a provenance block (sha256 of inputs plus the effective flags) so
reruns are byte-identical and auditable.

Exit codes: 0 success, 2 usage/config error, 3 data or file-format error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import corruption, data, envs, oracle, training
from .fileformat import FormatError
from .model import ModelConfig
from .training import TrainConfig, TrainingDivergedError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def _out_path(p) -> Path:
    """Resolve outputs against RDT_OUT_DIR when the path is relative."""
    p = Path(p)
    if p.is_absolute():
        return p
    root = os.environ.get("RDT_OUT_DIR")
    return Path(root) / p if root else p


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(command: str, args: argparse.Namespace, inputs: dict) -> dict:
    # --jobs schedules work but cannot change results, so it stays out
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "jobs")}
    return {"command": command,
            "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
            "inputs": {name: _sha256(path) for name, path in inputs.items()}}


def _parse_seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}: {exc}") from exc


def _parse_scales(text: str) -> list:
    try:
        return [float(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad scale list {text!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.env not in envs.known_envs():
        raise UsageError(f"unknown env '{args.env}'; known envs: "
                         f"{', '.join(envs.known_envs())}")
    if args.kind not in ("medium_replay", "expert"):
        raise UsageError(f"unknown dataset kind '{args.kind}'")
    if not 0.0 < args.subsample_ratio <= 1.0:
        raise UsageError(f"--subsample-ratio must be in (0, 1], got {args.subsample_ratio}")
    rng = np.random.default_rng(args.seed)
    ds = envs.generate_dataset(args.env, args.kind, args.transitions, rng)
    if args.subsample_ratio < 1.0:
        ds = data.subsample(ds, args.subsample_ratio, rng)
    ds.meta["seed"] = args.seed
    ds.meta["provenance"] = _provenance("gen-data", args, {})
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(ds, out)
    spec = envs.make_env_spec(args.env)
    envs.save_env_spec(spec, str(out) + ".envspec.json")
    print(f"wrote {ds.total_steps()} transitions over {len(ds.trajectories)} "
          f"trajectories to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------


def cmd_corrupt(args) -> int:
    elements = tuple(e.strip() for e in args.elements.split(",") if e.strip())
    spec = corruption.CorruptionSpec(elements=elements, mode=args.mode,
                                     rate=args.rate, scale=args.scale, seed=args.seed)
    needs_oracle = spec.mode == "adversarial" and (
        "state" in spec.elements or "action" in spec.elements)
    if needs_oracle and not args.oracle:
        raise UsageError("adversarial state/action corruption requires --oracle")
    bundle = oracle.load_oracle(args.oracle) if needs_oracle else None
    ds = data.load_dataset(args.input)
    rng = np.random.default_rng(spec.seed)
    corrupted, log = corruption.corrupt(ds, spec, bundle, rng)
    inputs = {"dataset": args.input}
    if needs_oracle:
        inputs["oracle"] = args.oracle
    corrupted.meta["provenance"] = _provenance("corrupt", args, inputs)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(corrupted, out)
    corruption.write_attack_log(str(out) + ".attacklog.jsonl", log)
    print(f"corrupted {len(log)} entries -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / train-oracle
# ---------------------------------------------------------------------------


def _load_experiment_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _validate_train_setup(cfg: dict, args) -> tuple:
    """Collect every config problem before any compute happens."""
    problems = []
    data_path = cfg.get("data")
    if not data_path:
        problems.append("config lacks a 'data' entry (path to an RDT1 dataset)")
    elif not Path(data_path).exists():
        problems.append(f"dataset not found: {data_path}")
    algorithm = args.algorithm or cfg.get("algorithm", "rdt")
    train_dict = dict(cfg.get("train", {}))
    train_dict["algorithm"] = algorithm
    train_cfg = model_cfg = None
    try:
        train_cfg = TrainConfig.from_dict(train_dict)
    except (TypeError, ValueError) as exc:
        problems.append(f"bad train config: {exc}")
    if algorithm in ("dt", "rdt"):
        model_dict = cfg.get("model")
        if model_dict is None:
            problems.append("config lacks a 'model' entry")
        else:
            try:
                model_cfg = ModelConfig.from_dict(dict(model_dict))
            except (TypeError, ValueError) as exc:
                problems.append(f"bad model config: {exc}")
    if problems:
        raise UsageError("config validation failed:\n  - " + "\n  - ".join(problems))
    return data_path, model_cfg, train_cfg


def _train_one_seed(job) -> str:
    data_path, model_cfg, train_cfg, seed, out_dir, provenance, corrupted = job
    ds = data.load_dataset(data_path)
    cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
    policy, records = training.train(ds, model_cfg, cfg, corrupted_index=corrupted)
    tag = f"{cfg.algorithm}_seed{seed}"
    ckpt = Path(out_dir) / f"ckpt_{tag}.rdtw"
    extra = {"train": cfg.to_dict(),
             "env": ds.meta.get("env", "unknown"),
             "target_return": ds.max_return(),
             "provenance": provenance}
    training.save_policy(ckpt, policy, extra)
    if records:
        records[0]["provenance"] = provenance
    metrics = Path(out_dir) / f"metrics_{tag}.jsonl"
    with open(metrics, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return str(ckpt)


def cmd_train(args) -> int:
    cfg = _load_experiment_config(args.config)
    data_path, model_cfg, train_cfg = _validate_train_setup(cfg, args)
    seeds = _parse_seeds(args.seed) if args.seed else [int(s) for s in cfg.get("seeds", [0])]
    if not seeds:
        raise UsageError("no seeds given (use --seed or a 'seeds' list in the config)")
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = _provenance("train", args, {"dataset": data_path, "config": args.config})
    corrupted = None
    attack_log = Path(str(data_path) + ".attacklog.jsonl")
    if attack_log.exists():
        corrupted = corruption.corrupted_index(corruption.read_attack_log(attack_log))
    jobs = [(data_path, model_cfg, train_cfg, seed, out_dir, provenance, corrupted)
            for seed in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(args.jobs, len(jobs))) as pool:
            written = pool.map(_train_one_seed, jobs)
    else:
        written = [_train_one_seed(job) for job in jobs]
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train_oracle(args) -> int:
    ds = data.load_dataset(args.data)
    cfg = oracle.OracleConfig(steps=args.steps, seed=args.seed)
    bundle = oracle.train_oracle(ds, cfg)
    bundle.meta["provenance"] = _provenance("train-oracle", args, {"dataset": args.data})
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle.save_oracle(out, bundle)
    print(f"wrote oracle to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------


def _eval_one(job) -> str:
    (model_path, env_name, episodes, target_return, kind, scale, candidates,
     oracle_path, seed, out_dir, provenance) = job
    policy, extra = training.load_policy(model_path)
    spec = envs.make_env_spec(env_name)
    perturb = None
    perturb_policy = None
    if kind != "none":
        perturb = corruption.PerturbSpec(kind=kind, scale=scale,
                                         n_candidates=candidates, seed=seed)
        if kind == "action_diff":
            bundle = oracle.load_oracle(oracle_path)

            def perturb_policy(s_norm, _b=bundle, _p=policy):
                raw = s_norm * _p.state_std + _p.state_mean
                return oracle.policy_action(_b, _b.normalize_states(raw))

    report = envs.evaluate(policy, spec, episodes, target_return,
                           perturb=perturb, perturb_policy=perturb_policy, seed=seed)
    report.provenance = provenance
    name = f"eval_{report.algorithm}_seed{seed}_{kind}_eps{scale:g}.json"
    out = Path(out_dir) / name
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return str(out)


def cmd_eval(args) -> int:
    if args.perturb not in ("none", "random", "action_diff"):
        raise UsageError(f"--perturb must be none, random or action_diff, got {args.perturb!r}")
    if args.perturb == "action_diff" and not args.oracle:
        raise UsageError("--perturb action_diff requires --oracle")
    scales = _parse_scales(args.scale_sweep) if args.scale_sweep else [args.scale]
    if args.perturb == "none" and (len(scales) > 1 or scales[0] != 0.0):
        raise UsageError("scale sweeps need --perturb random or action_diff")
    policy, extra = training.load_policy(args.model)
    env_name = args.env or extra.get("env")
    if not env_name or env_name == "unknown":
        raise UsageError("environment not recorded in the checkpoint; pass --env")
    if env_name not in envs.known_envs():
        raise UsageError(f"unknown env '{env_name}'; known envs: "
                         f"{', '.join(envs.known_envs())}")
    spec = envs.make_env_spec(env_name)
    if policy.state_dim != spec.d_s:
        raise UsageError(f"model expects d_s={policy.state_dim} but env "
                         f"'{env_name}' has d_s={spec.d_s}")
    target = args.target_return if args.target_return is not None \
        else extra.get("target_return")
    if target is None:
        raise UsageError("checkpoint lacks target_return; pass --target-return")
    inputs = {"model": args.model}
    if args.oracle:
        inputs["oracle"] = args.oracle
    provenance = _provenance("eval", args, inputs)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(args.model, env_name, args.episodes, float(target), args.perturb,
             scale, args.candidates, args.oracle, args.seed, out_dir, provenance)
            for scale in scales]
    if args.jobs > 1 and len(jobs) > 1:
        with multiprocessing.Pool(min(args.jobs, len(jobs))) as pool:
            written = pool.map(_eval_one, jobs)
    else:
        written = [_eval_one(job) for job in jobs]
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = {}
    for path in args.inputs:
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        perturb = rep.get("perturb") or {}
        key = (rep["algorithm"], rep["env"], perturb.get("kind", "none"),
               perturb.get("scale", 0.0))
        rows.setdefault(key, {})[rep["seed"]] = rep
    seeds = sorted({s for by_seed in rows.values() for s in by_seed})
    provenance = _provenance("report", args, {str(p): p for p in args.inputs})
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = (["algorithm", "env", "perturb", "scale", "n_seeds",
               "score_mean", "score_std", "return_mean", "return_std"]
              + [f"score_seed{s}" for s in seeds])
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        plot_curves = {}
        for key in sorted(rows):
            by_seed = rows[key]
            scores = [by_seed[s]["normalized_score"] for s in sorted(by_seed)]
            returns = [by_seed[s]["mean_return"] for s in sorted(by_seed)]
            row = [key[0], key[1], key[2], key[3], len(by_seed),
                   f"{np.mean(scores):.4f}", f"{np.std(scores):.4f}",
                   f"{np.mean(returns):.4f}", f"{np.std(returns):.4f}"]
            row += [f"{by_seed[s]['normalized_score']:.4f}" if s in by_seed else ""
                    for s in seeds]
            writer.writerow(row)
            curve = plot_curves.setdefault((key[0], key[1], key[2]),
                                           {"algorithm": key[0], "env": key[1],
                                            "perturb": key[2], "x": [], "y": [], "err": []})
            curve["x"].append(key[3])
            curve["y"].append(float(np.mean(scores)))
            curve["err"].append(float(np.std(scores)))
    if args.plot_data:
        plot_path = _out_path(args.plot_data)
        with open(plot_path, "w", encoding="utf-8") as fh:
            json.dump({"curves": list(plot_curves.values()), "provenance": provenance},
                      fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdtlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a clean offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--kind", default="medium_replay",
                   choices=["medium_replay", "expert"])
    p.add_argument("--transitions", type=int, default=20000)
    p.add_argument("--subsample-ratio", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("corrupt", help="attack a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--elements", default="action",
                   help="comma list out of state,action,reward")
    p.add_argument("--mode", default="random", choices=["random", "adversarial"])
    p.add_argument("--rate", type=float, default=0.3)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--oracle", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train-oracle", help="train the attack oracle on clean data")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_oracle)

    p = sub.add_parser("train", help="train a policy from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--algorithm", choices=list(training.ALGORITHMS), default=None)
    p.add_argument("--seed", default=None, help="seed or comma list of seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint, optionally perturbed")
    p.add_argument("--model", required=True)
    p.add_argument("--env", default=None)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--target-return", type=float, default=None)
    p.add_argument("--perturb", default="none")
    p.add_argument("--scale", type=float, default=0.0)
    p.add_argument("--scale-sweep", default=None, help="comma list of scales")
    p.add_argument("--candidates", type=int, default=50)
    p.add_argument("--oracle", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into a CSV table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-data", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, data.EmptyDatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, oracle.OracleTrainingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
