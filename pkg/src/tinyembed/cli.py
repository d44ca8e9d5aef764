"""Command-line entry point: train | eval | embed | curve | aggregate.

A run is driven by a JSON config file mirroring the library's config
objects, with command-line flags overriding file values.  Every command
that owns an output directory echoes the fully resolved configuration
there, so a run can be reproduced from its own artifacts.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
The only environment variable honored here is TINYEMBED_VERBOSITY
(0 = quiet, 1 = normal, 2 = per-step detail).
"""

import argparse
import json
import os
import sys

import numpy as np

from .data import ByteTokenizer, TEMPLATES, get_template, load_sts, load_triplets, synthetic_corpus
from .errors import ConfigError, TinyembedError
from .evaluation import ModelEmbedder, aggregate, checkpoint_curve, evaluate_sts
from .lora import LoraConfig
from .model import ModelConfig
from .trainer import TrainConfig, load_for_inference, run_training


def _verbosity():
    raw = os.environ.get("TINYEMBED_VERBOSITY", "1")
    try:
        return max(0, min(2, int(raw)))
    except ValueError:
        return 1


def _say(level, message):
    if _verbosity() >= level:
        print(message)


# ---------------------------------------------------------------------------
# config file handling

_MODEL_KEYS = set(ModelConfig().to_dict())
_LORA_KEYS = set(LoraConfig().to_dict())
_TRAIN_KEYS = set(TrainConfig().to_dict()) - {"seed", "total_steps"}
_DATA_KEYS = {"train_triplets", "synthetic", "sts"}
_SYNTHETIC_KEYS = {"seed", "n_clusters", "triplets_per_cluster"}
_TOP_KEYS = {"seed", "out_dir", "prompt", "model", "lora", "train", "data"}

_DEFAULT_SYNTHETIC = {"seed": 1, "n_clusters": 8, "triplets_per_cluster": 50}


def _check_keys(section, obj, allowed):
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {section}: {sorted(unknown)}; allowed: {sorted(allowed)}"
        )


def load_run_config(path=None):
    """Parse and validate a run config file; missing sections get defaults."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as ex:
                raise ConfigError(f"{path}: not valid JSON ({ex})") from None
    _check_keys("<top level>", raw, _TOP_KEYS)
    _check_keys("model", raw.get("model", {}), _MODEL_KEYS)
    _check_keys("lora", raw.get("lora", {}), _LORA_KEYS)
    _check_keys("train", raw.get("train", {}), _TRAIN_KEYS)
    _check_keys("data", raw.get("data", {}), _DATA_KEYS)
    data = dict(raw.get("data", {}))
    if "synthetic" in data and data["synthetic"] is not None:
        _check_keys("data.synthetic", data["synthetic"], _SYNTHETIC_KEYS)
    if "sts" in data and data["sts"] is not None:
        if not isinstance(data["sts"], dict):
            raise ConfigError("data.sts must map benchmark names to file paths")
    prompt = raw.get("prompt", "none")
    get_template(prompt)  # validates the name
    return {
        "seed": raw.get("seed", 42),
        "out_dir": raw.get("out_dir", "runs/default"),
        "prompt": prompt,
        "model": dict(raw.get("model", {})),
        "lora": dict(raw.get("lora", {})),
        "train": dict(raw.get("train", {})),
        "data": {
            "train_triplets": data.get("train_triplets"),
            "synthetic": data.get("synthetic", _DEFAULT_SYNTHETIC),
            "sts": data.get("sts", {}),
        },
    }


def _apply_overrides(config, args):
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        config["out_dir"] = args.out
    if getattr(args, "prompt", None) is not None:
        config["prompt"] = args.prompt
    if getattr(args, "lr", None) is not None:
        config["train"]["learning_rate"] = args.lr
    if getattr(args, "objective", None) is not None:
        config["train"]["objective"] = args.objective
    if getattr(args, "shards", None) is not None:
        config["train"]["num_shards"] = args.shards
    if getattr(args, "train_data", None) is not None:
        config["data"]["train_triplets"] = args.train_data
    return config


def _build_configs(config):
    model_config = ModelConfig.from_dict({**ModelConfig().to_dict(), **config["model"]})
    lora_config = LoraConfig.from_dict({**LoraConfig().to_dict(), **config["lora"]})
    train_kwargs = {**{k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS}, **config["train"]}
    train_config = TrainConfig(seed=config["seed"], lora=lora_config, **train_kwargs)
    return model_config, lora_config, train_config


def _echo_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _training_records(config):
    path = config["data"]["train_triplets"]
    if path:
        return load_triplets(path)
    syn = {**_DEFAULT_SYNTHETIC, **(config["data"]["synthetic"] or {})}
    triplets, _ = synthetic_corpus(
        syn["seed"], syn["n_clusters"], syn["triplets_per_cluster"]
    )
    return triplets


def _sts_datasets(config, cli_paths):
    """Benchmark name -> records, from --sts flags or the config file."""
    datasets = {}
    if cli_paths:
        for path in cli_paths:
            name = os.path.splitext(os.path.basename(path))[0]
            datasets[name] = load_sts(path)
    elif config["data"]["sts"]:
        for name, path in config["data"]["sts"].items():
            datasets[name] = load_sts(path)
    else:
        syn = {**_DEFAULT_SYNTHETIC, **(config["data"]["synthetic"] or {})}
        _, pairs = synthetic_corpus(
            syn["seed"], syn["n_clusters"], syn["triplets_per_cluster"]
        )
        datasets["synthetic"] = pairs
    return datasets


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args):
    config = _apply_overrides(load_run_config(args.config), args)
    model_config, _, train_config = _build_configs(config)
    records = _training_records(config)
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)
    _say(1, f"training on {len(records)} triplets -> {out_dir}")

    def progress(step, loss, lr):
        _say(2, f"step {step}: loss {loss:.6f} lr {lr:.3e}")

    result = run_training(
        train_config, model_config, records, out_dir,
        resume_from=args.resume, log_fn=progress,
    )
    _say(1, f"done: {len(result.log_rows)} steps, final checkpoint {result.final_checkpoint}")
    return 0


def _cmd_eval(args):
    config = _apply_overrides(load_run_config(args.config), args)
    out_dir = config["out_dir"]
    datasets = _sts_datasets(config, args.sts)
    template = get_template(config["prompt"])
    handle, model_config = load_for_inference(args.checkpoint)
    embedder = ModelEmbedder(handle, ByteTokenizer(model_config.max_seq_len))
    reports = [
        evaluate_sts(embedder, records, template, benchmark=name)
        for name, records in datasets.items()
    ]
    overall = aggregate([r.spearman_pct for r in reports])
    _echo_config(config, out_dir)
    report_path = os.path.join(out_dir, "eval_report.csv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("benchmark,spearman_pct,n_pairs,prompt\n")
        for r in reports:
            fh.write(f"{r.benchmark},{r.spearman_pct:.2f},{r.n_pairs},{r.prompt}\n")
    json_path = os.path.join(out_dir, "eval_aggregate.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "mean": overall.mean,
                "std": overall.std,
                "scores": {r.benchmark: r.spearman_pct for r in reports},
                "prompt": template.name,
                "checkpoint": args.checkpoint,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    for r in reports:
        _say(1, r.display())
    _say(1, f"overall: {overall.display()}")
    return 0


def _cmd_embed(args):
    config = _apply_overrides(load_run_config(args.config), args)
    template = get_template(config["prompt"])
    handle, model_config = load_for_inference(args.checkpoint)
    embedder = ModelEmbedder(handle, ByteTokenizer(model_config.max_seq_len))
    with open(args.input, encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh if line.strip()]
    if not texts:
        raise TinyembedError(f"{args.input}: no non-empty lines to embed")
    vectors = embedder.embed(texts, template)
    out_path = args.output
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in vectors:
            fh.write(json.dumps([float(x) for x in row]) + "\n")
    _say(1, f"wrote {len(texts)} embeddings ({vectors.shape[1]} dims) to {out_path}")
    return 0


def _cmd_curve(args):
    config = _apply_overrides(load_run_config(args.config), args)
    out_dir = config["out_dir"]
    datasets = _sts_datasets(config, args.sts)
    template = get_template(config["prompt"])
    ckpt_dir = args.checkpoint_dir or out_dir
    rows, convergence = checkpoint_curve(
        ckpt_dir, datasets, template, tolerance=args.tolerance
    )
    _echo_config(config, out_dir)
    curve_path = os.path.join(out_dir, "curve.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("step,overall\n")
        for row in rows:
            fh.write(f"{row.step},{'nan' if row.failed else repr(row.overall)}\n")
    for row in rows:
        _say(1, f"step {row.step}: " + ("failed" if row.failed else f"{row.overall:.2f}"))
    if convergence is not None:
        _say(1, f"converged (within {args.tolerance} of final) at step {convergence}")
    return 0


def _cmd_aggregate(args):
    with open(args.scores, encoding="utf-8") as fh:
        scores = [float(line) for line in fh if line.strip()]
    overall = aggregate(scores)
    print(overall.display())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="tinyembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, with_train_flags=False):
        p.add_argument("--config", help="JSON run config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--prompt", choices=sorted(TEMPLATES),
                       help="prompt template wrapped around every sentence")
        p.add_argument("--out", help="output directory override")
        if with_train_flags:
            p.add_argument("--lr", type=float, help="override learning rate")
            p.add_argument("--objective", choices=("eq1", "eq2"),
                           help="contrastive objective: with (eq1) or without (eq2) hard negatives")
            p.add_argument("--shards", type=int, help="simulated data-parallel shard count")

    p_train = sub.add_parser("train", help="fine-tune adapters on triplet data")
    common(p_train, with_train_flags=True)
    p_train.add_argument("--train-data", help="triplet JSON-lines file (default: built-in synthetic corpus)")
    p_train.add_argument("--resume", help="checkpoint file to resume from")

    p_eval = sub.add_parser("eval", help="score a checkpoint on STS benchmarks")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    p_eval.add_argument("--sts", action="append", default=[],
                        help="STS data file (repeatable); default: config file or synthetic pairs")

    p_embed = sub.add_parser("embed", help="write embeddings for a file of texts")
    common(p_embed)
    p_embed.add_argument("--checkpoint", required=True, help="checkpoint file to embed with")
    p_embed.add_argument("--input", required=True, help="text file, one sentence per line")
    p_embed.add_argument("--output", required=True, help="output file, one JSON array per line")

    p_curve = sub.add_parser("curve", help="evaluate every checkpoint in a directory")
    common(p_curve)
    p_curve.add_argument("--checkpoint-dir", help="directory of checkpoints (default: out dir)")
    p_curve.add_argument("--sts", action="append", default=[], help="STS data file (repeatable)")
    p_curve.add_argument("--tolerance", type=float, default=0.5,
                         help="convergence tolerance in points (default 0.5)")

    p_agg = sub.add_parser("aggregate", help="mean ± std of a file of scores")
    p_agg.add_argument("--scores", required=True, help="text file, one score per line")
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "embed": _cmd_embed,
    "curve": _cmd_curve,
    "aggregate": _cmd_aggregate,
}


def run_command(argv):
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as ex:
        print(f"error: {ex}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as ex:  # --help
        return 0 if ex.code in (0, None) else int(ex.code)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as ex:
        print(f"config error: {ex}", file=sys.stderr)
        return 1
    except TinyembedError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2
    except OSError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2
    except ValueError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(run_command(sys.argv[1:]))
