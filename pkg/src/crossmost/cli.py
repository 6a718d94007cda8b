"""Command-line entry point: ``crossmost {gen-data,pretrain,selftrain,eval,ablate}``.

Every command is deterministic given its config and seed. Failures exit with a
code per error class and print one JSON error record on stderr:

    1 other package error   2 usage   3 configuration   4 divergence (NaN)
    5 domain error          6 missing file
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .ablation import InitCache, load_grid, run_grid, write_run_config
from .checkpoint import load_model, read_manifest, resolve_model_dir, save_model
from .config import MODES, RunConfig, from_dict, load_config
from .errors import ConfigurationError, CrossmostError, DivergenceError
from .metrics import SplitTokens, accuracy_branches, dump_embeddings
from .synthdata import DatasetSplit, make_dataset, read_dataset, write_dataset
from .trainer import build_initial_model, run_selftraining

log = logging.getLogger("crossmost")

EXIT_MISSING_FILE = 6


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Config file (or ``base`` when none is given), then ``--set`` overrides, then the dedicated flags."""
    cfg = base if base is not None and args.config is None else load_config(args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["objective.mode"] = args.mode
    if getattr(args, "views", None) is not None:
        overrides["data.views"] = args.views
    if getattr(args, "disjoint_classes", False):
        overrides["data.disjoint_classes"] = True
    return cfg.replace(**overrides) if overrides else cfg


def load_data(cfg: RunConfig, data_dir: str | None) -> DatasetSplit:
    """Regenerate the dataset, or read one written by ``gen-data`` and check it matches ``cfg``."""
    if data_dir is None:
        return make_dataset(cfg.data, cfg.seed)
    ds, meta = read_dataset(data_dir)
    stored = from_dict(meta["config"])
    mine, theirs = cfg.to_dict()["data"], stored.to_dict()["data"]
    mine.pop("views"), theirs.pop("views")
    if mine != theirs or stored.seed != cfg.seed:
        raise ConfigurationError(f"dataset at {data_dir} was generated with a different data config or seed")
    if len(ds.train[0].views) != cfg.data.views:
        ds = ds.with_views(cfg.data.views, cfg.data.render_splat)
    return ds


def cmd_gen_data(args) -> dict:
    cfg = resolve_config(args)
    ds = make_dataset(cfg.data, cfg.seed)
    write_dataset(ds, args.out, {"config": cfg.to_dict(), "config_hash": cfg.hash()})
    write_run_config(cfg, Path(args.out))
    return {"out": str(args.out), "splits": {k: len(getattr(ds, k)) for k in ("pretrain", "train", "test", "exemplars")}}


def cmd_pretrain(args) -> dict:
    cfg = resolve_config(args)
    ds = load_data(cfg, args.data)
    model, history = build_initial_model(ds, cfg)
    out = Path(args.out)
    write_run_config(cfg, out)
    save_model(model, out, cfg.to_dict(), 0, {"pretrain_loss": history})
    return {"out": str(out), "pretrain_loss": history[-1] if history else None}


def cmd_selftrain(args) -> dict:
    cfg = resolve_config(args)
    ds = load_data(cfg, args.data)
    if args.init:
        model = load_model(resolve_model_dir(args.init, "student"))
    else:
        model, _ = build_initial_model(ds, cfg)
    out = Path(args.out)
    write_run_config(cfg, out)
    records = run_selftraining(ds, cfg, model, out)
    return records[-1].to_dict()


def cmd_eval(args) -> dict:
    model_dir = resolve_model_dir(args.init, args.which)
    model = load_model(model_dir)
    # without --config, evaluate on the data the checkpoint was trained for
    cfg = resolve_config(args, base=from_dict(read_manifest(model_dir)["config"]))
    ds = load_data(cfg, args.data)
    samples = getattr(ds, args.split)
    tk = cfg.tokenizer
    tokens = SplitTokens(samples, tk.n_groups, tk.group_size, tk.patch_size)
    result = {"checkpoint": str(model_dir), "split": args.split, "n_samples": len(samples), **accuracy_branches(model, tokens)}
    if args.dump_embeddings:
        result["embedding_rows"] = dump_embeddings(model, tokens, args.dump_embeddings)
    return result


def cmd_ablate(args) -> dict:
    grid = load_grid(args.grid)
    out = Path(args.out)
    results = run_grid(grid, out, InitCache(out / "_init"))
    return {"out": str(out), "runs": len(results), "summary": str(out / "summary.csv")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML config (or a run directory's config.json)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. trainer.epochs=4")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate and write the synthetic corpus")
    common(p)
    p.add_argument("--views", type=int)
    p.add_argument("--disjoint-classes", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain-align both encoders and initialize the classifier")
    common(p)
    p.add_argument("--data", help="dataset directory from gen-data (default: regenerate)")
    p.add_argument("--disjoint-classes", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("selftrain", help="cross-modal self-training from an initialization")
    common(p)
    p.add_argument("--init", help="checkpoint from pretrain (default: pretrain first)")
    p.add_argument("--data", help="dataset directory from gen-data (default: regenerate)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--views", type=int)
    p.add_argument("--disjoint-classes", action="store_true")
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint and optionally dump embeddings")
    common(p, out_required=False)
    p.add_argument("--init", required=True, help="checkpoint directory (pair or single model)")
    p.add_argument("--which", choices=("teacher", "student"), default="teacher")
    p.add_argument("--data", help="dataset directory from gen-data (default: regenerate)")
    p.add_argument("--split", choices=("test", "train", "pretrain", "exemplars"), default="test")
    p.add_argument("--views", type=int)
    p.add_argument("--dump-embeddings", metavar="CSV", help="write per-sample embeddings here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of configurations and write summary.csv")
    p.add_argument("--grid", required=True, help="TOML grid file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def _error_record(exc: BaseException, command: str | None) -> tuple[int, dict]:
    if isinstance(exc, CrossmostError):
        code = exc.exit_code
    elif isinstance(exc, FileNotFoundError):
        code = EXIT_MISSING_FILE
    else:
        code = 1
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": command}
    if isinstance(exc, DivergenceError):
        record["last_good_checkpoint"] = exc.last_good_checkpoint
    return code, record


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CROSSMOST_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        result = args.func(args)
    except (CrossmostError, FileNotFoundError) as exc:
        code, record = _error_record(exc, args.command)
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
