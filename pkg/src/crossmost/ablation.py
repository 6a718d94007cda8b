"""Grid runner for mode, loss-term and view-count comparisons.

A grid file is TOML::

    base = "desk.toml"        # optional, resolved relative to the grid file
    seeds = [0, 1, 2]

    [set]                     # applied to every cell
    "trainer.epochs" = 8

    [[cells]]
    name = "joint"
    set = { "objective.mode" = "cross_modal" }

    [[cells]]
    name = "one_view"
    views = 1

Every (cell, seed) pair becomes ``<out>/<cell>-s<seed>/`` holding the config,
its hash and the self-training artifacts. Cells whose initialization depends
on the same config fields share one pretraining run.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .checkpoint import load_model, save_model
from .config import RunConfig, config_hash, load_config, tomllib
from .errors import ConfigurationError
from .metrics import MetricRecord
from .model import CrossModalModel
from .synthdata import DatasetSplit, make_dataset
from .trainer import build_initial_model, init_fingerprint, run_selftraining

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("run", "mode", "views", "acc_image", "acc_image_star", "acc_pcl", "epochs")


@dataclass
class Cell:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class Grid:
    base: RunConfig
    seeds: list[int]
    cells: list[Cell]
    shared: dict[str, Any] = field(default_factory=dict)

    def config(self, cell: Cell, seed: int) -> RunConfig:
        overrides = {**self.shared, **cell.overrides, "seed": seed, "name": f"{cell.name}-s{seed}"}
        return self.base.replace(**overrides)


def parse_grid(data: dict, base: RunConfig | None = None) -> Grid:
    unknown = set(data) - {"base", "seeds", "set", "cells"}
    if unknown:
        raise ConfigurationError(f"unknown grid keys: {sorted(unknown)}")
    cells = []
    for raw in data.get("cells", []):
        if "name" not in raw:
            raise ConfigurationError("every grid cell needs a name")
        extra = set(raw) - {"name", "set", "views"}
        if extra:
            raise ConfigurationError(f"cell {raw['name']!r}: unknown keys {sorted(extra)}")
        overrides = dict(raw.get("set", {}))
        if "views" in raw:
            overrides["data.views"] = raw["views"]
        cells.append(Cell(str(raw["name"]), overrides))
    if not cells:
        raise ConfigurationError("grid has no cells")
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ConfigurationError("grid cell names must be unique")
    seeds = data.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigurationError("grid seeds must be a non-empty list of integers")
    grid = Grid(base or RunConfig(), list(seeds), cells, dict(data.get("set", {})))
    for cell in cells:  # fail on bad overrides before any training starts
        grid.config(cell, seeds[0])
    return grid


def load_grid(path: str | Path) -> Grid:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    base = load_config(path.parent / data["base"]) if "base" in data else None
    return parse_grid(data, base)


class InitCache:
    """Datasets and pretrained initializations shared between grid cells.

    Datasets are keyed by everything except the downstream view count (fewer
    views are derived from a stored render); initializations by
    :func:`init_fingerprint`. With a ``root`` directory the initializations
    also persist as checkpoints, so an interrupted grid resumes cheaply.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._data: dict[str, DatasetSplit] = {}
        self._models: dict[str, CrossModalModel] = {}

    def dataset(self, cfg: RunConfig) -> DatasetSplit:
        d = cfg.to_dict()["data"]
        views = d.pop("views")
        key = config_hash({"data": d, "seed": cfg.seed})
        if key not in self._data:
            self._data[key] = make_dataset(cfg.data, cfg.seed)
        ds = self._data[key]
        if len(ds.train[0].views) != views:
            ds = ds.with_views(views, cfg.data.render_splat)
        return ds

    def initial_model(self, cfg: RunConfig, ds: DatasetSplit) -> CrossModalModel:
        """A fresh copy of the prototype-initialized model for ``cfg``."""
        key = init_fingerprint(cfg)
        if key not in self._models:
            ckpt = self.root / key if self.root is not None else None
            if ckpt is not None and (ckpt / "manifest.json").exists():
                self._models[key] = load_model(ckpt)
            else:
                model, history = build_initial_model(ds, cfg)
                if ckpt is not None:
                    save_model(model, ckpt, cfg.to_dict(), 0, {"pretrain_loss": history})
                self._models[key] = model
        model = self._models[key].clone()
        model.logit_scale = cfg.model.logit_scale  # not part of the fingerprint
        return model


def write_run_config(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "config.hash").write_text(cfg.hash() + "\n")


def summary_row(run: str, cfg: RunConfig, final: MetricRecord) -> dict[str, Any]:
    return {
        "run": run,
        "mode": cfg.objective.mode,
        "views": cfg.data.views,
        "acc_image": round(final.acc_image, 6),
        "acc_image_star": round(final.acc_image_star, 6),
        "acc_pcl": round(final.acc_pcl, 6),
        "epochs": cfg.trainer.epochs,
    }


def write_summary(rows: list[dict[str, Any]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def run_grid(
    grid: Grid,
    out_dir: str | Path,
    cache: InitCache | None = None,
) -> dict[str, list[MetricRecord]]:
    """Run every cell for every seed; returns the metric records keyed by run name.

    Seeds are the outer loop so each seed's dataset and initialization are
    built once and reused by all of its cells.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache if cache is not None else InitCache(out / "_init")
    rows, results = [], {}
    for seed in grid.seeds:
        for cell in grid.cells:
            cfg = grid.config(cell, seed)
            run_dir = out / cfg.name
            write_run_config(cfg, run_dir)
            ds = cache.dataset(cfg)
            model = cache.initial_model(cfg, ds)
            log.info("grid run %s", cfg.name)
            records = run_selftraining(ds, cfg, model, run_dir)
            results[cfg.name] = records
            rows.append(summary_row(cfg.name, cfg, records[-1]))
            write_summary(rows, out / "summary.csv")
    return results

