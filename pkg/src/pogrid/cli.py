"""Command-line entry point: ``pogrid generate|train|predict|eval|render``.

Every command reads a JSON run config (optional; defaults are the desk-scale
setup) and accepts ``--set key=value`` overrides with dotted keys, e.g.
``--set arch1.forest.n_trees=5``. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipelines
from .autoencoder import TrainingDiverged, TrainSpec
from .forest import ForestParams
from .grid import (AugmentedOccupancyGrid, GridConfig, GridFormatError, decode_grid,
                   save_grid)
from .scenario import LAYOUT_KINDS, RoadLayout, generate_dataset, load_dataset

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_SDA1 = {"epochs": 200, "learning_rate": 0.002, "weight_decay": 0.0, "batch_size": 32,
         "rng_seed": 11, "activation": "linear", "corruption": {"kind": "gaussian", "strength": 0.1}}
_SDA2 = {"epochs": 300, "learning_rate": 0.02, "weight_decay": 0.0, "batch_size": 32,
         "rng_seed": 12, "activation": "linear", "corruption": {"kind": "gaussian", "strength": 0.1}}

DEFAULTS = {
    "grid": {"rows": 20, "cols": 20},
    "layout": {"kind": "four-way-open", "extent": [40.0, 40.0], "lane_width": 3.5},
    "s_count": 3,
    "horizon": 1.0,
    "dt": 0.1,
    "t_pred": 1.0,
    "prior": None,
    "dataset": {"n_total": 2500, "train_fraction": 0.8, "seed": 0},
    "arch1": {"sizes": [30], "sda": _SDA1, "forest": {"n_trees": 30, "rng_seed": 21}},
    "arch2": {"sizes1": [30], "sizes2": [30], "sda1": _SDA1, "sda2": _SDA2,
              "forest": {"n_trees": 30, "min_samples_leaf": 5, "rng_seed": 22}},
    "arch3": {"spec": {"epochs": 30, "learning_rate": 0.05, "weight_decay": 0.0, "batch_size": 16,
                       "rng_seed": 31},
              "n_filters": 20, "kernel_size": 4, "strides": [2, 2], "holdout": 0},
    "paths": {"dataset": "data", "bundles": "bundles", "reports": "reports"},
    "workers": None,
}


class UsageError(Exception):
    pass


# sub-objects whose keys are checked by their own constructors
_FREE_FORM = {"sda", "sda1", "sda2", "spec", "forest", "corruption"}


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and not (path and path[-1] in _FREE_FORM):
            raise UsageError(f"unknown config key {'.'.join(path + (k,))!r}")
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, path + (k,))
        else:
            out[k] = v
    return out


def _nested(key: str, value) -> dict:
    for part in reversed(key.split(".")):
        value = {part: value}
    return value


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings; ``data`` is the full JSON tree with defaults filled in."""

    data: dict

    @classmethod
    def from_dict(cls, d: dict | None = None, overrides=()) -> RunConfig:
        data = _merge(DEFAULTS, d or {})
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise UsageError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data = _merge(data, _nested(key, value))
        cfg = cls(data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> RunConfig:
        if path is None:
            return cls.from_dict({}, overrides)
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        return cls.from_dict(raw, overrides)

    def validate(self):
        d = self.data
        try:
            self.layout
            self.grid_config
            self.arch1_kwargs()
            self.arch2_kwargs()
            self.arch3_kwargs()
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        if d["layout"]["kind"] not in LAYOUT_KINDS:
            raise UsageError(f"layout.kind must be one of {LAYOUT_KINDS}")
        if not (isinstance(d["s_count"], int) and d["s_count"] >= 1):
            raise UsageError("s_count must be a positive integer")
        if not (d["dt"] > 0 and d["horizon"] > 0 and 0 <= d["t_pred"] <= d["horizon"] + 1e-9):
            raise UsageError("need dt > 0, horizon > 0 and 0 <= t_pred <= horizon")
        ds = d["dataset"]
        if not (isinstance(ds["n_total"], int) and ds["n_total"] >= 1 and 0 < ds["train_fraction"] < 1):
            raise UsageError("dataset.n_total must be >= 1 and train_fraction in (0, 1)")

    @property
    def layout(self) -> RoadLayout:
        return RoadLayout.from_dict(self.data["layout"])

    @property
    def grid_config(self) -> GridConfig:
        g = self.data["grid"]
        return self.layout.grid_config(int(g["rows"]), int(g["cols"]))

    def provenance(self) -> dict:
        """The settings that determine outputs; thread count is left out on purpose."""
        return {k: v for k, v in self.data.items() if k != "workers"}

    def path(self, name: str) -> Path:
        return Path(self.data["paths"][name])

    def arch1_kwargs(self) -> dict:
        a = self.data["arch1"]
        return {"sizes": tuple(a["sizes"]), "sda_spec": TrainSpec.from_dict(a["sda"]),
                "forest": ForestParams(**a["forest"])}

    def arch2_kwargs(self) -> dict:
        a = self.data["arch2"]
        return {"sizes1": tuple(a["sizes1"]), "sizes2": tuple(a["sizes2"]),
                "sda1_spec": TrainSpec.from_dict(a["sda1"]), "sda2_spec": TrainSpec.from_dict(a["sda2"]),
                "forest": ForestParams(**a["forest"])}

    def arch3_kwargs(self) -> dict:
        a = self.data["arch3"]
        return {"spec": TrainSpec.from_dict(a["spec"]), "n_filters": int(a["n_filters"]),
                "kernel_size": int(a["kernel_size"]), "strides": tuple(a["strides"]),
                "holdout": int(a["holdout"])}


# -- commands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path | None = None) -> Path:
    d = cfg.data
    out = out or cfg.path("dataset")
    manifest = generate_dataset(cfg.layout, d["dataset"]["n_total"], d["dataset"]["train_fraction"],
                                d["dataset"]["seed"], cfg.grid_config, d["t_pred"], out,
                                s_count=d["s_count"], horizon=d["horizon"], dt=d["dt"],
                                prior=d["prior"], workers=d["workers"])
    print(manifest)
    return manifest


def _train(cfg: RunConfig, arch: pipelines.ArchitectureId, dataset, history: dict):
    if arch is pipelines.ArchitectureId.ARCH1:
        return pipelines.train_arch1(dataset, workers=cfg.data["workers"], history=history,
                                     **cfg.arch1_kwargs())
    if arch is pipelines.ArchitectureId.ARCH2:
        return pipelines.train_arch2(dataset, workers=cfg.data["workers"], history=history,
                                     **cfg.arch2_kwargs())
    return pipelines.train_arch3(dataset, history=history, **cfg.arch3_kwargs())


def cmd_train(cfg: RunConfig, arch, dataset_dir: Path | None = None, out: Path | None = None) -> Path:
    arch = pipelines.ArchitectureId.parse(arch)
    dataset_dir = dataset_dir or cfg.path("dataset")
    train = load_dataset(dataset_dir, "train")
    if len(train) == 0:
        raise ValueError(f"dataset {dataset_dir} has no training records")
    if abs(train.t_pred - cfg.data["t_pred"]) > 1e-9 or not train.config.same_layout(cfg.grid_config):
        raise ValueError(f"dataset {dataset_dir} was generated with a different grid or t_pred")
    history: dict = {}
    predictor = _train(cfg, arch, train, history)
    for name, losses in history.items():
        if name == "convnet":
            for rec in losses:
                print(f"{name} epoch {rec['epoch']}: " + " ".join(
                    f"{k}={v:.6g}" for k, v in rec.items() if k != "epoch"))
        else:
            for l, layer in enumerate(losses):
                print(f"{name} layer {l}: loss {layer[0]:.6g} -> {layer[-1]:.6g} over {len(layer) - 1} epochs")
    out = out or cfg.path("bundles") / arch.value
    manifest = pipelines.save_predictor(predictor, out, {"run_config": cfg.provenance()})
    print(manifest)
    return manifest


def cmd_predict(bundle: Path, aog_path: Path, out: Path) -> Path:
    predictor = pipelines.load_predictor(bundle)
    arr, _ = decode_grid(Path(aog_path).read_bytes())
    aog = AugmentedOccupancyGrid(predictor.config, arr)
    save_grid(out, pipelines.predict(predictor, aog))
    print(out)
    return out


def cmd_eval(cfg: RunConfig, bundles, dataset_dir: Path | None = None, out: Path | None = None,
             split: str = "validation", latency_calls: int = 100) -> dict[str, Path]:
    dataset_dir = dataset_dir or cfg.path("dataset")
    data = load_dataset(dataset_dir, split)
    if len(data) == 0:
        raise ValueError(f"dataset {dataset_dir} has no {split} records")
    predictors = {}
    for b in bundles:
        p = pipelines.load_predictor(b)
        want = p.meta.get("dataset_config_hash")
        if want != data.manifest.get("config_hash"):
            raise ValueError(f"config hash mismatch: bundle {b} has {want}, "
                             f"dataset {dataset_dir} has {data.manifest.get('config_hash')}")
        name = p.arch.value
        k = 2
        while name in predictors:
            name, k = f"{p.arch.value}-{k}", k + 1
        predictors[name] = p
    report = pipelines.evaluate(predictors, data, latency_calls)
    paths = pipelines.write_report(report, out or cfg.path("reports"))
    print(report.summary_csv(), end="")
    return paths


def pgm_bytes(values: np.ndarray) -> bytes:
    """8-bit binary PGM; x (rows) points up and y (columns) to the left."""
    img = np.rint(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)[::-1, ::-1]
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def cmd_render(grid_path: Path, out: Path) -> Path:
    arr, _ = decode_grid(Path(grid_path).read_bytes())
    if arr.shape[2] not in (1, 5):
        raise GridFormatError(f"cannot render a grid with {arr.shape[2]} attributes", 14)
    # channel 0 is the probability of a POG and the occupancy flag of an AOG
    Path(out).write_bytes(pgm_bytes(arr[..., 0]))
    print(out)
    return out


# -- argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pogrid", description="Predicted occupancy grid estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted key, JSON value)")
        sp.add_argument("--workers", type=int, help="thread count for parallel stages")

    g = sub.add_parser("generate", help="sample scenarios and write a dataset")
    with_config(g)
    g.add_argument("--out", type=Path)

    t = sub.add_parser("train", help="train one architecture into a bundle directory")
    with_config(t)
    t.add_argument("--arch", required=True, choices=[a.value for a in pipelines.ArchitectureId])
    t.add_argument("--dataset", type=Path)
    t.add_argument("--out", type=Path)

    pr = sub.add_parser("predict", help="predict the POG of one AOG file")
    pr.add_argument("--bundle", type=Path, required=True)
    pr.add_argument("--aog", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="score bundles on a dataset split")
    with_config(e)
    e.add_argument("--bundle", type=Path, action="append", required=True)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--split", default="validation", choices=("train", "validation"))
    e.add_argument("--out", type=Path)
    e.add_argument("--latency-calls", type=int, default=100)

    r = sub.add_parser("render", help="write a grid file as a grayscale PGM image")
    r.add_argument("grid", type=Path)
    r.add_argument("--out", type=Path, required=True)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    if args.workers is not None:
        cfg = RunConfig.from_dict(cfg.data, [f"workers={args.workers}"])
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"pogrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(_config(args), args.out)
        elif args.command == "train":
            cmd_train(_config(args), args.arch, args.dataset, args.out)
        elif args.command == "predict":
            cmd_predict(args.bundle, args.aog, args.out)
        elif args.command == "eval":
            cmd_eval(_config(args), args.bundle, args.dataset, args.out, args.split, args.latency_calls)
        else:
            cmd_render(args.grid, args.out)
    except UsageError as exc:
        print(f"pogrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"pogrid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GridFormatError as exc:
        print(f"pogrid: malformed grid file at byte {exc.offset}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError) as exc:
        print(f"pogrid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
