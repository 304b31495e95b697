"""The three POG estimators wired end to end, their bundles, and evaluation.

arch1: SDA-1 encodes the AOG; one classification forest per POG cell.
arch2: SDA-1 encodes the AOG; one regression forest per SDA-2 code
       dimension; SDA-2 decodes the predicted code into a POG.
arch3: convolution / transposed-convolution network with a softmax head.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as sda
from . import deconvnet as cnn
from . import forest as rf
from .grid import (BAND_NAMES, LEVELS, N_LEVELS, AugmentedOccupancyGrid, GridConfig,
                   PredictedOccupancyGrid, QuantizedPog, banded_pog_error, level_index, pog_error)
from .scenario import Dataset

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "pogrid-predictor"
BUNDLE_VERSION = 1
HIST_EDGES = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))

# Reference validation errors (low, mid, high) of the full-scale models; context only.
REFERENCE_ERRORS = {
    "arch1": (0.0518, 0.0337, 0.0277),
    "arch2": (0.0742, 0.0739, 0.0501),
    "arch3": (0.1501, 0.1447, 0.0777),
}


class ArchitectureId(str, enum.Enum):
    ARCH1 = "arch1"
    ARCH2 = "arch2"
    ARCH3 = "arch3"

    @classmethod
    def parse(cls, value) -> ArchitectureId:
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown architecture {value!r}; choose from "
                             f"{', '.join(a.value for a in cls)}") from None


_COMPONENTS = {
    ArchitectureId.ARCH1: {"sda1", "forests"},
    ArchitectureId.ARCH2: {"sda1", "forests", "sda2"},
    ArchitectureId.ARCH3: {"convnet"},
}


@dataclass(frozen=True, eq=False)
class TrainedPredictor:
    """A trained architecture. ``components`` holds the models named in ``_COMPONENTS``."""

    arch: ArchitectureId
    config: GridConfig
    t_pred: float
    components: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arch = ArchitectureId.parse(self.arch)
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "config", self.config.with_attributes(5))
        if set(self.components) != _COMPONENTS[arch]:
            raise ValueError(f"{arch.value} needs components {sorted(_COMPONENTS[arch])}, "
                             f"got {sorted(self.components)}")
        n_in = self.config.rows * self.config.cols * 5
        n_cells = self.config.rows * self.config.cols
        c = self.components
        if arch is ArchitectureId.ARCH3:
            if c["convnet"].input_shape != (self.config.rows, self.config.cols, 5):
                raise ValueError("convnet input shape does not match the grid")
            return
        s1 = c["sda1"]
        if s1.layer_sizes[0] != n_in:
            raise ValueError(f"SDA-1 reads {s1.layer_sizes[0]} values, AOG has {n_in}")
        if arch is ArchitectureId.ARCH1:
            fg = c["forests"]
            if (fg.rows, fg.cols) != self.config.shape:
                raise ValueError("forest grid does not match the grid shape")
            if any(f.n_features != s1.layer_sizes[-1] for f in fg.forests):
                raise ValueError("forest inputs do not match the SDA-1 code size")
        else:
            s2 = c["sda2"]
            if s2.layer_sizes[0] != n_cells:
                raise ValueError(f"SDA-2 reads {s2.layer_sizes[0]} values, POG has {n_cells}")
            if len(c["forests"]) != s2.layer_sizes[-1]:
                raise ValueError("need one regression forest per SDA-2 code dimension")
            if any(f.n_features != s1.layer_sizes[-1] for f in c["forests"]):
                raise ValueError("forest inputs do not match the SDA-1 code size")


def _flat_aogs(dataset: Dataset) -> np.ndarray:
    return dataset.aogs.reshape(len(dataset), -1)


def _require(dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")


def _meta(dataset: Dataset, **extra) -> dict:
    return {"dataset_config_hash": dataset.manifest.get("config_hash"), "n_train": len(dataset), **extra}


def train_arch1(dataset: Dataset, sizes=(30,), sda_spec: sda.TrainSpec | None = None,
                forest: rf.ForestParams | None = None, workers: int | None = None,
                history: dict | None = None) -> TrainedPredictor:
    """SDA-1 on flattened AOGs, then one classifier per cell on (code, level index)."""
    _require(dataset)
    sda_spec = sda_spec or sda.TrainSpec()
    forest = forest or rf.ForestParams()
    X = _flat_aogs(dataset)
    hist = [] if history is not None else None
    s1 = sda.train_stack(X, [X.shape[1], *sizes], sda_spec, hist)
    codes = sda.encode_stack(s1, X)
    fg = rf.train_percell_forests(codes, level_index(dataset.qpogs), forest, N_LEVELS, workers)
    if history is not None:
        history["sda1"] = hist
    meta = _meta(dataset, sda1_sizes=s1.layer_sizes, sda1_spec=sda_spec.to_dict(),
                 forest=forest.to_dict())
    return TrainedPredictor(ArchitectureId.ARCH1, dataset.config, dataset.t_pred,
                            {"sda1": s1, "forests": fg}, meta)


def train_arch2(dataset: Dataset, sizes1=(30,), sizes2=(30,), sda1_spec: sda.TrainSpec | None = None,
                sda2_spec: sda.TrainSpec | None = None, forest: rf.ForestParams | None = None,
                workers: int | None = None, history: dict | None = None) -> TrainedPredictor:
    """SDA-1 on AOGs, SDA-2 on raw POGs, and regression forests between the two codes."""
    _require(dataset)
    sda1_spec = sda1_spec or sda.TrainSpec()
    sda2_spec = sda2_spec or sda.TrainSpec()
    forest = forest or rf.ForestParams()
    X = _flat_aogs(dataset)
    P = dataset.pogs.reshape(len(dataset), -1)
    h1 = [] if history is not None else None
    h2 = [] if history is not None else None
    s1 = sda.train_stack(X, [X.shape[1], *sizes1], sda1_spec, h1)
    s2 = sda.train_stack(P, [P.shape[1], *sizes2], sda2_spec, h2)
    forests = rf.train_perlatent_forests(sda.encode_stack(s1, X), sda.encode_stack(s2, P),
                                         forest, workers)
    if history is not None:
        history.update(sda1=h1, sda2=h2)
    meta = _meta(dataset, sda1_sizes=s1.layer_sizes, sda2_sizes=s2.layer_sizes,
                 sda1_spec=sda1_spec.to_dict(), sda2_spec=sda2_spec.to_dict(), forest=forest.to_dict())
    return TrainedPredictor(ArchitectureId.ARCH2, dataset.config, dataset.t_pred,
                            {"sda1": s1, "forests": forests, "sda2": s2}, meta)


def train_arch3(dataset: Dataset, spec: sda.TrainSpec | None = None, n_filters: int = 20,
                kernel_size: int = 4, strides=(2, 2), holdout: int = 0,
                history: dict | None = None) -> TrainedPredictor:
    """Convnet on (AOG, quantized POG class) pairs.

    The last ``holdout`` training samples are kept out of the gradient steps
    and scored after each epoch.
    """
    _require(dataset)
    spec = spec or sda.TrainSpec(epochs=30, learning_rate=0.05, weight_decay=0.0, batch_size=16)
    X, Y = dataset.aogs, level_index(dataset.qpogs)
    if not 0 <= holdout < len(dataset):
        raise ValueError("holdout must leave at least one training sample")
    pair = (X[-holdout:], Y[-holdout:]) if holdout else None
    if holdout:
        X, Y = X[:-holdout], Y[:-holdout]
    hist = [] if history is not None else None
    model = cnn.train_convnet(X, Y, spec, holdout=pair, history=hist, n_classes=N_LEVELS,
                              n_filters=n_filters, kernel_size=kernel_size, strides=tuple(strides))
    if history is not None:
        history["convnet"] = hist
    meta = _meta(dataset, spec=spec.to_dict(), n_filters=n_filters, kernel_size=kernel_size,
                 strides=list(strides), holdout=holdout)
    return TrainedPredictor(ArchitectureId.ARCH3, dataset.config, dataset.t_pred,
                            {"convnet": model}, meta)


# -- inference ----------------------------------------------------------------

def predict_batch(predictor: TrainedPredictor, aogs: np.ndarray) -> np.ndarray:
    """(n, rows, cols) occupancy probabilities for an (n, rows, cols, 5) stack of AOGs."""
    aogs = np.asarray(aogs, dtype=np.float64)
    cfg = predictor.config
    if aogs.shape[1:] != (cfg.rows, cfg.cols, 5):
        raise ValueError(f"predictor expects AOGs of shape {(cfg.rows, cfg.cols, 5)}, got {aogs.shape[1:]}")
    n = len(aogs)
    c = predictor.components
    if predictor.arch is ArchitectureId.ARCH3:
        probs = cnn.forward_batch(c["convnet"], aogs)
        return LEVELS[np.argmax(probs, axis=-1)]
    codes = sda.encode_stack(c["sda1"], aogs.reshape(n, -1))
    if predictor.arch is ArchitectureId.ARCH1:
        return LEVELS[c["forests"].predict_index(codes)]
    q2 = np.stack([f.predict_mean(codes) for f in c["forests"]], axis=1)
    out = sda.decode_stack(c["sda2"], q2).reshape(n, cfg.rows, cfg.cols)
    return np.clip(out, 0.0, 1.0)


def predict(predictor: TrainedPredictor, aog: AugmentedOccupancyGrid) -> PredictedOccupancyGrid:
    """POG for one AOG; arch1 and arch3 return a :class:`QuantizedPog`."""
    if not predictor.config.same_layout(aog.config):
        raise ValueError("AOG grid config does not match the predictor")
    probs = predict_batch(predictor, aog.cells[None])[0]
    cfg = predictor.config.with_attributes(1)
    if predictor.arch is ArchitectureId.ARCH2:
        return PredictedOccupancyGrid(cfg, predictor.t_pred, probs)
    return QuantizedPog(cfg, predictor.t_pred, probs)


# -- bundles ------------------------------------------------------------------

_FILES = {"sda1": "sda1.sdam", "sda2": "sda2.sdam", "convnet": "convnet.cnvm"}


def _component_bytes(arch, name, model) -> bytes:
    if name in ("sda1", "sda2"):
        return sda.sda_to_bytes(model)
    if name == "convnet":
        return cnn.convnet_to_bytes(model)
    if arch is ArchitectureId.ARCH1:
        return rf.grid_to_bytes(model)
    return rf.forests_to_bytes(model)


def _component_from(arch, name, data: bytes):
    if name in ("sda1", "sda2"):
        return sda.sda_from_bytes(data)
    if name == "convnet":
        return cnn.convnet_from_bytes(data)
    if arch is ArchitectureId.ARCH1:
        return rf.grid_from_bytes(data)
    return rf.forests_from_bytes(data)


def _file_of(name: str) -> str:
    return _FILES.get(name, "forests.rf")


def save_predictor(predictor: TrainedPredictor, out_dir, extra: dict | None = None) -> Path:
    """Write component files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(predictor.components):
        fname = _file_of(name)
        (out / fname).write_bytes(_component_bytes(predictor.arch, name, predictor.components[name]))
        files[name] = fname
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "architecture": predictor.arch.value,
        "grid": predictor.config.to_dict(),
        "t_pred": predictor.t_pred,
        "files": files,
        "meta": predictor.meta,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_predictor(path) -> TrainedPredictor:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read predictor manifest {path}: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{path} is not a predictor bundle manifest")
    arch = ArchitectureId.parse(manifest["architecture"])
    comps = {name: _component_from(arch, name, (path.parent / fname).read_bytes())
             for name, fname in manifest["files"].items()}
    return TrainedPredictor(arch, GridConfig.from_dict(manifest["grid"]), float(manifest["t_pred"]),
                            comps, manifest.get("meta", {}))


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioRecord:
    scenario_id: int
    architecture: str
    eps_low: float | None
    eps_mid: float | None
    eps_high: float | None
    eps_total: float


@dataclass(frozen=True)
class EvalReport:
    """Per-scenario errors, their per-architecture means, latency stats and error histograms.

    ``means[name]`` is the (low, mid, high) mean over scenarios whose band is
    non-empty; a band that is empty everywhere has mean ``None``.
    """

    records: tuple[ScenarioRecord, ...]
    means: dict
    latency: dict
    histograms: dict
    reference: dict = field(default_factory=lambda: dict(REFERENCE_ERRORS))

    def per_scenario_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario_id", "architecture", "eps_low", "eps_mid", "eps_high", "eps_total"])
        for r in self.records:
            w.writerow([r.scenario_id, r.architecture, _fmt(r.eps_low), _fmt(r.eps_mid),
                        _fmt(r.eps_high), _fmt(r.eps_total)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["architecture", "mean_eps_low", "mean_eps_mid", "mean_eps_high", "n_scenarios"])
        for name, m in self.means.items():
            w.writerow([name, *(_fmt(v) for v in m), self.histograms[name].sum()])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["architecture", "bin_low", "bin_high", "count"])
        for name, counts in self.histograms.items():
            for k, c in enumerate(counts):
                w.writerow([name, _fmt(HIST_EDGES[k]), _fmt(HIST_EDGES[k + 1]), int(c)])
        return buf.getvalue()

    def latency_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["architecture", "calls", "mean_s", "median_s", "max_s"])
        for name, s in self.latency.items():
            w.writerow([name, s["calls"], _fmt(s["mean"]), _fmt(s["median"]), _fmt(s["max"])])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def histogram(errors) -> np.ndarray:
    """Counts of per-scenario total errors over ``HIST_EDGES``; values past 1 land in the last bin."""
    e = np.clip(np.asarray(errors, dtype=np.float64), 0.0, HIST_EDGES[-1])
    counts, _ = np.histogram(e, bins=np.array(HIST_EDGES))
    return counts


def measure_latency(predictor, aogs: np.ndarray, calls: int = 100) -> dict:
    """Wall-clock seconds of single-AOG predictions, cycling through ``aogs``."""
    times = []
    for k in range(calls):
        x = aogs[k % len(aogs)][None]
        t0 = time.perf_counter()
        predict_batch(predictor, x)
        times.append(time.perf_counter() - t0)
    return {"calls": calls, "mean": statistics.fmean(times), "median": statistics.median(times),
            "max": max(times)}


def _check_compatible(predictor: TrainedPredictor, validation: Dataset):
    if not predictor.config.same_layout(validation.config):
        raise ValueError(f"{predictor.arch.value} predictor grid config differs from the dataset")
    want = predictor.meta.get("dataset_config_hash")
    have = validation.manifest.get("config_hash")
    if want and have and want != have:
        raise ValueError(f"config hash mismatch: predictor trained on {want}, dataset is {have}")
    if abs(predictor.t_pred - validation.t_pred) > 1e-9:
        raise ValueError(f"predictor t_pred {predictor.t_pred} differs from dataset t_pred {validation.t_pred}")


def evaluate(predictors, validation: Dataset, latency_calls: int = 100) -> EvalReport:
    """Score predictors on ``validation`` against the raw ground-truth POGs.

    ``predictors`` is a mapping name -> predictor, or a list (named by
    architecture). Anything with a ``predict_batch(aogs)`` method is also
    accepted, which is how oracle predictors plug in.
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    if not isinstance(predictors, dict):
        predictors = {getattr(p.arch, "value", str(p.arch)): p for p in predictors}
    records, means, latency, hists = [], {}, {}, {}
    gt_cfg = validation.config.with_attributes(1)
    for name, p in predictors.items():
        if isinstance(p, TrainedPredictor):
            _check_compatible(p, validation)
            preds = predict_batch(p, validation.aogs)
        else:
            preds = np.asarray(p.predict_batch(validation.aogs), dtype=np.float64)
        rows, totals = [], []
        for k in range(len(validation)):
            gt = validation.pog(k)
            est = PredictedOccupancyGrid(gt_cfg, validation.t_pred, preds[k])
            be = banded_pog_error(gt, est)
            total = pog_error(gt, est)
            totals.append(total)
            rows.append(ScenarioRecord(int(validation.ids[k]), name, *be.as_tuple(), total))
        records.extend(rows)
        means[name] = tuple(_mean_or_none(getattr(r, f"eps_{b}") for r in rows) for b in BAND_NAMES)
        hists[name] = histogram(totals)
        if latency_calls > 0 and isinstance(p, TrainedPredictor):
            latency[name] = measure_latency(p, validation.aogs, latency_calls)
    return EvalReport(tuple(records), means, latency, hists)


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """CSV files for a report. Only ``latency.csv`` holds wall-clock numbers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"scenarios": out / "scenarios.csv", "summary": out / "summary.csv",
             "histogram": out / "histogram.csv"}
    paths["scenarios"].write_text(report.per_scenario_csv())
    paths["summary"].write_text(report.summary_csv())
    paths["histogram"].write_text(report.histogram_csv())
    if report.latency:
        paths["latency"] = out / "latency.csv"
        paths["latency"].write_text(report.latency_csv())
    return paths
