"""Run configuration files and byte-stable artifact writers.

Floats are written with Python's shortest round-trip ``repr``, JSON keys are
sorted and every file ends with a single LF, so identical runs produce
identical bytes.  Wall-clock timings are kept out of these files.

Configuration file: one JSON object with optional sections ``data``
(synthetic generator), ``train`` (training, with a nested ``model``) and
``sim`` (efficiency simulator).  Missing keys take their defaults and unknown
keys are rejected.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import STDataset, SyntheticConfig
from .efficiency import PLACEMENTS, SimConfig, SimReport
from .forecaster import ModelParams, ModelSpec
from .fusion import FusionParams
from .losses import MetricsReport
from .numerics import ContractError
from .trainer import TrainConfig

CHECKPOINT_FORMAT = "stqcl-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ContractError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SimSection:
    n_nodes: int = 20
    batch_groups: int = 64
    iterations: int = 1000
    seed: int = 0
    fractions: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5)
    placements: tuple[str, ...] = PLACEMENTS

    def base(self) -> SimConfig:
        return SimConfig(self.n_nodes, self.batch_groups, 0.0, "independent", self.iterations, self.seed)

    def validate(self) -> None:
        for f in self.fractions:
            SimConfig(hard_fraction=f).validate()
        for p in self.placements:
            SimConfig(placement=p).validate()
        self.base().validate()


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimSection = field(default_factory=SimSection)


# ---------------------------------------------------------------- config


def _coerce(section: str, cls, raw: dict, nested: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, val in raw.items():
        where = f"{section}.{key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown field")
        if nested and key in nested:
            kwargs[key] = nested[key](where, val)
            continue
        kwargs[key] = _convert(where, val, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ContractError as err:
        raise ConfigError(f"{section}: {err}") from None
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from None


def _convert(where: str, val, default):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{where}: expected true or false")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{where}: expected an integer")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{where}: expected a string")
        return val
    if isinstance(default, tuple):
        if not isinstance(val, list):
            raise ConfigError(f"{where}: expected a list")
        if default:
            return tuple(_convert(where, v, default[0]) for v in val)
        return tuple(val)
    return val


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for key in raw:
        if key not in ("data", "train", "sim"):
            raise ConfigError(f"{key}: unknown section")
    data = _coerce("data", SyntheticConfig, raw.get("data", {}))
    model = lambda where, val: _coerce(where, ModelSpec, val)  # noqa: E731
    train = _coerce("train", TrainConfig, raw.get("train", {}), nested={"model": model})
    sim = _coerce("sim", SimSection, raw.get("sim", {}))
    cfg = RunConfig(data, train, sim)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    for section, obj in (("data", cfg.data), ("train", cfg.train), ("sim", cfg.sim)):
        try:
            obj.validate()
        except ContractError as err:
            raise ConfigError(f"{section}.{err}" if not isinstance(err, ConfigError) else str(err)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"config not found: {path}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: invalid JSON ({err})") from None
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(dataclasses.asdict(cfg))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


# ---------------------------------------------------------------- writers


def dumps_json(obj) -> str:
    """Deterministic JSON text; non-finite floats are written as Infinity/NaN."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8", newline="\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def write_csv_rows(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def dataset_fingerprint(ds: STDataset) -> str:
    """sha256 of the canonical CSV rendering of the dataset."""
    h = hashlib.sha256()
    h.update((",".join(["timestamp", *ds.node_ids]) + "\n").encode())
    for stamp, row in zip(ds.timestamps, ds.values):
        h.update((",".join([str(stamp), *(repr(float(v)) for v in row)]) + "\n").encode())
    return h.hexdigest()


LOSS_COLUMNS = ("run", "epoch", "train_loss", "val_loss")
TRACE_COLUMNS = ("run", "iteration", "view", "percentile", "lambda", "included", "levels")
METRIC_COLUMNS = ("rmse", "mae", "mape", "q10", "q50", "q90")


def write_losses(path, histories: dict[str, tuple[list, list]]) -> None:
    rows = []
    for run, (train, val) in histories.items():
        for epoch, (tl, vl) in enumerate(zip(train, val), start=1):
            rows.append((run, epoch, tl, vl))
    write_csv_rows(path, LOSS_COLUMNS, rows)


def write_pace_trace(path, trace: list[dict], default_run: str = "main") -> None:
    rows = []
    for r in trace:
        levels = ";".join(fmt(float(x)) for x in r["levels"])
        rows.append((r.get("expert", default_run), r["iteration"], r["view"], float(r["percentile"]),
                     float(r["lambda"]), r["included"], levels))
    write_csv_rows(path, TRACE_COLUMNS, rows)


def read_csv_dicts(path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(directory, report: MetricsReport) -> None:
    directory = Path(directory)
    write_json(directory / "metrics.json", report.to_json_dict())
    cols = report.columns()
    rows = [(h, *(m[c] for c in cols)) for h, m in report.horizons.items()]
    write_csv_rows(directory / "metrics.csv", ("horizon", *cols), rows)


def read_metrics(path) -> dict[int, dict[str, float]]:
    raw = read_json(path)
    return {int(h): {k: float(v) for k, v in m.items()} for h, m in raw.items()}


def write_sim_reports(path, reports: list[SimReport]) -> None:
    header = ("scheduler", "mode", "f", "utilization_mean", "utilization_std", "iterations",
              "wasted_fraction", "throughput", "impurity", "empty_iterations")
    rows = [(r.scheduler, r.placement, r.hard_fraction, r.utilization_mean, r.utilization_std, r.iterations,
             r.wasted_fraction, r.throughput, r.impurity, r.empty_iterations) for r in reports]
    write_csv_rows(path, header, rows)


# ---------------------------------------------------------------- checkpoints


def _tensor_entry(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _tensor_from(name: str, entry: dict, shape=None) -> np.ndarray:
    data = np.asarray(entry["data"], dtype=np.float64)
    stored = tuple(entry["shape"])
    if data.size != int(np.prod(stored, dtype=np.int64)):
        raise ContractError(f"checkpoint tensor {name}: {data.size} values for shape {stored}")
    if shape is not None and stored != tuple(shape):
        raise ContractError(f"checkpoint tensor {name}: shape {stored}, model expects {tuple(shape)}")
    return data.reshape(stored)


def save_model(path, params: ModelParams) -> None:
    write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "model",
        "spec": dataclasses.asdict(params.spec),
        "tensors": {k: _tensor_entry(v) for k, v in params.tensors.items()},
    })


def _check_header(raw: dict, kind: str) -> None:
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise ContractError("not a checkpoint file")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {raw.get('version')}")
    if raw.get("kind") != kind:
        raise ContractError(f"checkpoint holds {raw.get('kind')!r}, expected {kind!r}")


def load_model(path) -> ModelParams:
    raw = read_json(path)
    _check_header(raw, "model")
    spec = ModelSpec(**raw["spec"])
    tensors = {name: _tensor_from(name, raw["tensors"][name], shape) for name, shape in spec.shapes().items()}
    return ModelParams(spec, tensors)


def save_fusion(path, params: FusionParams) -> None:
    write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "fusion",
        "tensors": {"W": _tensor_entry(params.W), "b": _tensor_entry(params.b)},
    })


def load_fusion(path) -> FusionParams:
    raw = read_json(path)
    _check_header(raw, "fusion")
    W = _tensor_from("W", raw["tensors"]["W"])
    b = _tensor_from("b", raw["tensors"]["b"], (W.shape[1],))
    return FusionParams(W, b)


def manifest(cfg: RunConfig, command: str, seeds, fingerprint: str | None, extra: dict | None = None) -> dict:
    out = {
        "command": command,
        "config": config_to_dict(cfg),
        "seeds": [int(s) for s in seeds],
        "dataset_sha256": fingerprint,
        "version": __version__,
    }
    out.update(extra or {})
    return out
