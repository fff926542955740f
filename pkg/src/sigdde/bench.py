"""Experiment matrix: cells, profiles, sweeps, results tables, timing and plots.

A *cell* is one (system, encoder, decoder, seed, sweep point) training run.
Plans expand into cells; cells run independently (optionally on worker
threads) and share only read-only datasets. Results rows come back in plan
order, so a results CSV depends on nothing but the plan.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetSplit, add_noise, generate_dataset
from .models import Checkpoint, DecoderConfig, EncoderConfig, Model
from .training import RunRecord, TrainConfig, TrainingError, prepare, train

RESULT_FIELDS = ["system", "encoder", "decoder", "depth", "window", "phi", "noise", "seq_len",
                 "coupling", "seed", "test_rmse", "val_rmse", "best_epoch", "epoch_seconds",
                 "config_hash", "error"]
TIMING_FIELDS = ["system", "encoder", "decoder", "seed", "epochs", "warmup", "mean_epoch_seconds",
                 "std_epoch_seconds", "test_rmse"]
STUDIES = ("depth", "phi", "noise", "seq_len", "coupling")
ENCODERS = {"sig": "signature", "signature": "signature", "gru": "gru", "point": "point"}
DECODERS = ("node", "anode", "flow")


@dataclass(frozen=True)
class Profile:
    name: str
    n_traj: int
    epochs: int
    seeds: tuple
    lr: float
    points: int = 200


PROFILES = {
    # at 200 trajectories an epoch is two Adam steps; 1e-3 leaves every encoder undertrained
    "desk": Profile("desk", n_traj=200, epochs=300, seeds=(0, 1, 2, 3, 4), lr=1e-2),
    "paper": Profile("paper", n_traj=1000, epochs=1000, seeds=(0, 1, 2, 3, 4), lr=1e-3),
}


def canonical_encoder(name: str) -> str:
    try:
        return ENCODERS[name]
    except KeyError:
        raise ValueError(f"unknown encoder {name!r}; valid: {', '.join(sorted(ENCODERS))}") from None


@dataclass(frozen=True)
class Cell:
    system: str
    encoder: str
    decoder: str
    seed: int
    depth: int = 3
    window: int = 40
    phi: bool = True
    noise: float = 0.0
    seq_len: int | None = None
    coupling: float | None = None
    n_traj: int = 200
    points: int = 200
    epochs: int = 300
    lr: float = 1e-2
    batch_size: int = 128
    data_seed: int | None = None   # split seed; defaults to the run seed

    def __post_init__(self):
        object.__setattr__(self, "encoder", canonical_encoder(self.encoder))
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; valid: {', '.join(DECODERS)}")
        if self.coupling is not None and self.system != "fitzhugh_nagumo_dde":
            raise ValueError("the coupling factor only exists for fitzhugh_nagumo_dde")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def split_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def dataset_key(self) -> tuple:
        return (self.system, self.n_traj, self.points, self.split_seed, self.coupling, self.noise)

    def build_model(self, dim: int) -> Model:
        enc = EncoderConfig(kind=self.encoder)
        if self.encoder == "signature":
            enc = EncoderConfig(kind="signature", depth=self.depth, window=self.window,
                                learned_features=4 if self.phi else 0)
        return Model(enc, DecoderConfig(kind=self.decoder), dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed, keep_n=self.seq_len)


@dataclass
class CellResult:
    cell: Cell
    record: RunRecord | None = None
    checkpoint: Checkpoint | None = None
    error: str | None = None

    def row(self, timing: bool = False) -> dict:
        c, r = self.cell, self.record
        ok = r is not None and self.error is None
        return {
            "system": c.system, "encoder": c.encoder, "decoder": c.decoder,
            "depth": c.depth if c.encoder == "signature" else "",
            "window": c.window if c.encoder == "signature" else "",
            "phi": ("on" if c.phi else "off") if c.encoder == "signature" else "",
            "noise": repr(float(c.noise)),
            "seq_len": "" if c.seq_len is None else c.seq_len,
            "coupling": "" if c.coupling is None else repr(float(c.coupling)),
            "seed": c.seed,
            "test_rmse": repr(float(r.test_rmse)) if ok else "",
            "val_rmse": repr(float(r.best_val_rmse)) if ok and r.best_epoch is not None else "",
            "best_epoch": r.best_epoch + 1 if ok and r.best_epoch is not None else "",
            # wall clock breaks byte-identical reruns, so it is opt-in
            "epoch_seconds": f"{np.mean(r.epoch_seconds):.6f}" if ok and timing and r.epoch_seconds else "",
            "config_hash": c.config_hash(),
            "error": self.error or "",
        }


class DatasetCache:
    """Thread-safe memo of generated datasets keyed by everything that shapes them."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()
        self._pending: dict = {}

    def get(self, cell: Cell) -> DatasetSplit:
        key = cell.dataset_key()
        with self._lock:
            if key in self._data:
                return self._data[key]
            event = self._pending.get(key)
            owner = event is None
            if owner:
                event = self._pending[key] = threading.Event()
        if not owner:
            event.wait()
            with self._lock:
                if key not in self._data:
                    raise RuntimeError(f"dataset {key} failed to build in another worker")
                return self._data[key]
        try:
            overrides = {"gamma": cell.coupling} if cell.coupling is not None else None
            ds = generate_dataset(cell.system, cell.n_traj, cell.points, cell.split_seed, overrides)
            if cell.noise > 0:
                add_noise(ds, cell.noise, cell.split_seed)
            with self._lock:
                self._data[key] = ds
            return ds
        finally:
            event.set()


def run_cell(cell: Cell, cache: DatasetCache | None = None, keep_checkpoint: bool = False) -> CellResult:
    """Train one cell; a failure is captured in the result instead of raised."""
    cache = cache or DatasetCache()
    try:
        ds = cache.get(cell)
        ckpt, record = train(cell.build_model(ds.dim), ds, cell.train_config())
    except (TrainingError, RuntimeError, ValueError, FloatingPointError) as exc:
        return CellResult(cell, error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
    return CellResult(cell, record, ckpt if keep_checkpoint else None)


@dataclass
class ExperimentPlan:
    system: str
    pairs: list
    seeds: list
    sweep: dict | None = None          # at most one study: {"depth": [1, 2, 3]}
    profile: Profile = PROFILES["desk"]
    out: Path | None = None
    data_seed: int | None = None
    epochs: int | None = None
    lr: float | None = None
    n_traj: int | None = None
    base: dict = field(default_factory=dict)   # fixed Cell fields outside the sweep

    def __post_init__(self):
        if self.sweep:
            if len(self.sweep) != 1:
                raise ValueError("a plan sweeps exactly one study")
            study = next(iter(self.sweep))
            if study not in STUDIES:
                raise ValueError(f"unknown study {study!r}; valid: {', '.join(STUDIES)}")
            if not self.sweep[study]:
                raise ValueError(f"study {study!r} has no values")

    @property
    def study(self) -> str | None:
        return next(iter(self.sweep)) if self.sweep else None

    def cells(self) -> list[Cell]:
        common = dict(n_traj=self.n_traj or self.profile.n_traj, points=self.profile.points,
                      epochs=self.profile.epochs if self.epochs is None else self.epochs,
                      lr=self.lr or self.profile.lr, data_seed=self.data_seed, **self.base)
        points = [{}] if not self.sweep else [{self.study: v} for v in self.sweep[self.study]]
        out = []
        for point in points:
            for enc, dec in self.pairs:
                for seed in self.seeds:
                    out.append(Cell(self.system, enc, dec, seed, **{**common, **point}))
        return out


def run_plan(plan: ExperimentPlan | list, threads: int = 1, cache: DatasetCache | None = None,
             log=None, keep_checkpoints: bool = False) -> list[CellResult]:
    """Run every cell of a plan (or an explicit cell list), results in plan order."""
    cells = plan.cells() if isinstance(plan, ExperimentPlan) else list(plan)
    cache = cache or DatasetCache()

    def job(cell):
        res = run_cell(cell, cache, keep_checkpoints)
        if log is not None:
            log(res)
        return res

    if threads <= 1:
        return [job(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, cells))


def results_csv(results: list[CellResult], path=None, timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row(timing))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: list[dict], by: tuple = ("system", "encoder", "decoder", "depth", "phi", "noise",
                                            "seq_len", "coupling")) -> list[dict]:
    """Mean, std and median test RMSE per group; failed cells are counted separately."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in by), []).append(row)
    out = []
    for key, members in groups.items():
        vals = np.array([float(m["test_rmse"]) for m in members if m["test_rmse"] != ""])
        if len(vals) == 1:
            warnings.warn(f"group {dict(zip(by, key))} has a single seed; std reported as 0")
        out.append({**dict(zip(by, key)), "n": len(vals), "failed": len(members) - len(vals),
                    "mean": float(vals.mean()) if len(vals) else math.nan,
                    "std": float(vals.std()) if len(vals) else math.nan,
                    "median": float(np.median(vals)) if len(vals) else math.nan})
    return out


def format_summary(summary: list[dict], by: tuple) -> str:
    lines = []
    for s in summary:
        label = " ".join(f"{k}={s[k]}" for k in by if s[k] != "")
        fail = f" ({s['failed']} failed)" if s["failed"] else ""
        lines.append(f"{label}: {s['mean']:.4f} ± {s['std']:.4f} over {s['n']} seeds{fail}")
    return "\n".join(lines)


def parse_values(study: str, text: str | None) -> list:
    if study == "phi":
        if text is None:
            return [True, False]
        return [v.strip().lower() in ("on", "1", "true", "yes") for v in text.split(",")]
    if text is None:
        defaults = {"depth": [1, 2, 3], "noise": [0.0, 0.02, 0.05, 0.1], "seq_len": [100, 50, 25]}
        if study not in defaults:
            raise ValueError(f"study {study!r} needs explicit --values")
        return defaults[study]
    cast = int if study in ("depth", "seq_len") else float
    return [cast(v) for v in text.split(",") if v.strip()]


# -- timing --------------------------------------------------------------------

def bench_timing(ds: DatasetSplit, encoders=("signature", "gru"), decoder: str = "flow",
                 epochs: int = 20, warmup: int = 3, seed: int = 0, lr: float = 1e-3,
                 batch_size: int = 128) -> list[dict]:
    """Mean epoch wall time per encoder over ``epochs`` measured epochs after ``warmup``."""
    if epochs < 5:
        raise ValueError(f"need at least 5 measured epochs, got {epochs}")
    rows = []
    for enc in encoders:
        cell = Cell(ds.system, enc, decoder, seed, epochs=warmup + epochs, lr=lr,
                    batch_size=batch_size)
        ckpt, rec = train(cell.build_model(ds.dim), ds, cell.train_config())
        sec = np.array(rec.epoch_seconds[warmup:])
        rows.append({"system": ds.system, "encoder": cell.encoder, "decoder": decoder, "seed": seed,
                     "epochs": epochs, "warmup": warmup, "mean_epoch_seconds": f"{sec.mean():.6f}",
                     "std_epoch_seconds": f"{sec.std():.6f}", "test_rmse": repr(float(rec.test_rmse))})
    return rows


def write_rows(rows: list[dict], fields: list, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# -- plots ---------------------------------------------------------------------

def _with_data_comment(svg: str, payload: dict) -> str:
    comment = "<!-- plot-data\n" + json.dumps(payload, indent=1).replace("--", "- -") + "\n-->\n"
    head, sep, rest = svg.partition("?>")
    return head + sep + "\n" + comment + rest.lstrip("\n") if sep else comment + svg


def embedded_data(path) -> dict:
    """Recover the data table embedded in an SVG written by this module."""
    text = Path(path).read_text()
    start = text.index("<!-- plot-data\n") + len("<!-- plot-data\n")
    return json.loads(text[start:text.index("\n-->", start)])


def _save_svg(fig, path, payload):
    import matplotlib.pyplot as plt

    buf = io.StringIO()
    # fixed salt keeps clip-path ids, and so the file bytes, stable across runs
    with plt.rc_context({"svg.hashsalt": "sigdde"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    Path(path).write_text(_with_data_comment(buf.getvalue(), payload))
    return Path(path)


def plot_loss_curves(groups: dict, path) -> Path:
    """Log-scale training loss, mean over seeds with a min-max band per group.

    ``groups`` maps a label to a list of per-seed loss sequences. Empty groups
    are skipped with a warning; at least one group must remain.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kept = {}
    for label, runs in groups.items():
        runs = [np.asarray(r, dtype=float) for r in runs if len(r)]
        if not runs:
            warnings.warn(f"run group {label!r} is empty; skipped")
            continue
        n = min(len(r) for r in runs)
        kept[label] = np.stack([r[:n] for r in runs])
    if not kept:
        raise ValueError("no non-empty run group to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    payload = {"kind": "loss", "groups": {}}
    for label, arr in kept.items():
        ep = np.arange(1, arr.shape[1] + 1)
        mean, lo, hi = arr.mean(0), arr.min(0), arr.max(0)
        ax.plot(ep, mean, label=f"{label} (n={arr.shape[0]})")
        ax.fill_between(ep, lo, hi, alpha=0.25)
        payload["groups"][label] = {"mean": mean.tolist(), "min": lo.tolist(), "max": hi.tolist(),
                                    "seeds": arr.shape[0]}
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    return _save_svg(fig, path, payload)


def plot_trajectory(times, truth, pred_times, pred, path, labels=None) -> Path:
    """Per-channel overlay: ground truth on the whole window, prediction on the second half."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    truth, pred = np.asarray(truth), np.asarray(pred)
    d = truth.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(6, 2.2 * d), sharex=True, squeeze=False)
    for c in range(d):
        ax = axes[c, 0]
        ax.plot(times, truth[:, c], color="k", lw=1.2, label="ground truth")
        ax.plot(pred_times, pred[:, c], color="tab:red", ls="--", lw=1.2, label="prediction")
        ax.set_ylabel(labels[c] if labels else f"x{c + 1}")
    axes[0, 0].legend(loc="best")
    axes[-1, 0].set_xlabel("t")
    payload = {"kind": "trajectory", "times": np.asarray(times).tolist(), "truth": truth.tolist(),
               "pred_times": np.asarray(pred_times).tolist(), "pred": pred.tolist()}
    return _save_svg(fig, path, payload)


def trajectory_prediction(ckpt: Checkpoint, ds: DatasetSplit, index: int = 0, part: str = "test"):
    """Denormalized (times, truth, query times, prediction) for one trajectory of a split part."""
    arr = prepare(ds, part, ckpt.metadata.get("train_config", {}).get("encode_fraction", 0.5),
                  ckpt.metadata.get("train_config", {}).get("keep_n"))
    if not 0 <= index < len(arr.enc_values):
        raise IndexError(f"trajectory index {index} outside the {len(arr.enc_values)}-trajectory {part} part")
    pred = ckpt.model.predict(ckpt.params, arr.enc_values[index:index + 1], arr.enc_times,
                              arr.query_times)[0]
    traj = ds.indices(part)[index]
    k = ds.n_points - len(arr.query_times)
    return ds.times, ds.values[traj], ds.times[k:], ds.denormalize(pred)
