"""Objectives, Adam, and the encode-first-half / predict-second-half protocol."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, endpoint_indices
from .dde import TimeSeries
from .models import Checkpoint, Model, renormalize_flow


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 1000
    seed: int = 0
    objective: str = "mse"
    encode_fraction: float = 0.5
    clip_norm: float | None = 10.0
    keep_n: int | None = None

    def __post_init__(self):
        if not 0 < self.encode_fraction < 1:
            raise ValueError(f"encode_fraction must be in (0, 1), got {self.encode_fraction}")
        if self.objective not in ("mse", "elbo"):
            raise ValueError(f"objective must be 'mse' or 'elbo', got {self.objective!r}")


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int | None = None
    test_rmse: float | None = None

    @property
    def best_val_rmse(self):
        return None if self.best_epoch is None else self.val_rmse[self.best_epoch]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rmse", "epoch_seconds"])
        for i, (lo, va, sec) in enumerate(zip(self.train_loss, self.val_rmse, self.epoch_seconds)):
            w.writerow([i + 1, repr(lo), repr(va), f"{sec:.6f}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "epochs": len(self.train_loss),
            "best_epoch": None if self.best_epoch is None else self.best_epoch + 1,
            "best_val_rmse": self.best_val_rmse,
            "test_rmse": self.test_rmse,
            "mean_epoch_seconds": float(np.mean(self.epoch_seconds)) if self.epoch_seconds else None,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.summary(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# -- protocol ------------------------------------------------------------------

@dataclass
class Split:
    encode: TimeSeries
    predict: TimeSeries

    @property
    def anchor(self) -> float:
        return float(self.encode.times[-1])

    @property
    def query_times(self) -> np.ndarray:
        """Prediction times relative to the end of the encoding part."""
        return self.predict.times - self.anchor


def split_trajectory(series: TimeSeries, fraction: float = 0.5) -> Split:
    """First ``ceil(fraction * n)`` points encode, the rest are predicted."""
    n = len(series)
    if n < 4:
        raise ValueError(f"need at least 4 points to split, got {n}")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    k = math.ceil(fraction * n)
    return Split(TimeSeries(series.times[:k], series.values[:k]),
                 TimeSeries(series.times[k:], series.values[k:]))


def mse_loss(pred, target) -> Tensor:
    """Mean over time points and channels of the squared error."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    return ad.mean(ad.square(ad.sub(pred, target)))


@dataclass
class Arrays:
    """Model-ready arrays for one split part, all in normalized units."""

    enc_values: np.ndarray   # (K, n_enc, d), possibly corrupted / thinned
    enc_times: np.ndarray    # (n_enc,), first encoding sample at 0
    query_times: np.ndarray  # (n_pred,), end of encoding at 0
    targets: np.ndarray      # (K, n_pred, d)


def prepare(ds: DatasetSplit, part: str, fraction: float = 0.5, keep_n: int | None = None,
            noisy_targets: bool | None = None) -> Arrays:
    """Slice one split part into encoder inputs, query times and targets.

    The encoder sees the corrupted copy when the dataset carries one; targets
    are corrupted only for the training part unless ``noisy_targets`` says
    otherwise.
    """
    idx = ds.indices(part)
    n = ds.n_points
    if n < 4:
        raise ValueError(f"need at least 4 points to split, got {n}")
    k = math.ceil(fraction * n)
    clean = ds.normalize(ds.values[idx])
    inputs = ds.normalize(ds.noisy[idx]) if ds.noisy is not None else clean
    if noisy_targets is None:
        noisy_targets = part == "train"
    targets = inputs if noisy_targets else clean
    times = ds.times - ds.times[0]
    enc_idx = np.arange(k) if keep_n is None else endpoint_indices(k, keep_n)
    return Arrays(
        enc_values=np.ascontiguousarray(inputs[:, enc_idx]),
        enc_times=times[enc_idx],
        query_times=times[k:] - times[k - 1],
        targets=np.ascontiguousarray(targets[:, k:]),
    )


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_m[name], new_v[name] = m, v
        if lr == 0.0:
            new_p[name] = p.copy()
        else:
            new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_p, AdamState(t, new_m, new_v)


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


# -- training ------------------------------------------------------------------

def batch_loss(model: Model, P: dict, arr: Arrays, rows: np.ndarray, objective: str,
               noise=None) -> Tensor:
    pred, kl = model.forward(P, arr.enc_values[rows], arr.enc_times, arr.query_times, noise=noise)
    mse = mse_loss(pred, arr.targets[rows])
    if objective == "mse" or kl is None:
        return mse
    # unit-variance Gaussian likelihood: 0.5 * MSE, KL scaled to the same per-entry units
    per_entry = 1.0 / (pred.shape[1] * pred.shape[2])
    return ad.add(ad.scale(mse, 0.5), ad.scale(ad.mean(kl), per_entry))


def loss_and_grads(model: Model, params: dict, arr: Arrays, rows, objective="mse", noise=None):
    tape = ad.Tape()
    P = {k: tape.variable(v) for k, v in params.items()}
    loss = batch_loss(model, P, arr, rows, objective, noise)
    g = ad.backward(tape, loss)
    return float(loss.data), {k: g.of(P[k]) for k in P}


def predict_arrays(model: Model, params: dict, arr: Arrays, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(arr.enc_values), batch_size):
        out.append(model.predict(params, arr.enc_values[lo:lo + batch_size], arr.enc_times, arr.query_times))
    return np.concatenate(out, axis=0)


def rmse_arrays(pred: np.ndarray, target: np.ndarray, per_trajectory: bool = False) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    sq = (pred - target) ** 2
    if per_trajectory:
        return float(np.mean(np.sqrt(sq.reshape(len(sq), -1).mean(axis=1))))
    return float(np.sqrt(sq.mean()))


def _noise_for(model, tc, epoch, batch, rows):
    if not model.enc.variational:
        return None
    rng = np.random.default_rng([tc.seed, 2, epoch, batch])
    return rng.standard_normal((len(rows), model.latent_dim))


def train(model: Model, ds: DatasetSplit, tc: TrainConfig, log=None) -> tuple[Checkpoint, RunRecord]:
    """Mini-batch Adam on the training part; keeps the parameters of the best validation epoch.

    Deterministic for a fixed ``tc.seed``: initialization, per-epoch shuffles and
    variational noise all draw from streams keyed on the seed.
    """
    if ds.dim != model.data_dim:
        raise ValueError(f"model expects {model.data_dim}-dimensional data, dataset has {ds.dim}")
    train_arr = prepare(ds, "train", tc.encode_fraction, tc.keep_n)
    val_arr = prepare(ds, "val", tc.encode_fraction, tc.keep_n)
    params = model.init_params(np.random.default_rng([tc.seed, 0]))
    state = AdamState()
    record = RunRecord()
    best = {k: v.copy() for k, v in params.items()}
    best_val = math.inf
    n_train = len(train_arr.enc_values)

    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, 1, epoch]).permutation(n_train)
        losses, weights = [], []
        for b, lo in enumerate(range(0, n_train, tc.batch_size)):
            rows = order[lo:lo + tc.batch_size]
            noise = _noise_for(model, tc, epoch, b, rows)
            loss, grads = loss_and_grads(model, params, train_arr, rows, tc.objective, noise)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1} (lr={tc.lr})"
                )
            if tc.clip_norm is not None:
                grads, _ = clip_by_global_norm(grads, tc.clip_norm)
            params, state = adam_step(params, grads, state, tc.lr)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingError(
                    f"non-finite parameters after epoch {epoch + 1}, batch {b + 1} (lr={tc.lr})"
                )
            if model.dec.kind == "flow":
                renormalize_flow(model, params)
            losses.append(loss)
            weights.append(len(rows))
        val = rmse_arrays(predict_arrays(model, params, val_arr), val_arr.targets)
        record.epoch_seconds.append(time.perf_counter() - t0)
        record.train_loss.append(float(np.average(losses, weights=weights)))
        record.val_rmse.append(val)
        if val < best_val:
            best_val = val
            best = {k: v.copy() for k, v in params.items()}
            record.best_epoch = epoch
        if log is not None:
            log(epoch + 1, record.train_loss[-1], val)

    meta = {
        "seed": tc.seed,
        "epochs": tc.epochs,
        "best_epoch": None if record.best_epoch is None else record.best_epoch + 1,
        "best_val_rmse": record.best_val_rmse,
        "train_config": asdict(tc),
        "dataset": {"system": ds.system, "seed": ds.seed, "n_trajectories": len(ds),
                    "noise_std": ds.noise_std},
    }
    ckpt = Checkpoint(model, best if tc.epochs > 0 else params, meta)
    record.test_rmse = evaluate_rmse(ckpt, ds, "test")
    return ckpt, record


def evaluate_rmse(ckpt: Checkpoint, ds: DatasetSplit, part: str = "test", denormalize: bool = False,
                  per_trajectory: bool = False, fraction: float | None = None,
                  keep_n: int | None = None) -> float:
    """RMSE on the prediction halves of one split part, pooled over all points by default."""
    if ckpt.model.data_dim != ds.dim:
        raise ValueError(f"checkpoint expects {ckpt.model.data_dim}-dimensional data, dataset has {ds.dim}")
    tc = ckpt.metadata.get("train_config", {})
    fraction = fraction if fraction is not None else tc.get("encode_fraction", 0.5)
    keep_n = keep_n if keep_n is not None else tc.get("keep_n")
    arr = prepare(ds, part, fraction, keep_n)
    pred = predict_arrays(ckpt.model, ckpt.params, arr)
    target = arr.targets
    if denormalize:
        pred, target = ds.denormalize(pred), ds.denormalize(target)
    return rmse_arrays(pred, target, per_trajectory)
