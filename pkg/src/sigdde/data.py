"""Trajectory datasets for the benchmark systems.

A dataset holds every trajectory on one shared time grid, an 80:10:10 split
drawn from the seed, and per-channel normalization statistics computed on the
training part only. On disk it is a directory with ``manifest.json`` and
``data.bin`` (little-endian float64; per trajectory ``n`` timestamps followed
by the ``n x d`` values, trajectories in manifest order).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dde import WINDOWS, TimeSeries, integrate, make_system, system_params

FORMAT_VERSION = 1
SOLVER_POINTS = 1000


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetSplit:
    system: str
    params: dict
    seed: int
    times: np.ndarray          # (n,) raw solver times, shared by all trajectories
    values: np.ndarray         # (K, n, d) raw values
    train: np.ndarray          # trajectory indices
    val: np.ndarray
    test: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    initial_conditions: np.ndarray | None = None
    noisy: np.ndarray | None = None   # corrupted copy of ``values``
    noise_std: float = 0.0
    noise_seed: int | None = None
    notes: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def n_points(self) -> int:
        return len(self.times)

    def __len__(self):
        return self.values.shape[0]

    def normalize(self, values):
        return (np.asarray(values) - self.norm_mean) / self.norm_std

    def denormalize(self, values):
        return np.asarray(values) * self.norm_std + self.norm_mean

    def series(self, part: str, noisy: bool = False) -> list[TimeSeries]:
        src = self.noisy if noisy and self.noisy is not None else self.values
        return [TimeSeries(self.times, src[i]) for i in self.indices(part)]

    def indices(self, part: str) -> np.ndarray:
        if part not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {part!r}")
        return getattr(self, part)

    # per-part lists of series
    @property
    def train_series(self):
        return self.series("train")

    @property
    def val_series(self):
        return self.series("val")

    @property
    def test_series(self):
        return self.series("test")


def lattice(n: int, box: tuple[float, float], dim: int) -> np.ndarray:
    """First ``n`` points (row-major) of the smallest uniform lattice with >= ``n`` nodes."""
    per_axis = max(1, math.ceil(round(n ** (1.0 / dim), 12)))
    while per_axis ** dim < n:
        per_axis += 1
    axis = np.linspace(box[0], box[1], per_axis)
    pts = np.array(list(itertools.product(axis, repeat=dim)))
    return pts[:n]


def subsample_indices(n: int, keep: int) -> np.ndarray:
    """Uniformly spaced indices; exact stride when ``keep`` divides ``n``."""
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} points")
    return (np.arange(keep) * n) // keep


def endpoint_indices(n: int, keep: int) -> np.ndarray:
    """Uniformly spaced indices that always include the first and last point."""
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} points")
    if keep == 1:
        return np.array([n - 1])
    return np.round(np.linspace(0, n - 1, keep)).astype(int)


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def simulate(name: str, n_traj: int, points: int, overrides: dict | None = None,
             solver_points: int = SOLVER_POINTS):
    """Solve ``n_traj`` trajectories from the lattice of initial conditions.

    Returns ``(times, values, initial_conditions, dropped)`` where ``dropped``
    lists the lattice indices whose solution blew up.
    """
    spec = make_system(name, overrides)
    (t0, t1), box, keep_start = WINDOWS[name]
    ics = lattice(n_traj, box, spec.dim)
    if keep_start:
        step = (t1 - t0) / (solver_points - 1)
    else:
        # window (t0, t1]: solve from t0 and discard the initial sample
        step = (t1 - t0) / solver_points
    sols = integrate(spec, ics, t0, t1, step)
    dropped = [i for i, s in enumerate(sols) if s is None]
    if len(dropped) > 0.01 * n_traj:
        raise DatasetError(
            f"{name}: solver blew up on {len(dropped)}/{n_traj} trajectories, "
            f"initial conditions {ics[dropped[:10]].tolist()}"
        )
    kept = [i for i in range(n_traj) if sols[i] is not None]
    times = sols[kept[0]].times
    values = np.stack([sols[i].values for i in kept])
    if not keep_start:
        times, values = times[1:], values[:, 1:]
    idx = subsample_indices(len(times), points)
    return times[idx], values[:, idx], ics[kept], dropped


def generate_dataset(name: str, n_traj: int = 1000, points: int = 200, seed: int = 0,
                     overrides: dict | None = None) -> DatasetSplit:
    """Simulate, subsample, split 80:10:10 and normalize from the training part."""
    if n_traj < 10:
        raise ValueError(f"need at least 10 trajectories, got {n_traj}")
    spec = make_system(name, overrides)
    times, values, ics, dropped = simulate(name, n_traj, points, overrides)
    train, val, test = split_indices(len(values), seed)
    flat = values[train].reshape(-1, values.shape[-1])
    mean, std = flat.mean(axis=0), flat.std(axis=0)
    (t0, t1), box, keep_start = WINDOWS[name]
    notes = {
        "time_window": [t0, t1],
        "window_includes_start": keep_start,
        "ic_box": list(box),
        "solver_points": SOLVER_POINTS,
        "dropped_initial_conditions": dropped,
        "prehistory": "constant, equal to the initial condition",
    }
    return DatasetSplit(name, system_params(spec), seed, times, values, train, val, test,
                        mean, std, ics, notes=notes)


def corrupt(series: TimeSeries, noise_std: float, keep_n: int | None = None, seed: int = 0,
            encode_fraction: float = 0.5) -> TimeSeries:
    """Add i.i.d. Gaussian noise and optionally thin the encoding part.

    The encoding part (first ``ceil(encode_fraction * n)`` points) is reduced
    to ``keep_n`` uniformly spaced points with both endpoints kept; the
    prediction part is never thinned.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    values = series.values
    if noise_std > 0:
        values = values + noise_std * np.random.default_rng(seed).standard_normal(values.shape)
    times = series.times
    if keep_n is not None:
        n_enc = math.ceil(encode_fraction * len(times))
        if keep_n > n_enc:
            raise ValueError(f"keep_n={keep_n} exceeds the {n_enc}-point encoding part")
        idx = np.concatenate([endpoint_indices(n_enc, keep_n), np.arange(n_enc, len(times))])
        times, values = times[idx], values[idx]
    return TimeSeries(times.copy(), np.array(values))


def add_noise(ds: DatasetSplit, noise_std: float, seed: int) -> DatasetSplit:
    """Attach a corrupted copy; trajectory ``i`` uses the RNG stream ``(seed, i)``."""
    noisy = np.empty_like(ds.values)
    for i in range(len(ds)):
        noisy[i] = corrupt(TimeSeries(ds.times, ds.values[i]), noise_std,
                           seed=_stream(seed, i)).values
    ds.noisy, ds.noise_std, ds.noise_seed = noisy, float(noise_std), int(seed)
    return ds


def _stream(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- persistence ---------------------------------------------------------------

def _pack(times, values) -> bytes:
    n, d = values.shape[1:]
    rec = np.empty((values.shape[0], n + n * d), dtype="<f8")
    rec[:, :n] = times
    rec[:, n:] = values.reshape(values.shape[0], -1)
    return rec.tobytes()


def _unpack(buf: bytes, k: int, n: int, d: int):
    rec = np.frombuffer(buf, dtype="<f8").reshape(k, n + n * d)
    return rec[0, :n].astype(np.float64), rec[:, n:].reshape(k, n, d).astype(np.float64)


def save_dataset(ds: DatasetSplit, directory) -> Path:
    """Write the dataset directory; refuses to overwrite an existing one."""
    out = Path(directory)
    if (out / "manifest.json").exists():
        raise DatasetError(f"{out} already holds a dataset; datasets are immutable")
    out.mkdir(parents=True, exist_ok=True)
    blob = _pack(ds.times, ds.values)
    (out / "data.bin").write_bytes(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "system": ds.system,
        "params": ds.params,
        "seed": ds.seed,
        "n_trajectories": len(ds),
        "n_points": ds.n_points,
        "dim": ds.dim,
        "split": {"train": ds.train.tolist(), "val": ds.val.tolist(), "test": ds.test.tolist()},
        "norm_mean": ds.norm_mean.tolist(),
        "norm_std": ds.norm_std.tolist(),
        "initial_conditions": None if ds.initial_conditions is None else ds.initial_conditions.tolist(),
        "notes": ds.notes,
        "files": {"data.bin": hashlib.sha256(blob).hexdigest()},
    }
    if ds.noisy is not None:
        noisy = _pack(ds.times, ds.noisy)
        (out / "data_noisy.bin").write_bytes(noisy)
        manifest["noise"] = {"std": ds.noise_std, "seed": ds.noise_seed, "file": "data_noisy.bin"}
        manifest["files"]["data_noisy.bin"] = hashlib.sha256(noisy).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dataset(directory, verify: bool = True) -> DatasetSplit:
    src = Path(directory)
    path = src / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no dataset manifest at {path}")
    m = json.loads(path.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {m.get('format_version')}")
    k, n, d = m["n_trajectories"], m["n_points"], m["dim"]

    def read(name):
        blob = (src / name).read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != m["files"][name]:
            raise DatasetError(f"{src / name} does not match the hash recorded at creation")
        return _unpack(blob, k, n, d)

    times, values = read("data.bin")
    ds = DatasetSplit(
        system=m["system"], params=m["params"], seed=m["seed"], times=times, values=values,
        train=np.array(m["split"]["train"], dtype=int), val=np.array(m["split"]["val"], dtype=int),
        test=np.array(m["split"]["test"], dtype=int),
        norm_mean=np.array(m["norm_mean"]), norm_std=np.array(m["norm_std"]),
        initial_conditions=None if m["initial_conditions"] is None else np.array(m["initial_conditions"]),
        notes=m.get("notes", {}),
    )
    if "noise" in m:
        _, ds.noisy = read(m["noise"]["file"])
        ds.noise_std, ds.noise_seed = m["noise"]["std"], m["noise"]["seed"]
    return ds


def dataset_hash(directory) -> str:
    """Hash of the manifest and every data file, used to detect mutation."""
    src = Path(directory)
    h = hashlib.sha256()
    for name in sorted(p.name for p in src.iterdir() if p.is_file()):
        h.update(name.encode())
        h.update((src / name).read_bytes())
    return h.hexdigest()
