import json

import numpy as np
import pytest

from sigdde.data import (DatasetError, add_noise, corrupt, dataset_hash, endpoint_indices, generate_dataset,
                         lattice, load_dataset, save_dataset, split_indices, subsample_indices)
from sigdde.dde import TimeSeries


@pytest.fixture(scope="module")
def spiral():
    return generate_dataset("spiral_dde", 40, 50, seed=3)


def test_split_proportions_for_1000():
    train, val, test = split_indices(1000, 5)
    assert (len(train), len(val), len(test)) == (800, 100, 100)
    assert len(np.union1d(np.union1d(train, val), test)) == 1000


@pytest.mark.parametrize("n", [10, 37, 200, 999])
def test_split_within_one_of_ratio(n):
    parts = split_indices(n, 0)
    for part, frac in zip(parts, (0.8, 0.1, 0.1)):
        assert abs(len(part) - frac * n) <= 1
    assert sum(map(len, parts)) == n


def test_normalized_train_is_standard(spiral):
    z = spiral.normalize(spiral.values[spiral.train]).reshape(-1, spiral.dim)
    assert np.all(np.abs(z.mean(0)) < 1e-9)
    assert np.all(np.abs(z.std(0) - 1) < 1e-9)


def test_shapes_and_window(spiral):
    assert spiral.values.shape == (40, 50, 2)
    # (0, 20] at 1000 solver points, stride 20
    assert np.isclose(spiral.times[0], 0.02) and np.isclose(spiral.times[-1], 19.62)
    assert len(spiral.train_series) == 32 and spiral.test_series[0].values.shape == (50, 2)


def test_window_start_kept_for_lotka_volterra():
    ds = generate_dataset("lotka_volterra_dde", 10, 200, seed=0)
    assert ds.times[0] == 2.0
    # stride 5 over 1000 solver points
    assert np.isclose(ds.times[1] - ds.times[0], 5 * 28 / 999)


def test_deterministic(spiral):
    again = generate_dataset("spiral_dde", 40, 50, seed=3)
    assert np.array_equal(again.values, spiral.values)
    assert np.array_equal(again.train, spiral.train)


def test_lattice_row_major():
    pts = lattice(5, (0.0, 1.0), 2)
    assert pts.tolist() == [[0, 0], [0, 0.5], [0, 1], [0.5, 0], [0.5, 0.5]]
    assert lattice(1000, (0.1, 1.5), 3).shape == (1000, 3)
    assert len(np.unique(lattice(1000, (-2, 2), 2)[:, 0])) == 32


def test_subsample_stride():
    assert np.array_equal(subsample_indices(1000, 200), np.arange(0, 1000, 5))
    idx = endpoint_indices(100, 50)
    assert len(idx) == 50 and idx[0] == 0 and idx[-1] == 99 and np.all(np.diff(idx) > 0)


def test_too_few_trajectories():
    with pytest.raises(ValueError):
        generate_dataset("spiral_dde", 5)


def test_corrupt_identity():
    s = TimeSeries(np.linspace(0, 1, 20), np.random.default_rng(0).normal(size=(20, 2)))
    out = corrupt(s, 0.0)
    assert np.array_equal(out.values, s.values) and np.array_equal(out.times, s.times)


def test_corrupt_noise_level():
    s = TimeSeries(np.linspace(0, 1, 200), np.zeros((200, 3)))
    inside = []
    for seed in range(20):
        diff = corrupt(s, 0.1, seed=seed).values - s.values
        inside.append(np.abs(diff.std(axis=0) - 0.1) < 0.01)
    # 200-sample std has ~5% relative spread; nearly every channel lands within 10%
    assert np.mean(inside) >= 0.9


def test_corrupt_thins_encoding_half_only():
    s = TimeSeries(np.arange(200.0), np.zeros((200, 2)))
    out = corrupt(s, 0.0, keep_n=50)
    assert len(out) == 150
    enc = out.times[:50]
    assert enc[0] == 0.0 and enc[-1] == 99.0
    assert np.array_equal(out.times[50:], np.arange(100.0, 200.0))


def test_corrupt_rejects_bad_arguments():
    s = TimeSeries(np.arange(10.0), np.zeros((10, 1)))
    with pytest.raises(ValueError):
        corrupt(s, -0.1)
    with pytest.raises(ValueError):
        corrupt(s, 0.0, keep_n=8)


def test_round_trip(tmp_path, spiral):
    add_noise(spiral, 0.05, seed=9)
    save_dataset(spiral, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.values, spiral.values)
    assert np.array_equal(back.noisy, spiral.noisy)
    assert np.array_equal(back.times, spiral.times)
    assert np.array_equal(back.norm_std, spiral.norm_std)
    assert back.params == spiral.params and back.noise_std == 0.05
    for part in ("train", "val", "test"):
        assert np.array_equal(back.indices(part), spiral.indices(part))


def test_binary_layout(tmp_path):
    ds = generate_dataset("rossler_dde", 10, 20, seed=1)
    save_dataset(ds, tmp_path / "r")
    raw = np.fromfile(tmp_path / "r" / "data.bin", dtype="<f8").reshape(10, 20 + 60)
    assert np.array_equal(raw[3, :20], ds.times)
    assert np.array_equal(raw[3, 20:].reshape(20, 3), ds.values[3])
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["params"] == {"tau": 2.5, "a": 0.2, "b": 0.2, "c": 4.5}


def test_datasets_are_immutable(tmp_path, spiral):
    save_dataset(spiral, tmp_path / "d")
    h = dataset_hash(tmp_path / "d")
    with pytest.raises(DatasetError, match="immutable"):
        save_dataset(spiral, tmp_path / "d")
    assert dataset_hash(tmp_path / "d") == h


def test_tampering_detected(tmp_path, spiral):
    save_dataset(spiral, tmp_path / "d")
    blob = bytearray((tmp_path / "d" / "data.bin").read_bytes())
    blob[100] ^= 1
    (tmp_path / "d" / "data.bin").write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="hash"):
        load_dataset(tmp_path / "d")
