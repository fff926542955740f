# %% [markdown]
# # Signature encoder against a GRU encoder
#
# Both encoders read the first half of a trajectory and emit a latent state.
# A contractive neural flow then extrapolates the second half. This is a
# reduced run (60 trajectories, 60 epochs) so it finishes in about a minute;
# the `sigdde ablate` command runs the full desk-scale comparison.

# %%
from pathlib import Path

import numpy as np

from sigdde import bench
from sigdde.training import evaluate_rmse

out = Path("notebook_output")
out.mkdir(exist_ok=True)

# %%
cells = [bench.Cell("spiral_dde", enc, "flow", seed=0, n_traj=60, epochs=60) for enc in ("sig", "gru")]
results = bench.run_plan(cells, keep_checkpoints=True)
for r in results:
    enc = r.cell.encoder
    n_params = r.checkpoint.model.param_count("enc")
    print(f"{enc:9s} encoder params {n_params:5d}  test rmse {r.record.test_rmse:.4f}  "
          f"best epoch {r.record.best_epoch + 1}")

# %% [markdown]
# Training curves, mean with min-max band (one seed here, so the band is flat).

# %%
bench.plot_loss_curves({r.cell.encoder: [r.record.train_loss] for r in results}, out / "loss.svg")

# %% [markdown]
# Extrapolation of one held-out trajectory, back in raw units.

# %%
sig = results[0]
times, truth, qt, pred = bench.trajectory_prediction(sig.checkpoint, bench.DatasetCache().get(sig.cell), 0)
bench.plot_trajectory(times, truth, qt, pred, out / "trajectory.svg")
print("raw-unit test rmse", evaluate_rmse(sig.checkpoint, bench.DatasetCache().get(sig.cell), denormalize=True))

# %% [markdown]
# The figures embed their data, so numbers can be read back without rerunning.

# %%
print(np.round(bench.embedded_data(out / "loss.svg")["groups"]["signature"]["mean"][:5], 4))
