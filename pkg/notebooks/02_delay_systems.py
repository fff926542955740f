# %% [markdown]
# # Four delay systems
#
# Each benchmark system is a delay differential equation: the right-hand side
# looks back a fixed time tau. The solver is a fourth-order Runge-Kutta
# method of steps with Hermite interpolation of the stored history.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sigdde.dde import SYSTEMS, WINDOWS, integrate, make_system
from sigdde.data import generate_dataset

out = Path("notebook_output")
out.mkdir(exist_ok=True)

# %% [markdown]
# One trajectory per system, from the middle of its initial-condition box.

# %%
fig, axes = plt.subplots(1, 4, figsize=(14, 3))
for ax, name in zip(axes, SYSTEMS):
    spec = make_system(name)
    (t0, t1), box, _ = WINDOWS[name]
    x0 = np.full(spec.dim, 0.5 * (box[0] + box[1]) + 0.1)
    sol = integrate(spec, x0, t0, t1, (t1 - t0) / 999)
    ax.plot(sol.values[:, 0], sol.values[:, 1], lw=0.8)
    ax.set_title(f"{name} (tau={spec.delay})", fontsize=9)
fig.tight_layout()
fig.savefig(out / "phase_portraits.png", dpi=120)
print("wrote", out / "phase_portraits.png")

# %% [markdown]
# Halving the step should cut the error by about 2^4 once the solution has
# smoothed out (derivative jumps at multiples of tau fade after two delays).

# %%
spec = make_system("rossler_dde")
x0 = np.array([0.5, 0.6, 0.7])
ref = integrate(spec, x0, 2.0, 30.0, 0.05 / 8)
errs = []
for k in (1, 2):
    sol = integrate(spec, x0, 2.0, 30.0, 0.05 / k)
    late = sol.times >= 2.0 + 2 * spec.delay
    errs.append(np.abs(sol.values[late] - ref.values[:: 8 // k][late]).max())
print(f"rossler errors {errs[0]:.2e} -> {errs[1]:.2e}, observed order {np.log2(errs[0] / errs[1]):.2f}")

# %% [markdown]
# Datasets are lattices of initial conditions, solved on 1000 points,
# subsampled and split 80/10/10. Normalisation uses training statistics only.

# %%
ds = generate_dataset("spiral_dde", 50, 200, seed=0)
print(len(ds.train), len(ds.val), len(ds.test), "trajectories; times", ds.times[0], "to", ds.times[-1])
z = ds.normalize(ds.values[ds.train]).reshape(-1, ds.dim)
print("train mean", np.round(z.mean(0), 12), "std", np.round(z.std(0), 12))
