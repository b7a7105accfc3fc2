# %% [markdown]
# # Experiment harness
#
# The harness trains each arm once and reuses it across experiments:
# the strategy table, the noise-variance sweep and the cache ablation.
# The default budget is 3000 steps per arm (several minutes each on one
# core); set `STEPS` lower for a quick look.

# %%
import tempfile

from lqtse.experiments import ExperimentSpec, build_setup, rows_to_csv, run_cache_ablation, run_noise_sweep, run_strategy_comparison
from lqtse.trainer import TrainConfig

STEPS = 300
out = tempfile.mkdtemp(prefix="lqtse-")
spec = ExperimentSpec(
    out_dir=out,
    strategies=("vanilla", "vanilla-ni", "retrieval", "retrieval-ni"),
    base=TrainConfig(steps=STEPS, val_every=0),
)
setup = build_setup(spec)

# %%
print(rows_to_csv(run_strategy_comparison(spec, setup)))

# %%
print(rows_to_csv(run_noise_sweep(spec, setup)))
print(open(f"{out}/fig2.dat").read())

# %%
print(rows_to_csv(run_cache_ablation(spec, setup)))
