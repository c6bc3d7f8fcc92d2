# %% [markdown]
# # NN vs RL vs CL on quarter turns and flips
#
# Trains the plain classifier (NN), the preprocessing agent (RL) and the
# fine-tuned agent network (CL) on clean glyphs, then scores all three on
# clean and on distorted test images. One seed and a shorter schedule than
# `configs/desk_coarse.cfg` so it finishes in a couple of minutes.

# %%
import logging
from pathlib import Path

from prep_rl.pipeline import ExperimentConfig, run_experiment

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ExperimentConfig.from_text((Path(__file__).resolve().parent.parent / "configs" / "desk_coarse.cfg").read_text())
cfg.run.runs = 1
cfg.agent.steps = 20000
cfg.validate()

# %%
report, results = run_experiment(cfg)
print(report.table())

# %%
# the agent's first test traces: what it did to each distorted image
res = results[0]
for t in res.traces[:12]:
    print(f"img {t.image_id:3d} label {t.true_label} distortion {t.distortion!s:<28} "
          f"agent {t.steps!s:<28} -> {t.predicted}  undone: {t.undoes_distortion()}")

# %%
stats = res.rl_stats
print("episodes", stats["episodes"], "updates", stats["updates"], "recoveries", stats["recoveries"])
print("validation history", stats["val_history"])
