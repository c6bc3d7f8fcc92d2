# %% [markdown]
# # Reading traces from a finished run
#
# Point `RUN` at a folder written by `prep-rl robustness` and this script
# tallies how often the agent stopped at once, undid the distortion exactly,
# or took some other route.

# %%
import json
import sys
from collections import Counter
from pathlib import Path

from prep_rl.pipeline import EpisodeTrace

RUN = Path(sys.argv[1] if len(sys.argv) > 1 else "runs").resolve()
files = sorted(RUN.rglob("traces.jsonl"))
print(f"{len(files)} trace files under {RUN}")

# %%
tally = Counter()
for f in files:
    for line in f.read_text().splitlines():
        t = EpisodeTrace.from_json(line)
        if not t.distortion:
            tally["clean, " + ("stopped at once" if not t.steps else "transformed")] += 1
            continue
        ok = "correct" if t.predicted == t.true_label else "wrong"
        how = "undone" if t.undoes_distortion() else ("stopped at once" if not t.steps else "other route")
        tally[f"distorted, {ok}, {how}"] += 1
for key, n in sorted(tally.items()):
    print(f"{n:5d}  {key}")

# %%
# one full record, as written
if files:
    print(json.dumps(json.loads(files[0].read_text().splitlines()[0]), indent=2))
