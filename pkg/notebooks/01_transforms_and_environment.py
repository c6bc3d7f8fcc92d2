# %% [markdown]
# # Transforms and the preprocessing environment
#
# A walk through the pieces the agent plays with: the flip/rotation set,
# how chains are replayed from the original image, and what one episode
# looks like from the environment's side.

# %%
import numpy as np

from prep_rl.data import MIRROR_PAIRS, gen_glyphs
from prep_rl.environment import EnvConfig, Stop, Transform, reset, step
from prep_rl.transforms import COARSE, STANDARD, apply_chain, canonical, inverse_chain, random_chain


def show(img, title=""):
    ramp = " .:-=+*#"
    print(title)
    for row in img[..., 0]:
        print("".join(ramp[min(len(ramp) - 1, int(v * len(ramp)))] * 2 for v in row))
    print()


# %%
# four glyph classes in two mirror pairs, each with a corner marker that
# fixes which way is up
ds = gen_glyphs(1, 4, shapes=list(MIRROR_PAIRS), marker=True, jitter=0)
for img, label in zip(ds.images, ds.labels):
    show(img, f"class {label} ({MIRROR_PAIRS[label]})")

# %%
print("standard set:", [str(t) for t in STANDARD])
print("coarse set:  ", [str(t) for t in COARSE])

# %%
# a chain collapses to one rotation and one flip state; its inverse undoes
# it bit for bit, small interpolated rotations included
rng = np.random.default_rng(0)
x = ds.images[0]
chain = random_chain(rng, (4, 4))
print("chain", [str(t) for t in chain], "->", canonical(chain))
show(apply_chain(x, chain), "distorted")
back = apply_chain(x, chain + inverse_chain(chain), max_len=20)
print("restored bit-exactly:", back.tobytes() == x.tobytes())

# %%
# one episode by hand: flip, flip back, then stop with a class
cfg = EnvConfig(k=4, action_set="coarse")
s = reset(x, label=0)
for a in (Transform(0), Transform(0), Stop(0)):
    r = step(s, a, cfg)
    print(f"{a!s:<20} reward {r.reward:+.0f} terminal {r.terminal} chain {[str(t) for t in r.next_state.chain]}")
    s = r.next_state

# %%
# past max_len the environment snaps back to the original image
s = reset(x, 0)
for _ in range(cfg.max_len + 1):
    r = step(s, Transform(3), cfg)
    s = r.next_state
print("recovered:", r.recovered, "chain length now", len(s.chain))
