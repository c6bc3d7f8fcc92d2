"""Flip/rotation transformation set and chain application.

A chain is never applied step by step. It is first reduced to a canonical
pair (net rotation angle, flip state) and then replayed on the original
image: rotate once about the centre, then flip. This keeps inverse chains
exact even for the small interpolated rotations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_LEN = 10


@dataclass(frozen=True)
class TransformId:
    kind: str  # flip_h | flip_v | flip_hv | rot
    angle: int = 0

    def __str__(self):
        return f"rot({self.angle:+d})" if self.kind == "rot" else self.kind

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text in ("flip_h", "flip_v", "flip_hv"):
            return cls(text)
        if text.startswith("rot(") and text.endswith(")"):
            return cls("rot", int(text[4:-1]))
        raise ValueError(f"not a transform: {text!r}")


FLIP_H = TransformId("flip_h")
FLIP_V = TransformId("flip_v")
FLIP_HV = TransformId("flip_hv")


def rot(angle):
    return TransformId("rot", angle)


STANDARD = (FLIP_H, FLIP_V, FLIP_HV, rot(-1), rot(-2), rot(-4), rot(-8), rot(8), rot(4), rot(2), rot(1))
COARSE = (FLIP_H, FLIP_V, FLIP_HV, rot(90), rot(-90))
ACTION_SETS = {"standard": STANDARD, "coarse": COARSE}

_FLIP_BITS = {"flip_h": (1, 0), "flip_v": (0, 1), "flip_hv": (1, 1)}


def action_set(mode="standard"):
    try:
        return ACTION_SETS[mode]
    except KeyError:
        raise ValueError(f"unknown transform mode {mode!r}") from None


def inverse_of(t: TransformId, mode="standard"):
    active = action_set(mode)
    if t not in active:
        raise ValueError(f"{t} is not in the {mode} set")
    inv = t if t.kind != "rot" else rot(-t.angle)
    assert inv in active
    return inv


def inverse_chain(chain, mode="standard"):
    return [inverse_of(t, mode) for t in reversed(chain)]


def canonical(chain):
    """Reduce a chain to ``(angle, (flip_h, flip_v))`` such that applying the
    chain equals rotating by ``angle`` degrees (counter-clockwise) and then
    flipping.

    Appending a rotation after an odd flip state reverses its sense, because a
    mirror conjugates R(a) into R(-a). Half turns are folded into the flip
    state (R(180) is the double flip), leaving the angle in (-90, 90], so
    every group element has exactly one representation.
    """
    angle, h, v = 0, 0, 0
    for t in chain:
        if t.kind == "rot":
            angle += -t.angle if h ^ v else t.angle
        else:
            dh, dv = _FLIP_BITS[t.kind]
            h, v = h ^ dh, v ^ dv
    angle %= 360
    if 90 < angle <= 270:
        angle, h, v = angle - 180, h ^ 1, v ^ 1
    elif angle > 270:
        angle -= 360
    return angle, (h, v)


def is_identity(chain):
    return canonical(chain) == (0, (0, 0))


def rotate(image, angle):
    """Rotate an H x W x C image counter-clockwise about its centre.

    Multiples of 90 degrees on square images are exact index permutations;
    anything else is bilinear resampling into the same frame with zero fill.
    """
    h, w = image.shape[:2]
    if angle % 90 == 0 and (h == w or angle % 180 == 0):
        return np.ascontiguousarray(np.rot90(image, k=(angle // 90) % 4, axes=(0, 1)))
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    x, y = cols - cx, cy - rows
    # output pixel takes the value at R(-angle) applied to its position
    src_col = cx + x * c + y * s
    src_row = cy - (-x * s + y * c)
    r0 = np.floor(src_row).astype(int)
    c0 = np.floor(src_col).astype(int)
    fr, fc = src_row - r0, src_col - c0
    out = np.zeros(image.shape, dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.zeros(image.shape, dtype=np.float64)
        vals[ok] = image[rr[ok], cc[ok]]
        out += wgt[..., None] * vals
    return out.astype(image.dtype)


def apply_canonical(image, angle, flips):
    out = rotate(image, angle) if angle else image.copy()
    h, v = flips
    if h:
        out = out[:, ::-1]
    if v:
        out = out[::-1]
    return np.ascontiguousarray(out)


def apply_chain(original, chain, max_len=MAX_LEN):
    """Image obtained from ``original`` (H x W x C) by the transform chain."""
    if original.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {original.shape}")
    if len(chain) > max_len:
        raise ValueError(f"chain of length {len(chain)} exceeds max_len={max_len}")
    angle, flips = canonical(chain)
    return apply_canonical(original, angle, flips)


def random_chain(rng, length_range=(1, 5), mode="standard", max_len=MAX_LEN):
    lo, hi = length_range
    if lo > hi:
        raise ValueError(f"empty length range {length_range}")
    if lo < 1 or hi > max_len:
        raise ValueError(f"length range {length_range} outside [1, {max_len}]")
    active = action_set(mode)
    n = int(rng.integers(lo, hi + 1))
    return [active[i] for i in rng.integers(0, len(active), size=n)]


def format_chain(chain):
    return [str(t) for t in chain]


def parse_chain(items):
    return [TransformId.parse(s) for s in items]
