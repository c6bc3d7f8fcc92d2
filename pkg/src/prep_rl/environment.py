"""Preprocessing MDP: states are images, actions are stop-and-classify or
apply-a-transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transforms import MAX_LEN, TransformId, action_set, apply_chain


@dataclass(frozen=True)
class Stop:
    cls: int

    def __str__(self):
        return f"stop({self.cls})"


@dataclass(frozen=True)
class Transform:
    index: int


Action = Stop | Transform


@dataclass
class EnvConfig:
    k: int
    max_len: int = MAX_LEN
    reward_mode: str = "balanced"  # balanced: k-1 / -1, simple: +1 / -1
    action_set: str = "standard"
    recovery: bool = True  # training only

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"need at least two classes, got k={self.k}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be positive, got {self.max_len}")
        if self.reward_mode not in ("balanced", "simple"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        action_set(self.action_set)

    @property
    def transforms(self) -> tuple[TransformId, ...]:
        return action_set(self.action_set)

    @property
    def n(self):
        return len(self.transforms)

    @property
    def num_actions(self):
        return self.k + self.n


@dataclass
class State:
    original: np.ndarray
    chain: tuple = ()
    current: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        if self.current is None:
            self.current = apply_chain(self.original, self.chain, max(len(self.chain), 1))


@dataclass
class StepResult:
    next_state: State
    reward: float
    terminal: bool
    recovered: bool = False
    predicted_class: int | None = None


def action_index(action, k):
    return action.cls if isinstance(action, Stop) else k + action.index


def action_from_index(a, k):
    a = int(a)
    return Stop(a) if a < k else Transform(a - k)


def terminal_reward(predicted, label, k, mode="balanced"):
    if predicted == label:
        return float(k - 1) if mode == "balanced" else 1.0
    return -1.0


def reset(image, label=None):
    image = np.asarray(image)
    return State(original=image, chain=(), current=image.copy(), label=label)


def step(state: State, action, cfg: EnvConfig) -> StepResult:
    if isinstance(action, Stop):
        if not 0 <= action.cls < cfg.k:
            raise ValueError(f"stop class {action.cls} out of range for k={cfg.k}")
        reward = 0.0 if state.label is None else terminal_reward(action.cls, state.label, cfg.k, cfg.reward_mode)
        return StepResult(state, reward, True, predicted_class=action.cls)
    if not isinstance(action, Transform) or not 0 <= action.index < cfg.n:
        raise ValueError(f"invalid action {action!r} for {cfg.n} transforms")
    if len(state.chain) >= cfg.max_len:
        if not cfg.recovery:
            raise ValueError(f"chain already at max_len={cfg.max_len} and recovery is disabled")
        nxt = State(state.original, (), state.original.copy(), state.label)
        return StepResult(nxt, 0.0, False, recovered=True)
    chain = state.chain + (cfg.transforms[action.index],)
    nxt = State(state.original, chain, apply_chain(state.original, chain, cfg.max_len), state.label)
    return StepResult(nxt, 0.0, False)
