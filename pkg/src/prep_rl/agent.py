"""Dueling Q-network over the stop + transform action space, epsilon-greedy
selection, replay memory and the Bellman update."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .environment import Stop, Transform, action_from_index
from .nn import Adam, Dense, LayerSpec, Network, NetworkSpec, arch_body


@dataclass
class QOutput:
    stop_q: np.ndarray
    transform_q: np.ndarray

    @property
    def values(self):
        return np.concatenate([self.stop_q, self.transform_q])


def dueling_combine(value, advantage):
    """Q = V + A - mean(A) row-wise; ``value`` is (N, 1), ``advantage`` (N, A)."""
    return value + advantage - advantage.mean(axis=1, keepdims=True)


class QNetwork:
    """Shared body followed by a value branch (1 unit) and an advantage
    branch (k + n units), recombined by :func:`dueling_combine`."""

    def __init__(self, body_layers, input_shape, k, n, seed=0, dtype=np.float32, arch=None):
        self.k, self.n, self.arch = k, n, arch
        self.body = Network(NetworkSpec(list(body_layers), tuple(input_shape), "features"), seed=seed, dtype=dtype)
        if len(self.body.output_shape) != 1:
            raise ValueError(f"body must end in a flat feature vector, got {self.body.output_shape}")
        feats = self.body.output_shape[0]
        rng = np.random.default_rng([seed, 1])
        self.value = Dense(feats, 1, rng=rng, dtype=dtype)
        self.advantage = Dense(feats, k + n, rng=rng, dtype=dtype)
        self.dtype = self.body.dtype
        self.input_shape = self.body.input_shape

    @classmethod
    def from_arch(cls, arch, input_shape, k, n, seed=0, dtype=np.float32):
        return cls(arch_body(arch), input_shape, k, n, seed=seed, dtype=dtype, arch=arch)

    @property
    def num_actions(self):
        return self.k + self.n

    def forward(self, x, train=False):
        h = self.body.forward(x, train)
        return dueling_combine(self.value.forward(h), self.advantage.forward(h))

    def branches(self, x):
        h = self.body.forward(x)
        return self.value.forward(h), self.advantage.forward(h)

    def backward(self, dq):
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        dh = self.value.backward(dv) + self.advantage.backward(da)
        return self.body.backward(dh)

    def _heads(self):
        return {"value": self.value, "advantage": self.advantage}

    def params(self):
        out = {f"body.{k}": v for k, v in self.body.params().items()}
        for hname, layer in self._heads().items():
            out.update({f"{hname}.{k}": v for k, v in layer.params.items()})
        return out

    def grads(self):
        out = {f"body.{k}": v for k, v in self.body.grads().items()}
        for hname, layer in self._heads().items():
            out.update({f"{hname}.{k}": v for k, v in layer.grads.items()})
        return out

    def state(self):
        return {**self.params(), **{f"body.{k}": v for k, v in self.body.buffers().items()}}

    def load_state(self, tensors):
        self.body.load_state({k[5:]: v for k, v in tensors.items() if k.startswith("body.")})
        for hname, layer in self._heads().items():
            for name in layer.params:
                arr = np.asarray(tensors[f"{hname}.{name}"])
                if arr.shape != layer.params[name].shape:
                    raise ValueError(f"{hname}.{name}: shape {arr.shape} != {layer.params[name].shape}")
                layer.params[name] = arr.astype(self.dtype, copy=True)

    def predict(self, x, batch_size=256):
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def clone(self):
        return copy.deepcopy(self)


def q_forward(net: QNetwork, image) -> QOutput:
    image = np.asarray(image)
    if image.shape != net.input_shape:
        raise ValueError(f"image shape {image.shape} does not match network input {net.input_shape}")
    q = net.forward(image[None])[0]
    return QOutput(q[:net.k].copy(), q[net.k:].copy())


def greedy_index(q_values, k, chain_len=0, max_len=None, forced_stop=False):
    """argmax with ties to the lowest index; stops only when the chain is full."""
    if forced_stop or (max_len is not None and chain_len >= max_len):
        return int(np.argmax(q_values[:k]))
    return int(np.argmax(q_values))


def select_action(q: QOutput, eps, rng, mode="train", chain_len=0, max_len=10):
    if not 0 <= eps <= 1:
        raise ValueError(f"eps must be in [0, 1], got {eps}")
    values = q.values
    k = len(q.stop_q)
    if mode == "train":
        if eps > 0 and rng.random() < eps:
            return action_from_index(rng.integers(len(values)), k)
        return action_from_index(greedy_index(values, k), k)
    if mode != "test":
        raise ValueError(f"unknown mode {mode!r}")
    return action_from_index(greedy_index(values, k, chain_len, max_len), k)


@dataclass
class Transition:
    state: np.ndarray
    action: Stop | Transform
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling.

    Images are stored in preallocated arrays; the oldest slot is overwritten
    once the buffer is full.
    """

    def __init__(self, capacity, obs_shape, k, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity, self.k = capacity, k
        self.states = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.next_states = np.zeros((capacity, *obs_shape), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        i = self._next
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        a = t.action
        self.actions[i] = a if isinstance(a, (int, np.integer)) else (
            a.cls if isinstance(a, Stop) else self.k + a.index)
        self.rewards[i] = t.reward
        self.terminals[i] = t.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, batch_size, rng):
        if batch_size > self.size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.terminals[idx])


@dataclass
class EpsilonSchedule:
    anneal_steps: int
    start: float = 1.0
    end: float = 0.1

    def __post_init__(self):
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be positive")


def epsilon_at(sched: EpsilonSchedule, step):
    frac = min(max(step, 0) / sched.anneal_steps, 1.0)
    return sched.start + frac * (sched.end - sched.start)


def bellman_targets(rewards, next_states, terminals, target_net, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    out = rewards.copy()
    live = ~terminals
    if live.any():
        q_next = target_net.forward(next_states[live])
        if not np.all(np.isfinite(q_next)):
            raise FloatingPointError("non-finite Q-values in Bellman target")
        out[live] += gamma * q_next.max(axis=1)
    return out


def bellman_target(t: Transition, target_net, gamma):
    nxt = np.asarray(t.next_state)[None]
    return float(bellman_targets([t.reward], nxt, [t.terminal], target_net, gamma)[0])


def td_loss_and_grad(q, actions, targets):
    """Mean squared TD error over the batch; gradient only on taken actions."""
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / len(actions)
    return float(np.mean(err ** 2)), dq


def train_step(net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, batch_size, gamma, opt: Adam, rng):
    if len(buffer) < batch_size:
        raise ValueError(f"buffer holds {len(buffer)} transitions, need {batch_size}")
    s, a, r, s2, done = buffer.sample(batch_size, rng)
    y = bellman_targets(r, s2, done, target_net, gamma)
    q = net.forward(s, train=True)
    loss, dq = td_loss_and_grad(q.astype(np.float64), a, y)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite TD loss at optimizer step {opt.t + 1}")
    net.backward(dq.astype(net.dtype))
    opt.step(net.params(), net.grads())
    return loss


def sync_target(net: QNetwork, target_net: QNetwork):
    if (net.k, net.n, net.input_shape) != (target_net.k, target_net.n, target_net.input_shape):
        raise ValueError("online and target networks have different shapes")
    src, dst = net.state(), target_net.state()
    if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
        raise ValueError("online and target networks have different layer layouts")
    target_net.load_state(src)
    return target_net
