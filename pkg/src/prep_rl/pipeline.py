"""Training and evaluation of the three models (plain classifier NN, RL agent,
classifier fine-tuned from the agent CL), robustness runs and traces."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as D
from .agent import (EpsilonSchedule, QNetwork, QOutput, ReplayBuffer, Transition, epsilon_at,
                    greedy_index, select_action, sync_target, train_step)
from .environment import EnvConfig, Stop, action_index, reset, step
from .nn import (ARCHITECTURES, Adam, Dense, Network, build_classifier, load_tensors, save_tensors,
                 softmax_cross_entropy)
from .transforms import apply_chain, canonical, format_chain

log = logging.getLogger(__name__)

MODELS = ("NN", "RL", "CL")
CONDITIONS = ("clean", "distorted")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataSection:
    source: str = "glyphs"  # glyphs | idx
    path: str = ""
    k: int = 4
    size: int = 16
    n_per_class: int = 600
    n_val: int = 200
    n_test: int = 400
    noise: float = 0.0
    shapes: str = ""  # comma-separated glyph names; empty means the first k
    marker: bool = False
    seed: int = 0


@dataclass
class EnvSection:
    max_len: int = 10
    reward_mode: str = "balanced"
    action_set: str = "standard"


@dataclass
class AgentSection:
    gamma: float = 0.99
    steps: int = 40000  # environment steps
    anneal_steps: int = 0  # 0 means half of ``steps``
    batch_size: int = 32
    buffer_capacity: int = 50000
    learn_start: int = 500
    train_every: int = 1
    target_sync: int = 500
    use_target: bool = True
    use_replay: bool = True
    n_envs: int = 8
    eval_every: int = 4000
    lr: float = 0.0
    episode_budget: int = 0  # 0 means 3 * max_len


@dataclass
class TrainSection:
    arch: str = "arch1"
    lr: float = 0.0001
    l2: float = 0.001
    batch_size: int = 32
    nn_epochs: int = 10
    cl_epochs: int = 3


@dataclass
class DistortionSection:
    probability: float = 0.5
    mode: str = "standard"
    min_len: int = 1
    max_len: int = 5
    seed: int = 1000


@dataclass
class RunSection:
    runs: int = 5
    seed: int = 0
    traces: int = 100
    workers: int = 1  # processes for independent runs


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: AgentSection = field(default_factory=AgentSection)
    train: TrainSection = field(default_factory=TrainSection)
    distortion: DistortionSection = field(default_factory=DistortionSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        if self.run.runs < 1:
            raise ValueError("run.runs must be at least 1")
        if self.train.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.train.arch!r}")
        if self.data.source not in ("glyphs", "idx"):
            raise ValueError(f"unknown data source {self.data.source!r}")
        if not 0 <= self.agent.gamma < 1:
            raise ValueError("agent.gamma must be in [0, 1)")
        self.env_config(2)
        self.distortion_config(0)
        return self

    def env_config(self, k, recovery=True):
        return EnvConfig(k=k, max_len=self.env.max_len, reward_mode=self.env.reward_mode,
                         action_set=self.env.action_set, recovery=recovery)

    def distortion_config(self, run=0):
        d = self.distortion
        return D.DistortionConfig(d.probability, d.mode, (d.min_len, d.max_len), d.seed + run)

    def set(self, key, value):
        """Apply a ``section.key`` override given as text."""
        try:
            section_name, name = key.split(".")
            section = getattr(self, section_name)
            ftype = {f.name: f.type for f in fields(section)}[name]
        except (ValueError, AttributeError, KeyError):
            raise ValueError(f"unknown config key {key!r}") from None
        setattr(section, name, _coerce(value, ftype, key))

    def to_text(self):
        lines = []
        for f in fields(self):
            for name, value in asdict(getattr(self, f.name)).items():
                lines.append(f"{f.name}.{name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg


def _coerce(text, ftype, key):
    text = str(text).strip()
    try:
        if ftype in ("bool", bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if ftype in ("int", int):
            return int(text)
        if ftype in ("float", float):
            return float(text)
    except ValueError:
        raise ValueError(f"bad value {text!r} for {key} ({ftype})") from None
    return text


def load_datasets(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "glyphs":
        shapes = [x.strip() for x in d.shapes.split(",")] if d.shapes else None
        ds = D.gen_glyphs(d.n_per_class, d.k, d.size, seed=d.seed, noise=d.noise, shapes=shapes,
                          marker=d.marker)
        return D.split_dataset(ds, d.n_val, d.n_test, seed=d.seed)
    train = D.load_idx(f"{d.path}/train-images-idx3-ubyte", f"{d.path}/train-labels-idx1-ubyte", d.k, "train")
    test = D.load_idx(f"{d.path}/t10k-images-idx3-ubyte", f"{d.path}/t10k-labels-idx1-ubyte", d.k, "test")
    order = np.random.default_rng(d.seed).permutation(len(train))
    val, train = train.subset(order[:d.n_val], "val"), train.subset(order[d.n_val:], "train")
    return train, val, test


# ---------------------------------------------------------------------------
# classifiers (NN and CL)


def predict_classes(model, images, batch_size=256):
    return model.predict(images, batch_size).argmax(axis=1)


def fit_classifier(net: Network, train: D.Dataset, val: D.Dataset, epochs, lr, l2, batch_size, seed):
    """Mini-batch Adam on softmax cross-entropy; keeps the best-validation weights."""
    opt = Adam(lr=lr, l2=l2)
    rng = np.random.default_rng([seed, 7])
    best_acc, best_state = accuracy(predict_classes(net, val.images), val.labels), _copy_state(net.state())
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            logits = net.forward(train.images[idx], train=True)
            loss, grad = softmax_cross_entropy(logits.astype(np.float64), train.labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
            net.backward(grad)
            opt.step(net.params(), net.grads())
            losses.append(loss)
        acc = accuracy(predict_classes(net, val.images), val.labels)
        log.info("epoch %d loss %.4f val %.4f", epoch, float(np.mean(losses)), acc)
        if acc > best_acc:
            best_acc, best_state = acc, _copy_state(net.state())
    net.load_state(best_state)
    return net


def train_nn(cfg: ExperimentConfig, train: D.Dataset, val: D.Dataset, seed=0):
    net = build_classifier(cfg.train.arch, train.image_shape, train.k, seed=seed)
    t = cfg.train
    return fit_classifier(net, train, val, t.nn_epochs, t.lr, t.l2, t.batch_size, seed)


def classifier_from_qnet(qnet: QNetwork):
    """Plain classifier whose logits equal the agent's stop-action Q-values.

    Stop Q-values are V + A_i - mean(A), which is linear in the body features,
    so the value and advantage heads fold exactly into one dense layer.
    """
    body = qnet.body
    net = build_classifier(qnet.arch, qnet.input_shape, qnet.k, dtype=qnet.dtype)
    head = net.layers[-1]
    if not isinstance(head, Dense) or head.params["W"].shape != (body.output_shape[0], qnet.k):
        raise ValueError("classifier head does not match the agent's stop-action slice")
    net.load_state({**body.state(), **_head_state(qnet, len(net.layers) - 1)})
    return net


def _head_state(qnet, index):
    Wv = qnet.value.params["W"].astype(np.float64)
    bv = qnet.value.params["b"].astype(np.float64)
    Wa = qnet.advantage.params["W"].astype(np.float64)
    ba = qnet.advantage.params["b"].astype(np.float64)
    W = Wv + Wa[:, :qnet.k] - Wa.mean(axis=1, keepdims=True)
    b = bv + ba[:qnet.k] - ba.mean()
    return {f"{index}.dense.W": W, f"{index}.dense.b": b}


def train_cl(cfg: ExperimentConfig, qnet: QNetwork, train: D.Dataset, val: D.Dataset, seed=0, epochs=None):
    """Fine-tune the folded agent network on agent-preprocessed images."""
    net = classifier_from_qnet(qnet)
    env_cfg = cfg.env_config(train.k, recovery=False)
    pre_train = preprocess_dataset(qnet, train, env_cfg)
    pre_val = preprocess_dataset(qnet, val, env_cfg)
    t = cfg.train
    epochs = t.cl_epochs if epochs is None else epochs
    return fit_classifier(net, pre_train, pre_val, epochs, t.lr, t.l2, t.batch_size, seed)


# ---------------------------------------------------------------------------
# agent (RL)


@dataclass
class PolicyRun:
    predictions: np.ndarray
    chains: list
    q_values: list  # per image: chosen-action Q-value at every step
    final_images: np.ndarray


def run_policy(qnet: QNetwork, images, env_cfg: EnvConfig, batch_size=256) -> PolicyRun:
    """Greedy test-time policy on every image.

    Transform actions are applied until the agent stops; a full chain forces
    the best stop action. No recovery happens at test time.
    """
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    k, transforms, max_len = env_cfg.k, env_cfg.transforms, env_cfg.max_len
    preds = np.full(n, -1, dtype=np.int64)
    chains = [[] for _ in range(n)]
    qvals = [[] for _ in range(n)]
    current = images.copy()
    active = np.arange(n)
    while len(active):
        q = qnet.predict(current[active], batch_size)
        still = []
        for row, i in enumerate(active):
            a = greedy_index(q[row], k, len(chains[i]), max_len)
            qvals[i].append(float(q[row, a]))
            if a < k:
                preds[i] = a
            else:
                chains[i].append(transforms[a - k])
                current[i] = apply_chain(images[i], chains[i], max_len)
                still.append(i)
        active = np.array(still, dtype=np.int64)
    return PolicyRun(preds, chains, qvals, current)


def _rl_accuracy(qnet, ds, env_cfg):
    return accuracy(run_policy(qnet, ds.images, env_cfg).predictions, ds.labels)


def train_rl(cfg: ExperimentConfig, train: D.Dataset, val: D.Dataset, seed=0, epsilon=None):
    """Deep Q-learning over preprocessing episodes.

    Episodes start from training images visited in reshuffled passes and run
    in ``agent.n_envs`` parallel slots. ``epsilon`` pins the exploration rate
    instead of annealing it. Returns the best-validation network and a dict
    of training statistics.
    """
    a, t = cfg.agent, cfg.train
    env_cfg = cfg.env_config(train.k)
    k, n = env_cfg.k, env_cfg.n
    net = QNetwork.from_arch(t.arch, train.image_shape, k, n, seed=seed)
    target = net.clone() if a.use_target else net
    opt = Adam(lr=a.lr or t.lr, l2=t.l2)
    capacity = a.buffer_capacity if a.use_replay else a.batch_size
    buffer = ReplayBuffer(capacity, train.image_shape, k)
    sched = EpsilonSchedule(a.anneal_steps or max(a.steps // 2, 1))
    budget = a.episode_budget or 3 * env_cfg.max_len
    rng = np.random.default_rng([seed, 11])

    order, cursor = rng.permutation(len(train)), 0

    def next_episode():
        nonlocal order, cursor
        if cursor == len(order):
            order, cursor = rng.permutation(len(train)), 0
        i = order[cursor]
        cursor += 1
        return reset(train.images[i], int(train.labels[i]))

    slots = [next_episode() for _ in range(a.n_envs)]
    lengths = [0] * a.n_envs
    stats = {"episodes": 0, "episode_lengths": [], "forced_stops": 0, "recoveries": 0,
             "losses": [], "val_history": []}
    best_acc, best_state = -1.0, None
    env_steps, updates = 0, 0
    next_eval = a.eval_every
    start = time.time()
    while env_steps < a.steps:
        eps = epsilon_at(sched, env_steps) if epsilon is None else epsilon
        q = net.forward(np.stack([s.current for s in slots]))
        for i, state in enumerate(slots):
            qo = QOutput(q[i, :k], q[i, k:])
            action = select_action(qo, eps, rng, "train")
            if lengths[i] + 1 >= budget and not isinstance(action, Stop):
                action = Stop(greedy_index(q[i], k, forced_stop=True))
                stats["forced_stops"] += 1
            res = step(state, action, env_cfg)
            buffer.add(Transition(state.current, action_index(action, k), res.reward,
                                  res.next_state.current, res.terminal))
            stats["recoveries"] += res.recovered
            lengths[i] += 1
            if res.terminal:
                stats["episodes"] += 1
                stats["episode_lengths"].append(lengths[i])
                slots[i], lengths[i] = next_episode(), 0
            else:
                slots[i] = res.next_state
            env_steps += 1
            if len(buffer) >= max(a.learn_start, a.batch_size) and env_steps % a.train_every == 0:
                loss = train_step(net, target, buffer, a.batch_size, a.gamma, opt, rng)
                stats["losses"].append(loss)
                updates += 1
                if a.use_target and updates % a.target_sync == 0:
                    sync_target(net, target)
        if env_steps >= next_eval or env_steps >= a.steps:
            next_eval += a.eval_every
            acc = _rl_accuracy(net, val, cfg.env_config(k, recovery=False))
            stats["val_history"].append((env_steps, acc))
            log.info("rl step %d eps %.3f val %.4f (%.0fs)", env_steps, eps, acc, time.time() - start)
            if acc >= best_acc:
                best_acc, best_state = acc, _copy_state(net.state())
    if best_state is not None:
        net.load_state(best_state)
    stats["updates"] = updates
    stats["best_val"] = best_acc
    return net, stats


def preprocess_dataset(qnet: QNetwork, ds: D.Dataset, env_cfg: EnvConfig | None = None):
    """The image at the moment the agent stops, for every image; labels kept."""
    env_cfg = env_cfg or EnvConfig(k=ds.k, action_set=_action_set_for(qnet), recovery=False)
    out = run_policy(qnet, ds.images, env_cfg)
    return D.Dataset(out.final_images, ds.labels.copy(), ds.k, ds.split)


def _action_set_for(qnet):
    from .transforms import ACTION_SETS
    for name, members in ACTION_SETS.items():
        if len(members) == qnet.n:
            return name
    raise ValueError(f"no transform set with {qnet.n} members")


# ---------------------------------------------------------------------------
# evaluation, traces and reports


def accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return float(np.mean(predictions == labels)) if len(labels) else 0.0


def predict(model, ds: D.Dataset, policy="plain", env_cfg=None):
    if policy == "plain":
        return predict_classes(model, ds.images)
    if policy == "rl_testtime":
        env_cfg = env_cfg or EnvConfig(k=ds.k, action_set=_action_set_for(model), recovery=False)
        return run_policy(model, ds.images, env_cfg).predictions
    raise ValueError(f"unknown policy {policy!r}")


def evaluate(model, ds: D.Dataset, policy="plain", env_cfg=None):
    return accuracy(predict(model, ds, policy, env_cfg), ds.labels)


@dataclass
class EpisodeTrace:
    image_id: int
    true_label: int
    steps: list
    predicted: int
    q_values: list
    distortion: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def undoes_distortion(self):
        """True when distortion followed by the agent's steps is the identity."""
        from .transforms import parse_chain
        return canonical(parse_chain(self.distortion) + parse_chain(self.steps)) == (0, (0, 0))


def collect_traces(qnet, ds: D.Dataset, env_cfg, ids=None, distortions=None):
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids)
    run = run_policy(qnet, ds.images[ids], env_cfg)
    traces = []
    for row, i in enumerate(ids):
        traces.append(EpisodeTrace(int(i), int(ds.labels[i]), format_chain(run.chains[row]),
                                   int(run.predictions[row]), run.q_values[row],
                                   format_chain(distortions[i]) if distortions is not None else []))
    return traces


def replay_trace(trace: EpisodeTrace, qnet, image, env_cfg):
    """Re-run the recorded steps and return the stop class the policy picks."""
    from .agent import q_forward
    from .transforms import parse_chain
    chain = parse_chain(trace.steps)
    q = q_forward(qnet, apply_chain(image, chain, env_cfg.max_len))
    action = select_action(q, 0.0, None, "test", len(chain), env_cfg.max_len)
    return action.cls if isinstance(action, Stop) else None


@dataclass
class MetricsReport:
    arch: str
    dataset: str
    results: dict = field(default_factory=dict)  # (model, condition) -> per-run accuracies

    def add(self, model, condition, acc):
        self.results.setdefault((model, condition), []).append(float(acc))

    def mean(self, model, condition):
        return float(np.mean(self.results[(model, condition)]))

    def std(self, model, condition):
        return float(np.std(self.results[(model, condition)]))

    def records(self):
        return [dict(model=m, arch=self.arch, dataset=self.dataset, condition=c,
                     mean=self.mean(m, c), std=self.std(m, c), runs=len(self.results[(m, c)]))
                for (m, c) in sorted(self.results, key=lambda mc: (CONDITIONS.index(mc[1]), MODELS.index(mc[0])))]

    def table(self):
        conds = [c for c in CONDITIONS if any(key[1] == c for key in self.results)]
        header = f"{'arch':<6} {'model':<5} " + " ".join(f"{c:>17}" for c in conds)
        lines = [header, "-" * len(header)]
        for m in MODELS:
            cells = []
            for c in conds:
                if (m, c) in self.results:
                    cells.append(f"{self.mean(m, c):.4f} ± {self.std(m, c):.4f}".rjust(17))
                else:
                    cells.append(" " * 17)
            if any(cell.strip() for cell in cells):
                lines.append(f"{self.arch:<6} {m:<5} " + " ".join(cells))
        return "\n".join(lines) + "\n"

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records())

    @classmethod
    def from_run_records(cls, records):
        """Rebuild from per-run records (dicts with model, condition, accuracy, arch, dataset)."""
        records = list(records)
        rep = cls(records[0]["arch"], records[0]["dataset"]) if records else cls("", "")
        for r in records:
            rep.add(r["model"], r["condition"], r["accuracy"])
        return rep


@dataclass
class RunResult:
    seed: int
    accuracies: dict
    nn: Network
    rl: QNetwork
    cl: Network
    traces: list
    test: D.Dataset
    distorted: D.Dataset
    chains: list
    rl_stats: dict


def run_once(cfg: ExperimentConfig, run_index=0, datasets=None):
    seed = cfg.run.seed + run_index
    train, val, test = datasets or load_datasets(cfg)
    env_test = cfg.env_config(train.k, recovery=False)
    stage = "data"
    try:
        distorted, chains = D.distort(test, cfg.distortion_config(run_index))
        stage = "NN"
        nn = train_nn(cfg, train, val, seed)
        stage = "RL"
        rl, stats = train_rl(cfg, train, val, seed)
        stage = "CL"
        cl = train_cl(cfg, rl, train, val, seed)
        stage = "evaluate"
        acc = {}
        for cond, ds in (("clean", test), ("distorted", distorted)):
            acc[("NN", cond)] = evaluate(nn, ds)
            acc[("RL", cond)] = evaluate(rl, ds, "rl_testtime", env_test)
            acc[("CL", cond)] = evaluate(cl, ds)
        stage = "trace"
        ids = np.arange(min(cfg.run.traces, len(distorted)))
        traces = collect_traces(rl, distorted, env_test, ids, chains)
    except Exception as exc:
        raise RuntimeError(f"run {run_index} failed in stage {stage}: {exc}") from exc
    return RunResult(seed, acc, nn, rl, cl, traces, test, distorted, chains, stats)


def run_experiment(cfg: ExperimentConfig, on_run=None):
    """All runs of the NN / RL / CL comparison; returns the report and the
    per-run results (traces included)."""
    cfg.validate()
    datasets = load_datasets(cfg)
    name = "glyphs" if cfg.data.source == "glyphs" else "idx"
    report = MetricsReport(cfg.train.arch, name)
    results = []

    def collect(res):
        for (m, c), v in res.accuracies.items():
            report.add(m, c, v)
        results.append(res)
        if on_run is not None:
            on_run(res)

    if cfg.run.workers > 1:
        with ProcessPoolExecutor(cfg.run.workers) as pool:
            futures = [pool.submit(run_once, cfg, r, datasets) for r in range(cfg.run.runs)]
            for fut in futures:
                collect(fut.result())
    else:
        for r in range(cfg.run.runs):
            collect(run_once(cfg, r, datasets))
    return report, results


def _copy_state(state):
    return {k: v.copy() for k, v in state.items()}


# ---------------------------------------------------------------------------
# checkpoints: tensor file plus a JSON sidecar describing how to rebuild


def save_checkpoint(path, model, kind, **meta):
    path = Path(path)
    info = {"kind": kind, "k": int(model.k if kind == "rl" else model.output_shape[0]),
            "input_shape": list(model.input_shape), **meta}
    if kind == "rl":
        info.update(n=model.n, arch=model.arch)
    save_tensors(path, model.state())
    path.with_suffix(".json").write_text(json.dumps(info, indent=2) + "\n")
    return info


def load_checkpoint(path):
    """Returns ``(model, meta)``; RL checkpoints come back as a QNetwork."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise ValueError(f"{path}: missing metadata file {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta["input_shape"])
    if meta["kind"] == "rl":
        model = QNetwork.from_arch(meta["arch"], shape, meta["k"], meta["n"])
    elif meta["kind"] in ("nn", "cl"):
        model = build_classifier(meta["arch"], shape, meta["k"])
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {meta['kind']!r}")
    model.load_state(load_tensors(path))
    return model, meta
