import numpy as np
import pytest

from prep_rl.agent import (EpsilonSchedule, QNetwork, QOutput, ReplayBuffer, Transition, bellman_target,
                           bellman_targets, dueling_combine, epsilon_at, q_forward, select_action,
                           sync_target, td_loss_and_grad, train_step)
from prep_rl.environment import Stop, Transform, action_index
from prep_rl.nn import Adam, LayerSpec
from oracles import bellman_scalar, binomial_band, dueling_scalar, numeric_grad, rel_error


def tiny_qnet(k=2, n=1, dtype=np.float64):
    """Flatten-only body on a 1x1x1 input: Q is linear in the single pixel."""
    net = QNetwork([LayerSpec("flatten")], (1, 1, 1), k, n, dtype=dtype)
    net.value.params["W"][:] = 0.5
    net.value.params["b"][:] = 0.0
    net.advantage.params["W"][:] = [[1.0, 0.0, -1.0]]
    net.advantage.params["b"][:] = 0.0
    return net


def small_qnet(seed=0, dtype=np.float64, k=3, n=5):
    return QNetwork.from_arch("arch1", (6, 6, 1), k, n, seed=seed, dtype=dtype)


class FixedQ:
    def __init__(self, q):
        self.q = np.asarray(q, dtype=float)

    def forward(self, x, train=False):
        return np.tile(self.q, (len(x), 1))


def test_dueling_arithmetic():
    np.testing.assert_array_equal(dueling_combine(np.array([[2.0]]), np.array([[1.0, 0.0, -1.0]])), [[3, 2, 1]])
    np.testing.assert_array_equal(dueling_combine(np.array([[-0.5]]), np.full((1, 4), 7.0)), [[-0.5] * 4])


def test_q_forward_matches_recombination_oracle():
    rng = np.random.default_rng(0)
    for seed in range(5):
        net = small_qnet(seed)
        x = rng.random((6, 6, 1))
        v, adv = net.branches(x[None])
        q = q_forward(net, x)
        assert q.stop_q.shape == (3,) and q.transform_q.shape == (5,)
        np.testing.assert_allclose(q.values, dueling_scalar(v[0, 0], list(adv[0])), rtol=0, atol=1e-12)


def test_q_forward_rejects_shape():
    with pytest.raises(ValueError):
        q_forward(small_qnet(), np.zeros((5, 6, 1)))


def test_advantage_shift_is_invisible():
    net = small_qnet(1)
    x = np.random.default_rng(1).random((4, 6, 6, 1))
    before = net.forward(x)
    net.advantage.params["b"] += 3.25
    np.testing.assert_allclose(net.forward(x), before, atol=1e-12)


def test_greedy_stop():
    q = QOutput(np.array([5.0, 1.0]), np.zeros(11))
    assert select_action(q, 0.0, np.random.default_rng(0)) == Stop(0)


def test_ties_go_to_lowest_index():
    q = QOutput(np.array([1.0, 2.0]), np.array([2.0, 2.0]))
    assert select_action(q, 0.0, None) == Stop(1)
    q = QOutput(np.array([1.0, 0.0]), np.array([0.0, 3.0, 3.0]))
    assert select_action(q, 0.0, None) == Transform(1)


def test_uniform_exploration():
    rng = np.random.default_rng(3)
    q = QOutput(np.arange(10.0), np.arange(11.0))
    counts = np.bincount([action_index(select_action(q, 1.0, rng), 10) for _ in range(100_000)], minlength=21)
    lo, hi = binomial_band(100_000, 1 / 21)
    assert np.all((counts >= lo) & (counts <= hi))


def test_test_mode_forced_stop():
    q = QOutput(np.array([0.1, 0.3, 0.2]), np.array([9.0, 8.0]))
    assert select_action(q, 0.5, None, "test", chain_len=10, max_len=10) == Stop(1)
    assert select_action(q, 0.5, None, "test", chain_len=3, max_len=10) == Transform(0)


def test_argmax_invariant_to_shift():
    rng = np.random.default_rng(4)
    for _ in range(50):
        stop, tr = rng.normal(size=4), rng.normal(size=6)
        c = rng.normal() * 10
        a = select_action(QOutput(stop, tr), 0.0, None)
        b = select_action(QOutput(stop + c, tr + c), 0.0, None)
        assert a == b


def test_bad_epsilon():
    with pytest.raises(ValueError):
        select_action(QOutput(np.zeros(2), np.zeros(1)), 1.5, None)


def test_bellman_examples():
    t = Transition(np.zeros((1, 1, 1)), Stop(0), 9.0, np.zeros((1, 1, 1)), True)
    assert bellman_target(t, FixedQ([100.0]), 0.99) == 9.0
    t = Transition(np.zeros((1, 1, 1)), Transform(0), 0.0, np.zeros((1, 1, 1)), False)
    assert bellman_target(t, FixedQ([1.0, 5.0, -2.0]), 0.99) == pytest.approx(4.95, abs=1e-12)
    with pytest.raises(ValueError):
        bellman_target(t, FixedQ([1.0]), 1.0)
    with pytest.raises(FloatingPointError):
        bellman_target(t, FixedQ([np.nan]), 0.5)


def test_bellman_batch_matches_scalar_loop():
    rng = np.random.default_rng(5)
    net = small_qnet(2)
    s2 = rng.random((40, 6, 6, 1))
    r = rng.choice([-1.0, 0.0, 2.0], size=40)
    done = rng.random(40) < 0.4
    batched = bellman_targets(r, s2, done, net, 0.9)
    q2 = net.forward(s2)
    for i in range(40):
        assert batched[i] == pytest.approx(bellman_scalar(r[i], done[i], list(q2[i]), 0.9), abs=1e-12)


def test_replay_buffer_ring():
    buf = ReplayBuffer(5, (1, 1, 1), k=2)
    for i in range(8):
        buf.add(Transition(np.full((1, 1, 1), i), Stop(0), float(i), np.zeros((1, 1, 1)), True))
        assert len(buf) <= 5
    assert sorted(buf.rewards.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    s, a, r, s2, d = buf.sample(5, np.random.default_rng(0))
    assert set(r.tolist()) <= {3.0, 4.0, 5.0, 6.0, 7.0}
    with pytest.raises(ValueError):
        ReplayBuffer(3, (1,), 2).sample(1, np.random.default_rng(0))


def test_epsilon_schedule():
    s = EpsilonSchedule(anneal_steps=1000)
    assert epsilon_at(s, 0) == 1.0
    assert epsilon_at(s, 500) == pytest.approx(0.55)
    assert epsilon_at(s, 1000) == pytest.approx(0.1)
    assert epsilon_at(s, 10**6) == pytest.approx(0.1)
    values = [epsilon_at(s, t) for t in range(0, 1200, 7)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def _one_transition_buffer(t):
    buf = ReplayBuffer(4, (1, 1, 1), k=2)
    buf.add(t)
    return buf


def test_train_step_hand_value():
    # Q(s=2) = V + A - mean A = 1 + [2, 0, -2] -> [3, 1, -1]
    # Q(s'=1) = 0.5 + [1, 0, -1] -> max 1.5; y = 0.9 * 1.5 = 1.35
    net, target = tiny_qnet(), tiny_qnet()
    t = Transition(np.full((1, 1, 1), 2.0), Transform(0), 0.0, np.full((1, 1, 1), 1.0), False)
    loss = train_step(net, target, _one_transition_buffer(t), 1, 0.9, Adam(lr=1e-3), np.random.default_rng(0))
    assert loss == pytest.approx((-1.0 - 1.35) ** 2, abs=1e-12)


def test_train_step_zero_error_leaves_params():
    net, target = tiny_qnet(), tiny_qnet()
    t = Transition(np.full((1, 1, 1), 2.0), Stop(0), 3.0, np.zeros((1, 1, 1)), True)
    before = {k: v.copy() for k, v in net.params().items()}
    loss = train_step(net, target, _one_transition_buffer(t), 1, 0.9, Adam(lr=1e-2, l2=0.0), np.random.default_rng(0))
    assert loss == 0.0
    for k, v in net.params().items():
        np.testing.assert_array_equal(v, before[k])


def test_train_step_needs_data():
    net = tiny_qnet()
    with pytest.raises(ValueError):
        train_step(net, net, ReplayBuffer(4, (1, 1, 1), 2), 2, 0.9, Adam(), np.random.default_rng(0))


def test_td_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    net = small_qnet(3)
    s = rng.random((5, 6, 6, 1))
    a = rng.integers(0, net.num_actions, size=5)
    y = rng.normal(size=5)
    q = net.forward(s)
    _, dq = td_loss_and_grad(q, a, y)
    qvar = q.copy()
    num_dq = numeric_grad(lambda: td_loss_and_grad(qvar, a, y)[0], qvar)
    assert rel_error(dq, num_dq) < 1e-6
    net.forward(s)
    net.backward(dq)
    grads = {k: v.copy() for k, v in net.grads().items()}
    for name, p in net.params().items():
        num = numeric_grad(lambda: td_loss_and_grad(net.forward(s), a, y)[0], p)
        assert rel_error(grads[name], num) < 1e-6, name


def test_sync_target():
    net, target = small_qnet(0), small_qnet(1)
    x = np.random.default_rng(7).random((3, 6, 6, 1))
    assert not np.array_equal(net.forward(x), target.forward(x))
    sync_target(net, target)
    assert net.forward(x).tobytes() == target.forward(x).tobytes()
    with pytest.raises(ValueError):
        sync_target(net, small_qnet(0, k=4))


def test_periodic_sync_bookkeeping():
    rng = np.random.default_rng(8)
    net, target = small_qnet(0), small_qnet(0)
    opt = Adam(lr=1e-2)
    buf = ReplayBuffer(64, (6, 6, 1), k=3)
    for _ in range(64):
        buf.add(Transition(rng.random((6, 6, 1)), int(rng.integers(0, 8)), float(rng.normal()),
                           rng.random((6, 6, 1)), bool(rng.random() < 0.5)))
    C = 3
    snapshot = {k: v.copy() for k, v in net.state().items()}
    for update in range(1, 11):
        train_step(net, target, buf, 8, 0.9, opt, rng)
        if update % C == 0:
            sync_target(net, target)
            snapshot = {k: v.copy() for k, v in net.state().items()}
        for k, v in target.state().items():
            assert v.tobytes() == snapshot[k].tobytes()
    assert any(not np.array_equal(net.state()[k], target.state()[k]) for k in snapshot)
