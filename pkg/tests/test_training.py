import json

import numpy as np
import pytest
import torch
from scipy import stats

from incnas.env import Observation
from incnas.qnet import QNetConfig, QNetwork, read_tensors
from incnas.training import (
    PRIORITY_FLOOR,
    NStepEntry,
    ShardedReplay,
    Step,
    TrainConfig,
    assemble_nstep,
    double_q_targets,
    epsilon_for_worker,
    load_train_config,
    run_training,
    sample_batch,
    train_step,
)

# 0.4 ** 8, evaluated by hand
EPS_LAST = 6.5536e-4
# 8 ** 0.6
RATIO_8 = 3.48


def obs(tag, slots=3, width=4):
    t = np.zeros((slots, width), dtype=np.uint8)
    t[0, tag % width] = 1
    return Observation(t, np.ones(slots, dtype=bool))


def trajectory(rewards, end="terminated"):
    steps = []
    for i, r in enumerate(rewards):
        last = i == len(rewards) - 1
        steps.append(Step(obs(i), 1, r, obs(i + 1), last and end == "terminated", last and end == "truncated"))
    return steps


def test_epsilon_schedule():
    assert epsilon_for_worker(0, 8, 0.4, 7) == 0.4
    assert epsilon_for_worker(7, 8, 0.4, 7) == pytest.approx(EPS_LAST, rel=1e-12)
    assert epsilon_for_worker(7, 8, 0.4, 7) == 0.4**8
    for n in range(2, 12):
        assert epsilon_for_worker(0, n, 0.3, 5) == 0.3
    assert epsilon_for_worker(0, 1, 0.4, 7) == 0.4
    eps = [epsilon_for_worker(i, 8) for i in range(8)]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    with pytest.raises(ValueError):
        epsilon_for_worker(8, 8)


def test_nstep_worked_example():
    traj = trajectory([1.0, 0.0, 2.0, 5.0], end="truncated")
    e = assemble_nstep(traj, n=3, gamma=0.9)[0]
    assert e.discount == pytest.approx(0.729)
    assert not e.terminated
    assert e.reward + e.discount * 10.0 == pytest.approx(9.91, abs=1e-12)
    assert e.next_obs is traj[2].next_obs


def test_nstep_terminal_window():
    entries = assemble_nstep(trajectory([0.5, 0.25]), n=3, gamma=0.9)
    assert entries[1].terminated and entries[1].discount == pytest.approx(0.9)
    assert entries[1].reward == 0.25
    assert entries[0].terminated and entries[0].reward == pytest.approx(0.5 + 0.9 * 0.25)


def test_nstep_truncation_keeps_bootstrap():
    traj = trajectory([0.1] * 16, end="truncated")
    entries = assemble_nstep(traj, n=3, gamma=0.9)
    assert len(entries) == 16
    assert not any(e.terminated for e in entries)
    assert entries[15].discount == pytest.approx(0.9)
    assert entries[15].next_obs is traj[15].next_obs


def test_peb_toggle_differs_by_bootstrap_terms():
    traj = trajectory([0.3, -0.1, 0.2, 0.4, 0.05], end="truncated")
    on = assemble_nstep(traj, n=3, gamma=0.9, peb=True)
    off = assemble_nstep(traj, n=3, gamma=0.9, peb=False)
    q_boot = 1.7
    for t, (a, b) in enumerate(zip(on, off)):
        ya = a.reward + (0.0 if a.terminated else a.discount * q_boot)
        yb = b.reward + (0.0 if b.terminated else b.discount * q_boot)
        crosses = t + 3 >= len(traj)
        assert (ya - yb) == pytest.approx(a.discount * q_boot if crosses else 0.0)


def test_nstep_rejects_incomplete():
    with pytest.raises(ValueError):
        assemble_nstep(trajectory([1.0, 2.0], end="none"))
    with pytest.raises(ValueError):
        assemble_nstep([])
    broken = trajectory([1.0, 2.0])
    broken[0].terminated = True
    with pytest.raises(ValueError):
        assemble_nstep(broken)


def entry(tag, action=1):
    return NStepEntry(obs(tag), action, float(tag), obs(tag + 1), 0.81, False)


def filled(priorities, shards=1):
    buf = ShardedReplay(len(priorities) * 2, shards, 3, 4)
    for i, p in enumerate(priorities):
        buf.add(i, [entry(i)], [p])
    return buf


def test_equal_priorities_and_unit_weights():
    buf = filled([1.0, 1.0])
    rng = np.random.default_rng(0)
    counts = np.zeros(2)
    for _ in range(200):
        batch, w, _ = sample_batch(buf, 50, rng)
        assert np.allclose(w, 1.0)
        counts += np.bincount(batch.reward.astype(int), minlength=2)
    assert stats.chisquare(counts).pvalue > 0.01


def test_priority_law_eight_to_one():
    buf = filled([8.0, 1.0])
    rng = np.random.default_rng(1)
    counts = np.zeros(2)
    for _ in range(100):
        batch, _, _ = sample_batch(buf, 1000, rng)
        counts += np.bincount(batch.reward.astype(int), minlength=2)
    p = np.array([8.0**0.6, 1.0])
    assert p[0] == pytest.approx(RATIO_8, abs=5e-3)
    assert stats.chisquare(counts, counts.sum() * p / p.sum()).pvalue > 0.01


def test_importance_weights():
    buf = filled([8.0, 1.0])
    batch, w, _ = sample_batch(buf, 200, np.random.default_rng(2))
    probs = np.where(batch.reward == 0, 8.0**0.6, 1.0) / (8.0**0.6 + 1.0)
    expected = (2 * probs) ** -0.4 / (2 * (1.0 / (8.0**0.6 + 1.0))) ** -0.4
    assert np.allclose(w, expected)
    assert w.max() == pytest.approx(1.0)


def test_shards_sampled_by_mass():
    buf = ShardedReplay(8, 2, 3, 4)
    buf.add(0, [entry(0)], [4.0])
    buf.add(1, [entry(1), entry(2), entry(3)], [1.0, 1.0, 1.0])
    rng = np.random.default_rng(3)
    counts = np.zeros(4)
    for _ in range(50):
        batch, _, _ = sample_batch(buf, 1000, rng)
        counts += np.bincount(batch.reward.astype(int), minlength=4)
    p = np.array([4.0**0.6, 1, 1, 1])
    assert stats.chisquare(counts, counts.sum() * p / p.sum()).pvalue > 0.01


def test_empty_buffer():
    with pytest.raises(ValueError):
        sample_batch(ShardedReplay(4, 2, 3, 4), 2, np.random.default_rng(0))


def test_fifo_eviction_and_stale_updates():
    buf = ShardedReplay(4, 1, 3, 4)
    buf.add(0, [entry(i) for i in range(3)], [1.0] * 3)
    batch, _, handles = sample_batch(buf, 5, np.random.default_rng(0))
    buf.add(0, [entry(i) for i in range(3, 7)], [2.0] * 4)
    assert len(buf) == 4 == buf.capacity
    assert sorted(buf.shards[0].reward.tolist()) == [3.0, 4.0, 5.0, 6.0]
    buf.update_priorities(handles, np.full(5, 100.0))
    assert buf.shards[0].priority.tolist() == [2.0] * 4
    batch, _, handles = sample_batch(buf, 3, np.random.default_rng(1))
    buf.update_priorities(handles, np.zeros(3))
    assert buf.shards[0].priority.min() == PRIORITY_FLOOR


def test_double_q_targets():
    r = torch.tensor([2.62, 0.5, 1.0], dtype=torch.float64)
    disc = torch.tensor([0.729, 0.9, 0.81], dtype=torch.float64)
    term = torch.tensor([False, True, False])
    online = torch.tensor([[0.0, 5.0, 1.0], [9.0, 0.0, 0.0], [3.0, 1.0, float("-inf")]], dtype=torch.float64)
    target = torch.tensor([[7.0, 10.0, 99.0], [4.0, 4.0, 4.0], [2.0, 8.0, 0.0]], dtype=torch.float64)
    y = double_q_targets(r, disc, term, online, target)
    assert y[0].item() == pytest.approx(9.91, abs=1e-12)
    assert y[1].item() == 0.5
    assert y[2].item() == pytest.approx(1.0 + 0.81 * 2.0)
    # degenerate case: identical networks, one action, equals plain Q-learning
    q = torch.tensor([[3.0]], dtype=torch.float64)
    assert double_q_targets(r[:1], disc[:1], term[:1], q, q).item() == pytest.approx(2.62 + 0.729 * 3.0)


def tiny_net(seed=0):
    torch.manual_seed(seed)
    return QNetwork(QNetConfig(4, 3, latent=8, heads=2, blocks=1))


def batch_of(entries):
    buf = ShardedReplay(len(entries), 1, 3, 4)
    buf.add(0, entries, [1.0] * len(entries))
    return sample_batch(buf, len(entries), np.random.default_rng(0))


def test_train_step_terminated_target_and_priorities():
    e = NStepEntry(obs(0), 2, 0.37, obs(1), 0.9, True)
    batch, w, _ = batch_of([e])
    net, target = tiny_net(), tiny_net(1)
    with torch.no_grad():
        q_before = net(torch.as_tensor(batch.tokens, dtype=torch.float32), torch.as_tensor(batch.mask))[0, 2].item()
    opt = torch.optim.SGD(net.parameters(), lr=0.0)
    loss, prios = train_step(batch, w, net, target, opt)
    assert prios[0] == pytest.approx(abs(q_before - 0.37) + PRIORITY_FLOOR, rel=1e-5)
    d = q_before - 0.37
    huber = 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5
    assert loss == pytest.approx(huber, rel=1e-5)


def test_train_step_rejects_non_finite():
    e = NStepEntry(obs(0), 1, float("nan"), obs(1), 0.9, True)
    batch, w, _ = batch_of([e])
    net = tiny_net()
    with pytest.raises(FloatingPointError):
        train_step(batch, w, net, tiny_net(), torch.optim.SGD(net.parameters(), lr=0.1))


def test_train_step_moves_q_towards_target():
    e = NStepEntry(obs(0), 1, 1.0, obs(1), 0.9, True)
    batch, w, _ = batch_of([e] * 4)
    net = tiny_net()
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    losses = [train_step(batch, w, net, tiny_net(), opt)[0] for _ in range(50)]
    assert losses[-1] < losses[0]


def tiny_config(tmp_path, **kw):
    base = dict(max_vertices=4, max_edges=5, neighbor_cap=8, latent=16, heads=2, blocks=1, workers=2,
                envs_per_worker=2, shards=2, capacity=500, batch_size=8, learning_starts=40, train_every=2,
                target_sync=10, publish_every=5, total_timesteps=240, log_every=80, checkpoint_every=120,
                lr=1e-3, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


def test_run_training_liveness(tmp_path):
    res = run_training(tiny_config(tmp_path))
    assert len(res.checkpoints) >= 1 and all(p.exists() for p in res.checkpoints)
    assert res.env_steps >= 240 and res.learner_steps > 0
    log = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    assert log
    for rec in log:
        assert 0.0 <= rec["mean_accuracy"] <= 1.0
        assert rec["buffer_size"] <= 500
        assert len(rec["epsilons"]) == 2


def test_zero_learning_rate_freezes_parameters(tmp_path):
    res = run_training(tiny_config(tmp_path, lr=0.0))
    first, last = read_tensors(res.checkpoints[0]), read_tensors(res.checkpoints[-1])
    assert first.keys() == last.keys()
    assert all(np.array_equal(first[k], last[k]) for k in first)
    assert res.checkpoints[0].read_bytes() == res.checkpoints[-1].read_bytes()


def test_training_is_reproducible(tmp_path):
    a = run_training(tiny_config(tmp_path / "a"))
    b = run_training(tiny_config(tmp_path / "b"))
    assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()
    assert a.log_path.read_text() == b.log_path.read_text()


def test_threaded_training_runs(tmp_path):
    res = run_training(tiny_config(tmp_path, threaded=True))
    assert res.env_steps >= 240
    assert res.checkpoints[-1].exists()


def test_worker_failure_keeps_partial_log(tmp_path):
    class Boom(Exception):
        pass

    calls = {"n": 0}

    def factory(ecfg, oracle, n):
        from incnas.env import VectorEnv

        env = VectorEnv(ecfg, oracle, n)
        step = env.step

        def flaky(actions):
            calls["n"] += 1
            if calls["n"] > 60:
                raise Boom()
            return step(actions)

        env.step = flaky
        return env

    cfg = tiny_config(tmp_path, log_every=40)
    with pytest.raises(Boom):
        run_training(cfg, env_factory=factory)
    lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert lines


def test_config_loading(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"max_vertices": 5, "lr": 0.001}))
    cfg = load_train_config(p)
    assert cfg.max_vertices == 5 and cfg.gamma == 0.9
    p.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ValueError):
        load_train_config(p)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(capacity=0)


def test_latent_width_follows_preset():
    assert TrainConfig().latent == 256
    assert TrainConfig(space="nb301").latent == 512
    assert TrainConfig(space="nb301", latent=64).latent == 64
