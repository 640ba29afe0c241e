"""Ape-X style Q-learning at desk scale.

Several collectors, each with its own exploration rate and batch of
environments, push 3-step transitions into sharded prioritized replay. One
learner samples batches, takes double-Q steps with a dueling network and
periodically publishes parameter snapshots back to the collectors.

The default schedule interleaves collectors and learner in one thread, which
makes a run a pure function of its seed. ``threaded=True`` runs collectors in
their own threads instead.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .agents import act_epsilon_greedy
from .env import EnvConfig, Observation, VectorEnv, stack_observations, token_width
from .oracle import Oracle, ShapingConfig, load_oracle
from .qnet import QNetConfig, QNetwork, as_tensors, save_checkpoint, snapshot
from .space import SpaceSpec, load_spec, with_caps

PRIORITY_FLOOR = 1e-6


@dataclass
class TrainConfig:
    # search problem
    space: str = "nb101"
    max_vertices: int | None = None
    max_edges: int | None = None
    oracle: str = "synthetic"
    neighbor_cap: int = 50
    shaping_alpha: float = 6.0
    shaping_mode: str = "normalized"
    episode_length: int = 16
    # learning
    gamma: float = 0.9
    lr: float = 4e-5
    n_step: int = 3
    peb: bool = True
    batch_size: int = 64
    learning_starts: int = 1000
    train_every: int = 4  # environment steps per learner step
    target_sync: int = 2500  # learner steps
    publish_every: int = 50  # learner steps
    # replay
    capacity: int = 25_000
    shards: int = 4
    priority_alpha: float = 0.6
    beta: float = 0.4
    # exploration
    workers: int = 8
    envs_per_worker: int = 4
    epsilon: float = 0.4
    epsilon_alpha: float = 7.0
    # network
    latent: int | None = None  # 256, or 512 for the nb301 preset
    heads: int = 4
    blocks: int = 2
    positional: bool = True
    # run
    total_timesteps: int = 200_000
    log_every: int = 5_000
    checkpoint_every: int = 50_000
    seed: int = 0
    threaded: bool = False
    out_dir: str = "runs/train"

    def __post_init__(self):
        if self.latent is None:
            self.latent = 512 if self.space == "nb301" else 256
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("capacity", "shards", "workers", "envs_per_worker", "batch_size", "n_step",
                     "train_every", "target_sync", "publish_every", "total_timesteps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def space_spec(self) -> SpaceSpec:
        spec = load_spec(self.space)
        caps = {k: v for k, v in (("max_vertices", self.max_vertices), ("max_edges", self.max_edges)) if v is not None}
        return with_caps(spec, **caps) if caps else spec

    def env_config(self, seed: int | None = None) -> EnvConfig:
        return EnvConfig(
            spec=self.space_spec(),
            neighbor_cap=self.neighbor_cap,
            shaping=ShapingConfig(self.shaping_alpha, self.shaping_mode),
            max_steps=self.episode_length,
            gamma=self.gamma,
            seed=self.seed if seed is None else seed,
        )

    def qnet_config(self) -> QNetConfig:
        spec = self.space_spec()
        return QNetConfig(token_width=token_width(spec), num_slots=1 + self.neighbor_cap, latent=self.latent,
                          heads=self.heads, blocks=self.blocks, positional=self.positional)


def load_train_config(path: str | Path) -> TrainConfig:
    raw = json.loads(Path(path).read_text())
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown training config keys: {', '.join(unknown)}")
    return TrainConfig(**raw)


def epsilon_for_worker(i: int, num_workers: int, epsilon: float = 0.4, alpha: float = 7.0) -> float:
    """``epsilon ** (1 + alpha * i / (num_workers - 1))``; a lone worker gets ``epsilon``."""
    if not 0 <= i < num_workers:
        raise ValueError(f"worker index {i} outside [0, {num_workers})")
    if num_workers == 1:
        return epsilon
    return epsilon ** (1.0 + alpha * i / (num_workers - 1))


@dataclass
class Step:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminated: bool
    truncated: bool


@dataclass
class NStepEntry:
    obs: Observation
    action: int
    reward: float  # discounted sum of the realized rewards
    next_obs: Observation  # observation m steps later
    discount: float  # gamma ** m
    terminated: bool  # True drops the bootstrap term


def assemble_nstep(trajectory: Sequence[Step], n: int = 3, gamma: float = 0.9, peb: bool = True) -> list[NStepEntry]:
    """Turn a finished episode into n-step transitions.

    Truncation keeps the bootstrap term (partial-episode bootstrapping); with
    ``peb=False`` a truncated window end is treated as terminal.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    last = trajectory[-1]
    if not (last.terminated or last.truncated):
        raise ValueError("trajectory is not complete")
    if any(s.terminated or s.truncated for s in trajectory[:-1]):
        raise ValueError("episode end flagged before the final step")
    T = len(trajectory)
    out = []
    for t in range(T):
        m = min(n, T - t)
        ret = 0.0
        for k in range(m):
            ret += gamma**k * trajectory[t + k].reward
        end = trajectory[t + m - 1]
        done = end.terminated or (end.truncated and not peb)
        out.append(NStepEntry(trajectory[t].obs, trajectory[t].action, ret, end.next_obs, gamma**m, done))
    return out


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_tokens: np.ndarray
    next_mask: np.ndarray
    discount: np.ndarray
    terminated: np.ndarray


class ReplayShard:
    """Fixed-capacity FIFO ring of n-step entries with priorities.

    Every slot carries a write id so priority updates for entries evicted in
    the meantime are dropped instead of landing on their replacements.
    """

    def __init__(self, capacity: int, slots: int, width: int):
        self.capacity = capacity
        self.tokens = np.zeros((capacity, slots, width), dtype=np.uint8)
        self.mask = np.zeros((capacity, slots), dtype=bool)
        self.next_tokens = np.zeros_like(self.tokens)
        self.next_mask = np.zeros_like(self.mask)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.discount = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.priority = np.zeros(capacity)
        self.uid = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.pos = 0
        self.written = 0
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add(self, entries: Sequence[NStepEntry], priorities: Sequence[float]) -> None:
        with self.lock:
            for e, p in zip(entries, priorities):
                i = self.pos
                self.tokens[i] = e.obs.tokens
                self.mask[i] = e.obs.action_mask
                self.next_tokens[i] = e.next_obs.tokens
                self.next_mask[i] = e.next_obs.action_mask
                self.action[i] = e.action
                self.reward[i] = e.reward
                self.discount[i] = e.discount
                self.terminated[i] = e.terminated
                self.priority[i] = max(float(p), PRIORITY_FLOOR)
                self.uid[i] = self.written
                self.written += 1
                self.pos = (self.pos + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)

    def update(self, idx: np.ndarray, uids: np.ndarray, priorities: np.ndarray) -> None:
        with self.lock:
            live = self.uid[idx] == uids
            self.priority[idx[live]] = np.maximum(priorities[live], PRIORITY_FLOOR)


class ShardedReplay:
    def __init__(self, capacity: int, shards: int, slots: int, width: int):
        per = math.ceil(capacity / shards)
        self.shards = [ReplayShard(per, slots, width) for _ in range(shards)]

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards)

    @property
    def capacity(self) -> int:
        return sum(s.capacity for s in self.shards)

    def add(self, shard: int, entries: Sequence[NStepEntry], priorities: Sequence[float]) -> None:
        self.shards[shard % len(self.shards)].add(entries, priorities)

    def update_priorities(self, handles, priorities: np.ndarray) -> None:
        shard_ids, idx, uids = handles
        for s, shard in enumerate(self.shards):
            sel = shard_ids == s
            if sel.any():
                shard.update(idx[sel], uids[sel], priorities[sel])


def sample_batch(buffer: ShardedReplay, batch_size: int, rng: np.random.Generator,
                 alpha: float = 0.6, beta: float = 0.4):
    """Prioritized draw across shards.

    Each draw picks a shard with probability proportional to its mass
    ``sum p ** alpha`` and then an entry within it proportional to ``p ** alpha``,
    so overall ``P(i) = p_i ** alpha / sum_j p_j ** alpha``. Importance weights
    ``(K * P(i)) ** -beta`` are divided by their largest possible value over
    the whole buffer.

    Returns ``(batch, weights, handles)``; ``handles`` feeds
    :meth:`ShardedReplay.update_priorities`.
    """
    locks = [s.lock for s in buffer.shards]
    for lk in locks:
        lk.acquire()
    try:
        scaled = [s.priority[:s.size] ** alpha for s in buffer.shards]
        mass = np.array([p.sum() for p in scaled])
        total = mass.sum()
        if total <= 0:
            raise ValueError("cannot sample from an empty replay buffer")
        K = sum(s.size for s in buffer.shards)
        counts = rng.multinomial(batch_size, mass / total)
        shard_ids, idx = [], []
        for s, (c, p) in enumerate(zip(counts, scaled)):
            if c:
                idx.append(rng.choice(len(p), size=c, p=p / p.sum()))
                shard_ids.append(np.full(c, s))
        shard_ids = np.concatenate(shard_ids)
        idx = np.concatenate(idx)
        probs = np.array([scaled[s][i] for s, i in zip(shard_ids, idx)]) / total
        p_min = min(p.min() for p in scaled if len(p)) / total
        weights = (K * probs) ** (-beta) / (K * p_min) ** (-beta)

        def take(name):
            return np.stack([getattr(buffer.shards[s], name)[i] for s, i in zip(shard_ids, idx)])

        batch = Batch(take("tokens"), take("mask"), take("action"), take("reward"),
                      take("next_tokens"), take("next_mask"), take("discount"), take("terminated"))
        uids = take("uid")
    finally:
        for lk in locks:
            lk.release()
    return batch, weights, (shard_ids, idx, uids)


def double_q_targets(reward: torch.Tensor, discount: torch.Tensor, terminated: torch.Tensor,
                     q_online_next: torch.Tensor, q_target_next: torch.Tensor) -> torch.Tensor:
    """``R + discount * Q_target(s', argmax_a Q_online(s', a))``, zero bootstrap when terminated."""
    best = q_online_next.argmax(dim=-1, keepdim=True)
    boot = q_target_next.gather(-1, best).squeeze(-1)
    boot = torch.where(terminated, torch.zeros_like(boot), boot)
    return reward + discount * boot


def _batch_tensors(batch: Batch, dtype: torch.dtype):
    return (
        torch.as_tensor(batch.tokens, dtype=dtype),
        torch.as_tensor(batch.mask),
        torch.as_tensor(batch.action),
        torch.as_tensor(batch.reward, dtype=dtype),
        torch.as_tensor(batch.next_tokens, dtype=dtype),
        torch.as_tensor(batch.next_mask),
        torch.as_tensor(batch.discount, dtype=dtype),
        torch.as_tensor(batch.terminated),
    )


def train_step(batch: Batch, weights: np.ndarray, online: QNetwork, target: QNetwork,
               optimizer: torch.optim.Optimizer) -> tuple[float, np.ndarray]:
    """One importance-weighted Huber step; returns the loss and new priorities."""
    dtype = next(online.parameters()).dtype
    tok, mask, action, reward, ntok, nmask, discount, terminated = _batch_tensors(batch, dtype)
    with torch.no_grad():
        y = double_q_targets(reward, discount, terminated, online(ntok, nmask), target(ntok, nmask))
    q = online(tok, mask).gather(-1, action.unsqueeze(-1)).squeeze(-1)
    w = torch.as_tensor(weights, dtype=dtype)
    loss = (w * F.huber_loss(q, y, reduction="none", delta=1.0)).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()}: q range [{q.min().item()}, {q.max().item()}], "
            f"target range [{y.min().item()}, {y.max().item()}]"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    td = (q.detach() - y).abs().double().numpy()
    return float(loss.item()), td + PRIORITY_FLOOR


def initial_priorities(entries: Sequence[NStepEntry], net: QNetwork) -> np.ndarray:
    """|TD error| under the collector's snapshot, used as both online and target network."""
    obs = stack_observations([e.obs for e in entries])
    nxt = stack_observations([e.next_obs for e in entries])
    batch = Batch(obs[0], obs[1], np.array([e.action for e in entries]), np.array([e.reward for e in entries]),
                  nxt[0], nxt[1], np.array([e.discount for e in entries]), np.array([e.terminated for e in entries]))
    dtype = next(net.parameters()).dtype
    tok, mask, action, reward, ntok, nmask, discount, terminated = _batch_tensors(batch, dtype)
    with torch.no_grad():
        qn = net(ntok, nmask)
        y = double_q_targets(reward, discount, terminated, qn, qn)
        q = net(tok, mask).gather(-1, action.unsqueeze(-1)).squeeze(-1)
    return (q - y).abs().double().numpy() + PRIORITY_FLOOR


class Worker:
    """One collector: a vector of environments acting epsilon-greedily on a snapshot."""

    def __init__(self, index: int, epsilon: float, env: VectorEnv, net: QNetwork, cfg: TrainConfig,
                 rng: np.random.Generator):
        self.index = index
        self.epsilon = epsilon
        self.env = env
        self.net = net
        self.cfg = cfg
        self.rng = rng
        self.obs = env.reset()
        self.trajectories: list[list[Step]] = [[] for _ in range(len(env))]
        self.visited: list[float] = []

    def collect(self) -> list[NStepEntry]:
        """Advance every environment one step; return entries of episodes that ended."""
        tokens, mask = stack_observations(self.obs)
        dtype = next(self.net.parameters()).dtype
        with torch.no_grad():
            q = self.net(*as_tensors(tokens, mask, dtype)).double().numpy()
        actions = [act_epsilon_greedy(q[i], mask[i], self.epsilon, self.rng) for i in range(len(self.obs))]
        obs, rewards, terms, truncs, infos = self.env.step(actions)
        finished = []
        for i, (a, r, term, trunc, info) in enumerate(zip(actions, rewards, terms, truncs, infos)):
            nxt = info["final_observation"] if info else obs[i]
            self.trajectories[i].append(Step(self.obs[i], a, float(r), nxt, bool(term), bool(trunc)))
            self.visited.append(info["final_accuracy"] if info else self.env.envs[i].current_acc)
            if term or trunc:
                finished.extend(assemble_nstep(self.trajectories[i], self.cfg.n_step, self.cfg.gamma, self.cfg.peb))
                self.trajectories[i] = []
        self.obs = obs
        return finished

    def drain_visited(self) -> list[float]:
        out, self.visited = self.visited, []
        return out


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    log_path: Path | None = None
    env_steps: int = 0
    learner_steps: int = 0


def build_network(cfg: TrainConfig) -> QNetwork:
    torch.manual_seed(cfg.seed)
    return QNetwork(cfg.qnet_config())


def run_training(cfg: TrainConfig, env_factory: Callable[[EnvConfig, Oracle, int], VectorEnv] | None = None,
                 oracle: Oracle | None = None) -> TrainResult:
    spec = cfg.space_spec()
    oracle = oracle if oracle is not None else load_oracle(cfg.oracle, spec)
    env_factory = env_factory or (lambda ecfg, orc, n: VectorEnv(ecfg, orc, n))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")

    online = build_network(cfg)
    target = snapshot(online)
    optimizer = torch.optim.Adam(online.parameters(), lr=cfg.lr)
    qcfg = online.cfg
    replay = ShardedReplay(cfg.capacity, cfg.shards, qcfg.num_slots, qcfg.token_width)

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.workers + 1)
    learner_rng = np.random.default_rng(seeds[-1])
    epsilons = [epsilon_for_worker(i, cfg.workers, cfg.epsilon, cfg.epsilon_alpha) for i in range(cfg.workers)]
    workers = []
    for i in range(cfg.workers):
        env_seed = int(seeds[i].generate_state(1)[0])
        env = env_factory(cfg.env_config(env_seed), oracle, cfg.envs_per_worker)
        workers.append(Worker(i, epsilons[i], env, snapshot(online), cfg, np.random.default_rng(seeds[i])))

    result = TrainResult(log_path=out / "train_log.jsonl")
    state = {"env_steps": 0, "learner_steps": 0, "losses": [], "next_log": cfg.log_every,
             "next_ckpt": cfg.checkpoint_every, "logged": 0}
    log_fh = open(result.log_path, "w")

    def checkpoint() -> None:
        path = out / f"ckpt_{state['env_steps']:09d}.bin"
        save_checkpoint(online, path, {"train": asdict(cfg), "env_steps": state["env_steps"],
                                       "learner_steps": state["learner_steps"]})
        if path not in result.checkpoints:
            result.checkpoints.append(path)

    def write_log() -> None:
        visited = [a for w in workers for a in w.drain_visited()]
        losses, state["losses"] = state["losses"], []
        rec = {
            "step": state["env_steps"],
            "learner_steps": state["learner_steps"],
            "mean_accuracy": float(np.mean(visited)) if visited else None,
            "loss": float(np.mean(losses)) if losses else None,
            "epsilons": epsilons,
            "buffer_size": len(replay),
        }
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()
        state["logged"] = state["env_steps"]

    def push(worker: Worker, entries: list[NStepEntry]) -> None:
        if entries:
            replay.add(worker.index, entries, initial_priorities(entries, worker.net))

    def learn() -> None:
        batch, weights, handles = sample_batch(replay, cfg.batch_size, learner_rng, cfg.priority_alpha, cfg.beta)
        loss, prios = train_step(batch, weights, online, target, optimizer)
        replay.update_priorities(handles, prios)
        state["losses"].append(loss)
        state["learner_steps"] += 1
        n = state["learner_steps"]
        if n % cfg.target_sync == 0:
            target.load_state_dict(online.state_dict())
        if n % cfg.publish_every == 0:
            published = snapshot(online)
            for w in workers:
                w.net = published

    def bookkeeping() -> None:
        if state["env_steps"] >= state["next_log"]:
            write_log()
            state["next_log"] += cfg.log_every
        if state["env_steps"] >= state["next_ckpt"]:
            checkpoint()
            state["next_ckpt"] += cfg.checkpoint_every

    try:
        if cfg.threaded:
            _run_threaded(cfg, workers, replay, state, push, learn, bookkeeping)
        else:
            owed = 0.0
            while state["env_steps"] < cfg.total_timesteps:
                for w in workers:
                    push(w, w.collect())
                    state["env_steps"] += len(w.env)
                    owed += len(w.env) / cfg.train_every
                if state["env_steps"] >= cfg.learning_starts and len(replay) >= cfg.batch_size:
                    while owed >= 1:
                        learn()
                        owed -= 1
                else:
                    owed = 0.0
                bookkeeping()
        if state["logged"] < state["env_steps"]:
            write_log()
        checkpoint()
    finally:
        log_fh.close()
    result.env_steps = state["env_steps"]
    result.learner_steps = state["learner_steps"]
    return result


def _run_threaded(cfg, workers, replay, state, push, learn, bookkeeping) -> None:
    stop = threading.Event()
    errors: list[BaseException] = []
    counter = threading.Lock()

    def collector(w: Worker) -> None:
        try:
            while not stop.is_set():
                entries = w.collect()
                push(w, entries)
                with counter:
                    state["env_steps"] += len(w.env)
                    if state["env_steps"] >= cfg.total_timesteps:
                        stop.set()
        except BaseException as exc:  # surfaced by the learner loop
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=collector, args=(w,), daemon=True) for w in workers]
    for t in threads:
        t.start()
    try:
        while not stop.is_set():
            ready = state["env_steps"] >= cfg.learning_starts and len(replay) >= cfg.batch_size
            if ready and state["learner_steps"] < state["env_steps"] / cfg.train_every:
                learn()
            else:
                stop.wait(0.001)
            bookkeeping()
    finally:
        stop.set()
        for t in threads:
            t.join()
    if errors:
        raise RuntimeError(f"collector failed: {errors[0]!r}") from errors[0]
