"""The incremental architecture-search MDP.

A state is an architecture. Each step the agent sees the current architecture
plus up to ``N`` neighbors and either moves to one of them or terminates
(action 0). Moving yields the difference of shaped validation accuracies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .graph import CellGraph
from .neighbors import NeighborSet, neighbors
from .oracle import Oracle, ShapingConfig, shape
from .space import Architecture, SpaceSpec, sample_uniform, validate_architecture


@dataclass(frozen=True)
class EnvConfig:
    spec: SpaceSpec
    neighbor_cap: int = 50
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    max_steps: int = 16
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.neighbor_cap < 0:
            raise ValueError("neighbor_cap must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass(frozen=True)
class Observation:
    tokens: np.ndarray  # (1 + N, width) uint8
    action_mask: np.ndarray  # (1 + N,) bool


def cell_width(spec: SpaceSpec) -> int:
    gs = spec.graph_spec
    v = gs.max_vertices
    return v * (v - 1) // 2 + v * len(spec.labels)


def token_width(spec: SpaceSpec) -> int:
    return spec.cells_per_architecture * cell_width(spec)


def encode_graph(g: CellGraph, spec: SpaceSpec) -> np.ndarray:
    """Padded lower-triangular adjacency, row by row, then one-hot labels per vertex."""
    gs = spec.graph_spec
    v = gs.max_vertices
    if g.num_vertices > v:
        raise ValueError(f"cell with {g.num_vertices} vertices exceeds cap {v}")
    labels = spec.labels
    out = np.zeros(cell_width(spec), dtype=np.uint8)
    for s, d in g.edges:
        out[d * (d - 1) // 2 + s] = 1
    base = v * (v - 1) // 2
    index = {lab: i for i, lab in enumerate(labels)}
    for i, lab in enumerate(g.labels):
        out[base + i * len(labels) + index[lab]] = 1
    return out


def decode_graph(vec: np.ndarray, spec: SpaceSpec) -> CellGraph:
    gs = spec.graph_spec
    v = gs.max_vertices
    labels = spec.labels
    base = v * (v - 1) // 2
    groups = np.asarray(vec[base: base + v * len(labels)]).reshape(v, len(labels))
    n = int(groups.any(axis=1).sum())
    names = [labels[int(np.argmax(groups[i]))] for i in range(n)]
    edges = [(s, d) for d in range(1, n) for s in range(d) if vec[d * (d - 1) // 2 + s]]
    return CellGraph(n, edges, names)


def encode_architecture(arch: Architecture, spec: SpaceSpec) -> np.ndarray:
    return np.concatenate([encode_graph(g, spec) for g in arch.graphs])


def decode_architecture(vec: np.ndarray, spec: SpaceSpec) -> tuple[CellGraph, ...]:
    """Node graphs of an encoded token (edge cells come back in converted form)."""
    w = cell_width(spec)
    return tuple(decode_graph(vec[i * w:(i + 1) * w], spec) for i in range(spec.cells_per_architecture))


def encode_observation(current: Architecture, nbrs: NeighborSet, spec: SpaceSpec) -> Observation:
    cap = nbrs.cap
    tokens = np.zeros((1 + cap, token_width(spec)), dtype=np.uint8)
    mask = np.zeros(1 + cap, dtype=bool)
    tokens[0] = encode_architecture(current, spec)
    mask[0] = True
    for i, cand in enumerate(nbrs.candidates, start=1):
        tokens[i] = encode_architecture(cand, spec)
        mask[i] = True
    return Observation(tokens, mask)


class InvalidActionError(ValueError):
    pass


class NASEnv:
    """Single incremental-search environment.

    The environment owns its random source; sampling of initial states and of
    the presented neighbor subsets both draw from it, so ``(seed, actions)``
    determines the whole trajectory.
    """

    def __init__(self, cfg: EnvConfig, oracle: Oracle):
        self.cfg = cfg
        self.spec = cfg.spec
        self.oracle = oracle
        self.rng = np.random.default_rng(cfg.seed)
        self.current: Architecture | None = None
        self.neighbor_set: NeighborSet | None = None
        self.current_acc: float | None = None
        self.t = 0
        self.done = True

    def reset(self, initial: Architecture | None = None, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if initial is None:
            initial = sample_uniform(self.spec, self.rng)
        else:
            res = validate_architecture(initial, self.spec)
            if not res:
                raise ValueError(f"initial architecture invalid: {res.rule}: {res.detail}")
        self.current = initial
        self.current_acc = self.oracle.validation_accuracy(initial)
        self.t = 0
        self.done = False
        return self._observe()

    def _observe(self) -> Observation:
        self.neighbor_set = neighbors(self.current, self.spec, self.cfg.neighbor_cap, self.rng)
        return encode_observation(self.current, self.neighbor_set, self.spec)

    @property
    def candidates(self) -> tuple[Architecture, ...]:
        return self.neighbor_set.candidates

    def step(self, action: int) -> tuple[Observation, float, bool, bool]:
        if self.done:
            raise InvalidActionError("episode finished; call reset()")
        action = int(action)
        if not 0 <= action <= len(self.neighbor_set.candidates):
            raise InvalidActionError(f"action {action} is masked off")
        self.t += 1
        if action == 0:
            self.done = True
            obs = encode_observation(self.current, self.neighbor_set, self.spec)
            return obs, 0.0, True, False
        prev = self.current_acc
        self.current = self.neighbor_set.candidates[action - 1]
        self.current_acc = self.oracle.validation_accuracy(self.current)
        reward = shape(self.current_acc, self.cfg.shaping) - shape(prev, self.cfg.shaping)
        truncated = self.t >= self.cfg.max_steps
        self.done = truncated
        return self._observe(), reward, False, truncated


class VectorEnv:
    """A batch of independent environments stepped with one call.

    Finished environments reset automatically; the observation returned for
    them is the first observation of the new episode and the final one is in
    ``infos[i]["final_observation"]``.
    """

    def __init__(self, cfg: EnvConfig, oracle: Oracle, num_envs: int = 32):
        self.envs = [NASEnv(_reseed(cfg, cfg.seed * 1_000_003 + i), oracle) for i in range(num_envs)]

    def __len__(self) -> int:
        return len(self.envs)

    def reset(self) -> list[Observation]:
        return [env.reset() for env in self.envs]

    def step(self, actions: Sequence[int]):
        obs, rewards, terms, truncs, infos = [], [], [], [], []
        for env, a in zip(self.envs, actions):
            o, r, term, trunc = env.step(a)
            info = {}
            if term or trunc:
                info = {"final_observation": o, "final_accuracy": env.current_acc, "steps": env.t}
                o = env.reset()
            obs.append(o)
            rewards.append(r)
            terms.append(term)
            truncs.append(trunc)
            infos.append(info)
        return obs, np.array(rewards), np.array(terms), np.array(truncs), infos


def _reseed(cfg: EnvConfig, seed: int) -> EnvConfig:
    return replace(cfg, seed=seed)


def stack_observations(observations: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([o.tokens for o in observations]), np.stack([o.action_mask for o in observations]))


class EpisodeLog:
    """Line-delimited JSON log of environment steps."""

    def __init__(self, fh: IO[str]):
        self.fh = fh

    def write(self, episode: int, step: int, digest: str, action: int, reward: float,
              accuracy: float, terminated: bool, truncated: bool) -> None:
        rec = {
            "episode": episode,
            "step": step,
            "digest": digest,
            "action": action,
            "reward": reward,
            "val_acc": accuracy,
            "terminated": terminated,
            "truncated": truncated,
        }
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
