"""Search policies: random search, random walk, greedy local search and the Q-agent."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .env import NASEnv, Observation
from .oracle import Oracle
from .qnet import QNetwork, qnetwork_forward
from .space import Architecture, SpaceSpec, sample_uniform

RANDOM = "random"
WALK = "walk"
LOCAL = "local"
QAGENT = "qagent"
ALGORITHMS = (RANDOM, WALK, LOCAL, QAGENT)


def act_random_walk(obs: Observation, rng: np.random.Generator) -> int:
    """Uniform over every valid slot, terminate included."""
    valid = np.flatnonzero(obs.action_mask)
    return int(valid[rng.integers(len(valid))])


def act_local_search(current_acc: float, candidate_accs: Sequence[float]) -> int:
    """Slot of the best candidate if it strictly beats the current state, else 0.

    Ties go to the lowest slot.
    """
    if len(candidate_accs) == 0:
        return 0
    best = int(np.argmax(candidate_accs))
    return best + 1 if candidate_accs[best] > current_acc else 0


def act_epsilon_greedy(q: np.ndarray, mask: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if epsilon > 0 and rng.random() < epsilon:
        valid = np.flatnonzero(mask)
        return int(valid[rng.integers(len(valid))])
    return int(np.argmax(q))


def random_search(spec: SpaceSpec, oracle: Oracle, budget: int,
                  rng: np.random.Generator) -> tuple[Architecture, list[float]]:
    """Best of ``budget`` uniform samples, plus the running-best accuracy after each query."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    best, best_acc, curve = None, -np.inf, []
    for _ in range(budget):
        arch = sample_uniform(spec, rng)
        acc = oracle.validation_accuracy(arch)
        if acc > best_acc:
            best, best_acc = arch, acc
        curve.append(best_acc)
    return best, curve


class Agent:
    """Policy acting inside a :class:`NASEnv`.

    ``act`` may read the environment; the local search looks up the oracle
    accuracy of every presented candidate.
    """

    kind = ""

    def act(self, env: NASEnv, obs: Observation) -> int:
        raise NotImplementedError


class RandomWalkAgent(Agent):
    kind = WALK

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def act(self, env: NASEnv, obs: Observation) -> int:
        return act_random_walk(obs, self.rng)


class LocalSearchAgent(Agent):
    kind = LOCAL

    def act(self, env: NASEnv, obs: Observation) -> int:
        accs = [env.oracle.validation_accuracy(c) for c in env.candidates]
        return act_local_search(env.current_acc, accs)


class QAgent(Agent):
    """Acts on a frozen network snapshot; greedy unless ``epsilon`` > 0."""

    kind = QAGENT

    def __init__(self, net: QNetwork, epsilon: float = 0.0, rng: np.random.Generator | None = None):
        self.net = net
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def act(self, env: NASEnv, obs: Observation) -> int:
        q = qnetwork_forward(obs, self.net)
        return act_epsilon_greedy(q, obs.action_mask, self.epsilon, self.rng)
