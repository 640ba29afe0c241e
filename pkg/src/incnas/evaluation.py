"""Evaluation protocol and statistics.

Episodes start from fixed initial-state sets. Query accounting charges one
query per episode, except for local search, which pays for every candidate it
is shown. Results are summarized as improvement histograms and
best-after-N-queries curves with bootstrap intervals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .agents import LOCAL, QAGENT, RANDOM, WALK, LocalSearchAgent, QAgent, RandomWalkAgent
from .env import EnvConfig, NASEnv
from .oracle import MissingEntryError, Oracle
from .qnet import QNetwork
from .space import Architecture, SpaceSpec, sample_uniform

EVAL_EPISODE_LENGTH = 32
HIST_RANGE = 0.125
HIST_BINS = 50
INTERVAL_LEVELS = (50, 80, 95)


@dataclass
class EpisodeRecord:
    algorithm: str
    run: int
    episode: int
    seed: int
    initial_digest: str
    initial_acc: float | None
    final_digest: str | None = None
    final_acc: float | None = None
    # one entry per decision: current digest and accuracy, chosen slot, candidates shown
    steps: list[dict] = field(default_factory=list)
    queries: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def improvement(self) -> float:
        return self.final_acc - self.initial_acc

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        return cls(**json.loads(line))


def charge_queries(algorithm: str, steps: Sequence[dict]) -> int:
    """Local search pays for every candidate it was shown; everything else pays 1 per episode."""
    if algorithm == LOCAL:
        return sum(int(s["candidates"]) for s in steps)
    return 1


def episode_seed(seed: int, run: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, run, episode]).generate_state(1)[0])


def make_agent(algorithm: str, rng: np.random.Generator, net: QNetwork | None = None):
    if algorithm == WALK:
        return RandomWalkAgent(rng)
    if algorithm == LOCAL:
        return LocalSearchAgent()
    if algorithm == QAGENT:
        if net is None:
            raise ValueError("the Q-agent needs a network")
        return QAgent(net, epsilon=0.0, rng=rng)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_episode(algorithm: str, initial: Architecture, env_cfg: EnvConfig, oracle: Oracle, seed: int,
                net: QNetwork | None = None, run: int = 0, episode: int = 0) -> EpisodeRecord:
    """One evaluation episode from a fixed initial state.

    A random-search episode draws one fresh architecture; its improvement is
    measured against the same initial state as the other algorithms.
    """
    rec = EpisodeRecord(algorithm, run, episode, seed, initial.hex, None)
    try:
        rec.initial_acc = oracle.validation_accuracy(initial)
        if algorithm == RANDOM:
            arch = sample_uniform(env_cfg.spec, np.random.default_rng(seed))
            rec.final_digest, rec.final_acc = arch.hex, oracle.validation_accuracy(arch)
            rec.queries = 1
            return rec
        env = NASEnv(env_cfg, oracle)
        obs = env.reset(initial, seed=seed)
        agent = make_agent(algorithm, np.random.default_rng([seed, 1]), net)
        while True:
            action = agent.act(env, obs)
            rec.steps.append({"digest": env.current.hex, "acc": env.current_acc, "action": action,
                              "candidates": len(env.candidates)})
            obs, _, terminated, truncated = env.step(action)
            if terminated or truncated:
                break
        rec.final_digest, rec.final_acc = env.current.hex, env.current_acc
        rec.queries = charge_queries(algorithm, rec.steps)
    except MissingEntryError as exc:
        rec.error = f"missing oracle entry {exc.args[0]}"
    return rec


def run_evaluation(algorithm: str, initial_set: Sequence[Architecture], spec: SpaceSpec, oracle: Oracle,
                   seed: int = 0, net: QNetwork | None = None, run: int = 0, neighbor_cap: int = 50,
                   max_steps: int = EVAL_EPISODE_LENGTH, env_cfg: EnvConfig | None = None) -> list[EpisodeRecord]:
    """One episode per initial state; the Q-agent acts greedily."""
    if env_cfg is None:
        env_cfg = EnvConfig(spec=spec, neighbor_cap=neighbor_cap, max_steps=max_steps, seed=seed)
    return [
        run_episode(algorithm, init, env_cfg, oracle, episode_seed(seed, run, i), net=net, run=run, episode=i)
        for i, init in enumerate(initial_set)
    ]


def generate_initial_set(spec: SpaceSpec, count: int, seed: int) -> list[Architecture]:
    rng = np.random.default_rng(seed)
    return [sample_uniform(spec, rng) for _ in range(count)]


def write_initial_set(archs: Iterable[Architecture], path: str | Path) -> None:
    Path(path).write_text("".join(a.to_text() + "\n" for a in archs))


def read_initial_set(path: str | Path) -> list[Architecture]:
    return [Architecture.from_text(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_records(records: Iterable[EpisodeRecord], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[EpisodeRecord]:
    return [EpisodeRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class ImprovementStats:
    count: int
    bin_edges: np.ndarray
    counts: np.ndarray
    below: int
    above: int
    median: float
    intervals: dict[int, tuple[float, float]]
    skew: float


def improvement_stats(records: Sequence[EpisodeRecord], bins: int = HIST_BINS,
                      limit: float = HIST_RANGE) -> ImprovementStats:
    """Histogram over ``[-limit, limit]``, median, central percentile intervals and skew.

    Values outside the range are counted in ``below``/``above``. Skew is the
    adjusted Fisher-Pearson coefficient and 0 for a constant sample.
    """
    x = np.sort(np.array([r.improvement for r in records if r.ok], dtype=float))
    if len(x) < 2:
        raise ValueError("improvement statistics need at least 2 completed episodes")
    edges = np.linspace(-limit, limit, bins + 1)
    inside = (x >= -limit) & (x <= limit)
    counts, _ = np.histogram(x[inside], bins=edges)
    intervals = {
        lvl: (float(np.percentile(x, 50 - lvl / 2)), float(np.percentile(x, 50 + lvl / 2)))
        for lvl in INTERVAL_LEVELS
    }
    if np.ptp(x) == 0 or len(x) < 3:
        skew = 0.0
    else:
        skew = float(stats.skew(x, bias=False))
    return ImprovementStats(len(x), edges, counts, int((x < -limit).sum()), int((x > limit).sum()),
                            float(np.median(x)), intervals, skew)


def bootstrap_ci(samples: Sequence[float], confidence: float = 0.95, resamples: int = 5000,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    means = np.empty(resamples)
    chunk = max(1, 2_000_000 // len(x))
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = rng.integers(0, len(x), size=(stop - start, len(x)))
        means[start:stop] = x[idx].mean(axis=1)
    tail = (1 - confidence) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


def query_events(records: Sequence[EpisodeRecord]) -> list[tuple[int, float]]:
    """(cumulative queries, accuracy obtained) for one run, in episode order.

    Local search contributes one event per decision: after paying for the
    candidates shown it holds the state it moved to (or kept). Other
    algorithms contribute one event per episode with its final accuracy.
    """
    events, spent = [], 0
    for r in sorted(records, key=lambda r: r.episode):
        if not r.ok:
            continue
        if r.algorithm == LOCAL:
            after = [s["acc"] for s in r.steps[1:]] + [r.final_acc]
            for s, acc in zip(r.steps, after):
                spent += int(s["candidates"])
                events.append((spent, acc))
        else:
            spent += r.queries
            events.append((spent, r.final_acc))
    return events


def best_so_far(events: Sequence[tuple[int, float]], budgets: Sequence[int]) -> np.ndarray:
    """Best accuracy reached within each budget; NaN where nothing was bought yet."""
    out = np.full(len(budgets), np.nan)
    if not events:
        return out
    spent = np.array([e[0] for e in events])
    best = np.maximum.accumulate(np.array([e[1] for e in events]))
    for j, b in enumerate(budgets):
        k = np.searchsorted(spent, b, side="right")
        if k:
            out[j] = best[k - 1]
    return out


@dataclass
class QueryCurve:
    budgets: np.ndarray
    values: np.ndarray  # (runs, budgets)
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray


def best_after_queries(runs: Sequence[Sequence[EpisodeRecord]], budgets: Sequence[int],
                       resamples: int = 5000, seed: int = 0) -> QueryCurve:
    """Per-run best-so-far curves with mean and bootstrap interval across runs.

    Budgets below 1 and budgets at which some run has not finished its first
    purchase are dropped.
    """
    budgets = np.array([b for b in budgets if b >= 1], dtype=int)
    values = np.array([best_so_far(query_events(r), budgets) for r in runs]).reshape(len(runs), len(budgets))
    keep = ~np.isnan(values).any(axis=0)
    budgets, values = budgets[keep], values[:, keep]
    rng = np.random.default_rng(seed)
    mean = values.mean(axis=0) if len(runs) else np.zeros(0)
    lo, hi = np.full(len(budgets), np.nan), np.full(len(budgets), np.nan)
    if len(runs) >= 2:
        for j in range(len(budgets)):
            lo[j], hi[j] = bootstrap_ci(values[:, j], resamples=resamples, rng=rng)
    return QueryCurve(budgets, values, mean, lo, hi)


def write_curve_csv(curve: QueryCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "mean", "ci_lo", "ci_hi"])
        for b, m, lo, hi in zip(curve.budgets, curve.mean, curve.ci_lo, curve.ci_hi):
            w.writerow([int(b), repr(float(m)), repr(float(lo)), repr(float(hi))])


def write_histogram_csv(st: ImprovementStats, path: str | Path) -> None:
    """Histogram rows, with the out-of-range mass as two open-ended rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        w.writerow(["-inf", repr(float(st.bin_edges[0])), st.below])
        for lo, hi, c in zip(st.bin_edges[:-1], st.bin_edges[1:], st.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([repr(float(st.bin_edges[-1])), "inf", st.above])


def summary_dict(st: ImprovementStats) -> dict:
    return {
        "count": st.count,
        "median": st.median,
        "intervals": {str(k): list(v) for k, v in st.intervals.items()},
        "skew": st.skew,
        "below_range": st.below,
        "above_range": st.above,
    }


def group_runs(records: Iterable[EpisodeRecord]) -> dict[str, list[list[EpisodeRecord]]]:
    """Records grouped by algorithm, then by run index."""
    by: dict[str, dict[int, list[EpisodeRecord]]] = {}
    for r in records:
        by.setdefault(r.algorithm, {}).setdefault(r.run, []).append(r)
    return {alg: [runs[k] for k in sorted(runs)] for alg, runs in sorted(by.items())}
