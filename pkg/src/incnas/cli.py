"""Command-line entry point: ``incnas <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .agents import ALGORITHMS, QAGENT
from .env import EnvConfig
from .neighbors import all_neighbors, neighbors
from .oracle import load_oracle
from .qnet import load_checkpoint
from .space import Architecture, enumerate_digests, load_spec, sample_uniform, validate_architecture, with_caps
from .training import TrainConfig, load_train_config, run_training


def _add_space_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--space", default="nb101", help="preset name (nb101, nb301) or JSON spec file")
    p.add_argument("--max-vertices", type=int, default=None)
    p.add_argument("--max-edges", type=int, default=None)


def _space(args):
    spec = load_spec(args.space)
    caps = {}
    if args.max_vertices is not None:
        caps["max_vertices"] = args.max_vertices
    if args.max_edges is not None:
        caps["max_edges"] = args.max_edges
    return with_caps(spec, **caps) if caps else spec


def _parse_arch(text: str, spec) -> Architecture:
    arch = Architecture.from_text(text)
    res = validate_architecture(arch, spec)
    if not res:
        raise SystemExit(f"invalid architecture ({res.rule}): {res.detail}")
    return arch


def cmd_enumerate(args) -> int:
    spec = _space(args)
    out = open(args.out, "w") if args.out else None
    count = 0
    try:
        for digest, _, _ in enumerate_digests(spec):
            count += 1
            if out:
                out.write(digest.hex() + "\n")
    finally:
        if out:
            out.close()
    print(count)
    return 0


def cmd_sample(args) -> int:
    spec = _space(args)
    rng = np.random.default_rng(args.seed)
    lines = [sample_uniform(spec, rng).to_text() for _ in range(args.count)]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_neighbors(args) -> int:
    spec = _space(args)
    arch = _parse_arch(args.arch, spec)
    if args.cap is None:
        found = all_neighbors(arch, spec)
    else:
        found = neighbors(arch, spec, args.cap, np.random.default_rng(args.seed)).candidates
    for a in found:
        print(f"{a.hex}\t{a.to_text()}")
    return 0


def cmd_oracle_eval(args) -> int:
    spec = _space(args)
    oracle = load_oracle(args.oracle, spec)
    texts = list(args.archs) + list(args.arch or [])
    if args.file:
        texts += [line for line in Path(args.file).read_text().splitlines() if line.strip()]
    print("digest,val_acc,test_acc")
    for text in texts:
        arch = _parse_arch(text, spec)
        m = oracle.query(arch)
        print(f"{arch.hex},{m.validation_accuracy!r},{'' if m.test_accuracy is None else repr(m.test_accuracy)}")
    return 0


def _net_and_spec(args):
    if args.checkpoint:
        net, side = load_checkpoint(args.checkpoint)
        tcfg = TrainConfig(**side["train"]) if "train" in side else None
        if tcfg is not None:
            return net, tcfg.space_spec(), tcfg.neighbor_cap, tcfg.oracle
        return net, _space(args), net.cfg.num_slots - 1, args.oracle
    return None, _space(args), args.neighbor_cap, args.oracle


def cmd_search(args) -> int:
    """Run one algorithm from fresh uniform initial states until the query budget is spent."""
    if args.algo == QAGENT and not args.checkpoint:
        raise SystemExit("--algo qagent needs --checkpoint")
    net, spec, cap, oracle_kind = _net_and_spec(args)
    oracle = load_oracle(oracle_kind, spec)
    env_cfg = EnvConfig(spec=spec, neighbor_cap=cap, max_steps=args.max_steps, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    records, spent, best, failed = [], 0, None, 0
    while spent < args.budget and failed < args.budget:
        i = len(records)
        initial = sample_uniform(spec, rng)
        rec = ev.run_episode(args.algo, initial, env_cfg, oracle, ev.episode_seed(args.seed, 0, i), net=net, episode=i)
        records.append(rec)
        if not rec.ok:
            failed += 1
            continue
        spent += rec.queries
        if best is None or rec.final_acc > best.final_acc:
            best = rec
    ev.write_records(records, args.out)
    if best is not None:
        print(json.dumps({"best_digest": best.final_digest, "best_val_acc": best.final_acc,
                          "episodes": len(records), "queries": spent}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    result = run_training(cfg)
    print(json.dumps({"checkpoints": [str(p) for p in result.checkpoints], "log": str(result.log_path),
                      "env_steps": result.env_steps, "learner_steps": result.learner_steps}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    if args.algo == QAGENT and not args.checkpoint:
        raise SystemExit("--algo qagent needs --checkpoint")
    net, spec, cap, oracle_kind = _net_and_spec(args)
    oracle = load_oracle(oracle_kind, spec)
    initial = ev.read_initial_set(args.initial_set)
    for a in initial:
        res = validate_architecture(a, spec)
        if not res:
            raise SystemExit(f"initial set entry {a} is invalid ({res.rule})")
    runs = max(1, args.runs)
    size = -(-len(initial) // runs)
    records = []
    for k in range(runs):
        chunk = initial[k * size:(k + 1) * size]
        records += ev.run_evaluation(args.algo, chunk, spec, oracle, seed=args.seed, net=net, run=k,
                                     neighbor_cap=cap, max_steps=args.max_steps)
    ev.write_records(records, args.out)
    ok = [r for r in records if r.ok]
    if len(ok) >= 2:
        st = ev.improvement_stats(ok)
        print(json.dumps({"episodes": len(records), "failed": len(records) - len(ok), "median_improvement": st.median},
                         sort_keys=True))
    return 0


def cmd_report(args) -> int:
    src, dst = Path(args.records), Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    files = sorted(src.glob("*.jsonl")) if src.is_dir() else [src]
    records = [r for f in files for r in ev.read_records(f)]
    budgets = list(range(1, args.max_budget + 1))
    summary = {}
    for alg, runs in ev.group_runs(records).items():
        flat = [r for run in runs for r in run if r.ok]
        entry = {"runs": len(runs), "episodes": len(flat)}
        if len(flat) >= 2:
            st = ev.improvement_stats(flat)
            ev.write_histogram_csv(st, dst / f"{alg}_histogram.csv")
            entry.update(ev.summary_dict(st))
        curve = ev.best_after_queries(runs, budgets, resamples=args.resamples, seed=args.seed)
        ev.write_curve_csv(curve, dst / f"{alg}_curve.csv")
        summary[alg] = entry
    (dst / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incnas", description="Incremental neural architecture search toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="count (and optionally list) unique cell digests")
    _add_space_args(p)
    p.add_argument("--out", help="write one hex digest per line")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("sample", help="draw uniform random architectures")
    _add_space_args(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write architectures here (usable as an initial set)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("neighbors", help="list the neighbors of an architecture")
    _add_space_args(p)
    p.add_argument("--arch", required=True, help='e.g. "labels=in,c3,out;edges=0-1,1-2"')
    p.add_argument("--cap", type=int, default=None, help="sample at most this many (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("oracle", help="query an oracle")
    osub = p.add_subparsers(dest="oracle_command", required=True)
    q = osub.add_parser("eval", help="print metrics for architectures")
    _add_space_args(q)
    q.add_argument("--oracle", default="synthetic", help="'synthetic' or a digest,val_acc,test_acc CSV")
    q.add_argument("archs", nargs="*", help="architecture text")
    q.add_argument("--arch", action="append", help="architecture text (repeatable)")
    q.add_argument("--file", help="file with one architecture per line")
    q.set_defaults(func=cmd_oracle_eval)

    p = sub.add_parser("search", help="run a search algorithm under a query budget")
    _add_space_args(p)
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--oracle", default="synthetic")
    p.add_argument("--checkpoint", help="Q-network checkpoint (qagent only)")
    p.add_argument("--neighbor-cap", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=ev.EVAL_EPISODE_LENGTH)
    p.add_argument("--out", default="search_records.jsonl")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train a Q-agent from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None, help="override the config's out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run episodes from a fixed initial set")
    _add_space_args(p)
    p.add_argument("--checkpoint", help="Q-network checkpoint; its config fixes space and neighbor cap")
    p.add_argument("--initial-set", required=True)
    p.add_argument("--algo", choices=ALGORITHMS, default=QAGENT)
    p.add_argument("--oracle", default="synthetic")
    p.add_argument("--neighbor-cap", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=ev.EVAL_EPISODE_LENGTH)
    p.add_argument("--runs", type=int, default=1, help="split the initial set into this many runs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="eval_records.jsonl")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="histograms, curves and summary from record files")
    p.add_argument("--records", required=True, help="directory of *.jsonl record files (or one file)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-budget", type=int, default=300)
    p.add_argument("--resamples", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
