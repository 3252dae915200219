"""Command line: generate, train, eval, solve, baseline, oracle."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np

from .autodiff import ContractError
from .heuristics import insertion, nearest_neighbor, spctsp_replan, tsiligirides
from .oracle import CapacityError, optimality_gap, solve_exact
from .problems import PRIZE_MODES, PROBLEMS, FeasibilityError, generate_dataset
from .rollout import rollout, sample_best_of
from .storage import (atomic_write, checkpoint_to_state, instance_to_record, load_checkpoint, load_dataset,
                      save_checkpoint, save_dataset, state_to_checkpoint)
from .train import DivergenceError, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_DIVERGED = 0, 2, 3, 4

METHODS = ("nn", "insertion-nearest", "insertion-farthest", "insertion-random", "tsili-greedy", "tsili-sample",
           "replan-all", "replan-half", "replan-first")


# ---------------------------------------------------------------------------
# reports


def make_report(costs, optimal=None, problem: str = "tsp", mode: str = "greedy", k: int = 1, seconds: float = 0.0,
                actions=None) -> dict:
    rows = []
    for i, c in enumerate(costs):
        row = {"index": i, "cost": float(c)}
        if optimal is not None:
            o = optimal[i]
            row["optimal"] = float(o)
            row["gap"] = optimality_gap(-c, -o, maximize=True) if problem == "op" else optimality_gap(c, o)
        if actions is not None:
            row["actions"] = [int(a) for a in actions[i]]
        rows.append(row)
    rep = {"problem": problem, "mode": mode, "k": k, "count": len(rows), "seconds": seconds, "rows": rows,
           "mean_cost": float(np.mean([r["cost"] for r in rows])) if rows else None}
    if optimal is not None:
        rep["mean_gap"] = float(np.mean([r["gap"] for r in rows])) if rows else None
    return rep


def _emit(report: dict, out):
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if out:
        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# oracle cache


def instance_key(inst) -> str:
    rec = json.dumps(instance_to_record(inst), sort_keys=True)
    return hashlib.sha256(rec.encode()).hexdigest()


def cache_path(dataset_path) -> str:
    return os.fspath(dataset_path) + ".oracle.json"


def _oracle_one(inst):
    res = solve_exact(inst)
    return {"cost": res.cost, "actions": [int(a) for a in res.actions]}


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(x) for x in items]


def oracle_costs(dataset_path, instances, workers: int = 1) -> tuple:
    """Optimal costs for every instance, reusing and extending the cache.

    Returns (costs, number of newly solved instances)."""
    path = cache_path(dataset_path)
    cache = {}
    if os.path.exists(path):
        with open(path) as fh:
            cache = json.load(fh)
    keys = [instance_key(i) for i in instances]
    todo = [(k, inst) for k, inst in zip(keys, instances) if k not in cache]
    todo = list(dict((k, inst) for k, inst in todo).items())
    if todo:
        for (k, _), res in zip(todo, _map(_oracle_one, [inst for _, inst in todo], workers)):
            cache[k] = res
        atomic_write(path, (json.dumps(cache, sort_keys=True) + "\n").encode())
    return np.array([cache[k]["cost"] for k in keys]), len(todo)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(a) -> int:
    if a.count < 0:
        raise ContractError("count must be nonnegative")
    data = generate_dataset(a.problem, a.n, a.count, a.seed, a.prize_mode)
    save_dataset(a.out, data)
    return EXIT_OK


def _train_config(a) -> TrainConfig:
    d = {}
    if a.config:
        with open(a.config) as fh:
            d = json.load(fh)
    flags = {"problem": a.problem, "n": a.n, "seed": a.seed, "prize_mode": a.prize_mode, "baseline": a.baseline,
             "epochs": a.epochs, "steps": a.steps, "batch": a.batch, "lr": a.lr, "lr_decay": a.lr_decay,
             "alpha": a.alpha, "warmup": a.warmup, "eval_size": a.eval_size, "val_size": a.val_size}
    d.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(d)


def cmd_train(a) -> int:
    cfg = _train_config(a)
    state = None
    if a.resume:
        state = checkpoint_to_state(load_checkpoint(a.resume), cfg)
    hist = open(a.history, "a") if a.history else None

    def log(rec):
        if hist:
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            hist.flush()
        if not a.quiet:
            print(json.dumps(rec, sort_keys=True), file=sys.stderr)

    try:
        state = train(cfg, state, on_epoch=lambda s: save_checkpoint(a.out, state_to_checkpoint(s)), log=log)
    finally:
        if hist:
            hist.close()
    save_checkpoint(a.out, state_to_checkpoint(state))
    return EXIT_OK


def _load_pair(a):
    ck = load_checkpoint(a.checkpoint)
    data = load_dataset(a.dataset)
    if data and data[0].problem != ck.model.problem:
        raise ContractError(f"checkpoint solves {ck.model.problem} but dataset holds {data[0].problem}")
    return ck.policy, data


def _policy_solutions(policy, data, mode: str, k: int, seed: int) -> list:
    if mode == "greedy":
        return rollout(policy, data, "greedy") if data else []
    return [sample_best_of(policy, inst, k, np.random.default_rng([seed, i])) for i, inst in enumerate(data)]


def cmd_eval(a, with_actions: bool = False) -> int:
    t0 = time.perf_counter()
    policy, data = _load_pair(a)
    if a.mode == "greedy":
        a.k = 1
    sols = _policy_solutions(policy, data, a.mode, a.k, a.seed)
    seconds = time.perf_counter() - t0
    optimal = None
    if a.oracle or os.path.exists(cache_path(a.dataset)):
        optimal, _ = oracle_costs(a.dataset, data, a.workers)
    rep = make_report([s.cost for s in sols], optimal, policy.cfg.problem, a.mode, a.k, seconds,
                      [s.actions for s in sols] if with_actions else None)
    _emit(rep, a.out)
    return EXIT_OK


def cmd_solve(a) -> int:
    # solutions are reported without the revealed SPCTSP prizes
    return cmd_eval(a, with_actions=True)


def _run_method(method: str, seed: int, item):
    i, inst = item
    rng = np.random.default_rng([seed, i])
    if method == "nn":
        return nearest_neighbor(inst)
    if method.startswith("insertion-"):
        return insertion(inst, method.split("-", 1)[1], rng)
    if method == "tsili-greedy":
        return tsiligirides(inst, "greedy")
    if method == "tsili-sample":
        return tsiligirides(inst, "sample", rng)
    return spctsp_replan(inst, strategy=method.split("-", 1)[1])


def cmd_baseline(a) -> int:
    t0 = time.perf_counter()
    data = load_dataset(a.dataset)
    sols = _map(partial(_run_method, a.method, a.seed), list(enumerate(data)), a.workers)
    seconds = time.perf_counter() - t0
    optimal = oracle_costs(a.dataset, data, a.workers)[0] if a.oracle or os.path.exists(cache_path(a.dataset)) \
        else None
    problem = data[0].problem if data else "tsp"
    _emit(make_report([s.cost for s in sols], optimal, problem, a.method, 1, seconds,
                      [s.actions for s in sols]), a.out)
    return EXIT_OK


def cmd_oracle(a) -> int:
    t0 = time.perf_counter()
    data = load_dataset(a.dataset)
    costs, _ = oracle_costs(a.dataset, data, a.workers)
    problem = data[0].problem if data else "tsp"
    _emit(make_report(costs, costs, problem, "oracle", 1, time.perf_counter() - t0), a.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnroute", description="Attention-model routing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, problem=False):
        sp.add_argument("--seed", type=int, default=None if problem else 0)
        sp.add_argument("--workers", type=int, default=1)
        if problem:
            sp.add_argument("--problem", choices=PROBLEMS)
            sp.add_argument("--n", type=int)
            sp.add_argument("--prize-mode", choices=PRIZE_MODES)

    g = sub.add_parser("generate", help="write a random dataset")
    g.add_argument("--problem", choices=PROBLEMS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prize-mode", choices=PRIZE_MODES, default="dist")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a policy")
    common(t, problem=True)
    t.add_argument("--config", help="JSON file with training settings; flags override it")
    t.add_argument("--baseline", choices=("exp", "exponential", "critic", "rollout", "none"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--warmup", action="store_true", default=None)
    t.add_argument("--eval-size", type=int)
    t.add_argument("--val-size", type=int)
    t.add_argument("--out", required=True, help="checkpoint path (rewritten every epoch)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--history", help="append per-epoch JSON lines here")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate a checkpoint"),
                          ("solve", cmd_solve, "decode solutions with a checkpoint")):
        e = sub.add_parser(name, help=hlp)
        common(e)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--dataset", required=True)
        e.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
        e.add_argument("--k", type=int, default=1280)
        e.add_argument("--oracle", action="store_true", help="compute optimal costs (cached)")
        e.add_argument("--out")
        e.set_defaults(fn=fn)

    b = sub.add_parser("baseline", help="run a classical heuristic")
    common(b)
    b.add_argument("--dataset", required=True)
    b.add_argument("--method", choices=METHODS, required=True)
    b.add_argument("--oracle", action="store_true")
    b.add_argument("--out")
    b.set_defaults(fn=cmd_baseline)

    o = sub.add_parser("oracle", help="solve a dataset exactly (cached)")
    common(o)
    o.add_argument("--dataset", required=True)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, FeasibilityError, TypeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
