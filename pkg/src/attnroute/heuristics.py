"""Classical construction baselines."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError
from .oracle import MAX_SUBSET_NODES, plan_pctsp
from .problems import TOL, Instance, Solution, solution_cost

INSERTION_VARIANTS = ("nearest", "farthest", "random")


def nearest_neighbor(instance: Instance) -> Solution:
    """Start at the first input node and always move to the closest unvisited one."""
    d = instance.distance_matrix()
    n = instance.n
    tour = [0]
    free = np.ones(n, dtype=bool)
    free[0] = False
    for _ in range(n - 1):
        row = np.where(free, d[tour[-1]], np.inf)
        nxt = int(row.argmin())
        tour.append(nxt)
        free[nxt] = False
    return Solution(tour, solution_cost(instance, tour))


def insertion_cost(d: np.ndarray, tour: list, node: int) -> tuple:
    """Cheapest (cost, position) to insert ``node`` into the closed ``tour``.

    Position p means inserting between tour[p-1] and tour[p] (wrapping).
    """
    if len(tour) == 1:
        return 2 * d[tour[0], node], 1
    a = np.array(tour)
    b = np.roll(a, -1)
    costs = d[a, node] + d[node, b] - d[a, b]
    p = int(costs.argmin())
    return float(costs[p]), p + 1


def insertion(instance: Instance, variant: str = "farthest", rng: np.random.Generator | None = None,
              trace: list | None = None) -> Solution:
    """Grow a tour by cheapest-position insertion.

    ``nearest``/``farthest`` pick the node closest to / farthest from the
    partial tour; ``random`` inserts in input order (instances are random).
    The first node inserted is node 0 for every variant. ``trace``, when
    given, receives (node, insertion cost) per step.
    """
    if variant not in INSERTION_VARIANTS:
        raise ContractError(f"unknown insertion variant {variant!r}")
    d = instance.distance_matrix()
    n = instance.n
    tour = [0]
    free = np.ones(n, dtype=bool)
    free[0] = False
    to_tour = d[0].copy()  # distance from each node to the partial tour
    for step in range(1, n):
        if variant == "random":
            node = step
        else:
            cand = np.where(free, to_tour, np.inf if variant == "nearest" else -np.inf)
            node = int(cand.argmin() if variant == "nearest" else cand.argmax())
        cost, pos = insertion_cost(d, tour, node)
        tour.insert(pos, node)
        if trace is not None:
            trace.append((node, cost))
        free[node] = False
        to_tour = np.minimum(to_tour, d[node])
    return Solution(tour, solution_cost(instance, tour))


def tsiligirides_scores(prizes: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """(prize / distance) ** 4, with coincident points scoring +inf."""
    with np.errstate(divide="ignore"):
        ratio = np.where(dists > 0, prizes / np.where(dists > 0, dists, 1.0), np.inf)
    return ratio ** 4


def tsiligirides(instance: Instance, mode: str = "greedy", rng: np.random.Generator | None = None,
                 top: int = 4) -> Solution:
    """Construction phase of the Tsiligirides orienteering heuristic.

    Only nodes that still allow a return to the depot within the length
    budget are candidates. Among the ``top`` best-scoring ones, greedy picks
    the best and sampling draws proportionally to score.
    """
    if instance.problem != "op":
        raise ContractError("tsiligirides needs an op instance")
    if mode not in ("greedy", "sample"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ContractError("sampling needs an rng")
    d = instance.distance_matrix()
    prizes = np.concatenate([[0.0], np.asarray(instance.prizes, float)])
    n = instance.n
    visited = np.zeros(n + 1, dtype=bool)
    visited[0] = True
    cur, left = 0, float(instance.max_length)
    route = []
    while True:
        feas = ~visited & (d[cur] + d[:, 0] <= left)
        idx = np.flatnonzero(feas)
        if len(idx) == 0:
            break
        s = tsiligirides_scores(prizes[idx], d[cur, idx])
        # stable sort keeps the lowest index first among equal scores
        order = np.argsort(-s, kind="stable")[: min(top, len(idx))]
        cand, cs = idx[order], s[order]
        if mode == "greedy" or np.isinf(cs[0]):
            nxt = int(cand[0])
        else:
            nxt = int(cand[rng.choice(len(cand), p=cs / cs.sum())])
        route.append(nxt)
        visited[nxt] = True
        left -= d[cur, nxt]
        cur = nxt
    route.append(0)
    return Solution(route, solution_cost(instance, route))


# ---------------------------------------------------------------------------
# stochastic PCTSP re-planning


def exact_planner(dist, start, candidates, prizes, penalties, min_prize):
    """Optimal open route from ``start`` over ``candidates`` ending at the depot."""
    return plan_pctsp(dist, start, candidates, prizes, penalties, min_prize).actions[:-1]


def insertion_planner(dist, start, candidates, prizes, penalties, min_prize):
    """Cheap PCTSP planner for larger instances.

    Inserts the node with the best prize per added length until the prize
    target is met, then keeps inserting nodes whose penalty exceeds their
    cheapest insertion cost.
    """
    path = [start, 0]
    left = list(candidates)
    need = min_prize

    def best_slot(node):
        a = np.array(path[:-1])
        b = np.array(path[1:])
        c = dist[a, node] + dist[node, b] - dist[a, b]
        k = int(c.argmin())
        return float(c[k]), k + 1

    while left:
        slots = [best_slot(v) for v in left]
        if need > TOL:
            score = [prizes[v - 1] / max(c, 1e-12) for v, (c, _) in zip(left, slots)]
            k = int(np.argmax(score))
        else:
            gain = [penalties[v - 1] - c for v, (c, _) in zip(left, slots)]
            k = int(np.argmax(gain))
            if gain[k] <= 0:
                break
        v = left.pop(k)
        path.insert(slots[k][1], v)
        need -= prizes[v - 1]
    return path[1:-1]


def spctsp_replan(instance: Instance, planner=None, strategy: str = "all", stats: dict | None = None) -> Solution:
    """Adaptive SPCTSP baseline: plan with expected prizes, execute, re-plan.

    ``strategy`` sets how much of each plan is executed before re-planning:
    ``all`` planned visits, ``half`` (floor, at least one) or the ``first``.
    Re-planning continues until a plan is empty, every customer is visited,
    or a plan was executed to its end with the target met.
    """
    if instance.problem != "spctsp":
        raise ContractError("spctsp_replan needs an spctsp instance")
    if strategy not in ("all", "half", "first"):
        raise ContractError(f"unknown strategy {strategy!r}")
    if planner is None:
        planner = exact_planner if instance.n <= MAX_SUBSET_NODES else insertion_planner
    dist = instance.distance_matrix()
    prizes = np.asarray(instance.prizes, float)
    pens = np.asarray(instance.penalties, float)
    real = np.asarray(instance.real_prizes, float)
    route: list = []
    cur = 0
    need = float(instance.min_prize)
    calls = 0

    def plan(target):
        nonlocal calls
        calls += 1
        left = [v for v in range(1, instance.n + 1) if v not in route]
        try:
            return list(planner(dist, cur, left, prizes, pens, target))
        except Exception as exc:  # noqa: BLE001 - re-raised with route context
            raise RuntimeError(f"planner failed after executing {route}: {exc}") from exc

    while len(route) < instance.n:
        planned = plan(need)
        if not planned:
            break
        if strategy == "all":
            k = len(planned)
        elif strategy == "half":
            k = max(1, len(planned) // 2)
        else:
            k = 1
        for v in planned[:k]:
            route.append(v)
            need = max(0.0, need - real[v - 1])
            cur = v
        # a finished plan that met the target already chose to go home
        if need <= 0 and k == len(planned):
            break
    if stats is not None:
        stats["planning_calls"] = calls
    actions = route + [0]
    return Solution(actions, solution_cost(instance, actions))
