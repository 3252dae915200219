"""Exact solvers for small instances (subset dynamic programming)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .problems import TOL, Instance

MAX_TSP_NODES = 22
MAX_SUBSET_NODES = 10


class CapacityError(ValueError):
    """Instance too large for an exact solver."""


@dataclass
class OracleResult:
    cost: float
    actions: list
    states: int


def _route_sum(dist: np.ndarray, route, extra=()) -> float:
    """Correctly rounded sum of the route's edge lengths plus ``extra``.

    Reported optima use this so the value does not depend on the order in
    which the search happened to add terms.
    """
    return math.fsum([float(dist[a, b]) for a, b in zip(route, route[1:])] + [float(x) for x in extra])


def _popcount(x: np.ndarray) -> np.ndarray:
    c = np.zeros_like(x)
    y = x.copy()
    while y.any():
        c += y & 1
        y >>= 1
    return c


def path_dp(dist: np.ndarray, start: int, nodes) -> tuple:
    """Shortest paths from ``start`` covering each subset of ``nodes``.

    Returns (cost, parent) arrays of shape (2**m, m): cost[S, j] is the
    length of the best path that leaves ``start``, visits exactly the nodes
    in S and ends at nodes[j]; parent[S, j] is the previous position (or -1
    when the path came straight from ``start``).
    """
    nodes = list(nodes)
    m = len(nodes)
    size = 1 << m
    cost = np.full((size, m), np.inf)
    parent = np.full((size, m), -1, dtype=np.int8)
    if m == 0:
        return cost, parent
    sub = dist[np.ix_(nodes, nodes)]
    for j in range(m):
        cost[1 << j, j] = dist[start, nodes[j]]
    masks = np.arange(size, dtype=np.int64)
    pc = _popcount(masks)
    for c in range(2, m + 1):
        layer = masks[pc == c]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = cost[prev] + sub[:, j][None, :]
            best = cand.argmin(axis=1)
            cost[sel, j] = cand[np.arange(len(sel)), best]
            parent[sel, j] = best
    return cost, parent


def _walk(parent: np.ndarray, mask: int, j: int) -> list:
    order = []
    while j >= 0:
        order.append(j)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    return order[::-1]


def held_karp(instance: Instance) -> OracleResult:
    """Optimal closed TSP tour, starting from node 0."""
    n = instance.n
    if n > MAX_TSP_NODES:
        raise CapacityError(f"held_karp supports n <= {MAX_TSP_NODES}, got {n}")
    if n == 1:
        return OracleResult(0.0, [0], 1)
    d = instance.distance_matrix()
    nodes = list(range(1, n))
    cost, parent = path_dp(d, 0, nodes)
    full = (1 << (n - 1)) - 1
    totals = cost[full] + d[nodes, 0]
    j = int(totals.argmin())
    tour = [0] + [nodes[i] for i in _walk(parent, full, j)]
    return OracleResult(_route_sum(d, tour + [0]), tour, cost.size)


def _subset_tours(d: np.ndarray, m: int):
    """Closed tour from depot 0 through every customer subset (customers 1..m)."""
    cost, parent = path_dp(d, 0, range(1, m + 1))
    back = cost + d[1:, 0][None, :]
    best_end = back.argmin(axis=1)
    tour = back[np.arange(len(back)), best_end]
    tour[0] = 0.0
    return tour, best_end, parent, cost.size


def _actions_for(mask: int, best_end, parent) -> list:
    if mask == 0:
        return [0]
    order = _walk(parent, mask, int(best_end[mask]))
    return [i + 1 for i in order] + [0]


def _bits(m: int) -> np.ndarray:
    masks = np.arange(1 << m, dtype=np.int64)
    return ((masks[:, None] >> np.arange(m)) & 1).astype(bool)


def brute_force_op(instance: Instance) -> OracleResult:
    """Maximum-prize orienteering route; cost is the negated prize."""
    if instance.problem != "op":
        raise ContractError("brute_force_op needs an op instance")
    n = instance.n
    if n > MAX_SUBSET_NODES:
        raise CapacityError(f"brute_force_op supports n <= {MAX_SUBSET_NODES}, got {n}")
    d = instance.distance_matrix()
    tour, best_end, parent, states = _subset_tours(d, n)
    prize = _bits(n) @ np.asarray(instance.prizes, float)
    ok = tour <= instance.max_length + TOL
    prize = np.where(ok, prize, -np.inf)
    # highest prize; among equals the shortest route
    order = np.lexsort((tour, -prize))
    mask = int(order[0])
    actions = _actions_for(mask, best_end, parent)
    return OracleResult(-math.fsum(float(instance.prizes[i - 1]) for i in actions if i), actions, states)


def brute_force_pctsp(instance: Instance) -> OracleResult:
    """Optimal deterministic PCTSP route using the expected prizes."""
    if instance.problem not in ("pctsp", "spctsp"):
        raise ContractError("brute_force_pctsp needs a pctsp instance")
    n = instance.n
    if n > MAX_SUBSET_NODES:
        raise CapacityError(f"brute_force_pctsp supports n <= {MAX_SUBSET_NODES}, got {n}")
    res = plan_pctsp(instance.distance_matrix(), 0, list(range(1, n + 1)), np.asarray(instance.prizes, float),
                     np.asarray(instance.penalties, float), instance.min_prize)
    return res


def plan_pctsp(dist: np.ndarray, start: int, candidates, prizes, penalties, min_prize: float) -> OracleResult:
    """Best open route start -> subset of ``candidates`` -> depot 0.

    ``prizes``/``penalties`` are indexed by customer (node i -> index i-1).
    The subset must collect ``min_prize``, or be every candidate when that
    is impossible. Unchosen candidates pay their penalty.
    """
    cand = list(candidates)
    m = len(cand)
    if m > MAX_SUBSET_NODES:
        raise CapacityError(f"plan_pctsp supports at most {MAX_SUBSET_NODES} candidates, got {m}")
    if m == 0:
        return OracleResult(float(dist[start, 0]), [0], 1)
    cost, parent = path_dp(dist, start, cand)
    back = cost + dist[cand, 0][None, :]
    best_end = back.argmin(axis=1)
    path = back[np.arange(len(back)), best_end]
    path[0] = dist[start, 0]
    bits = _bits(m)
    pr = np.array([prizes[c - 1] for c in cand])
    pen = np.array([penalties[c - 1] for c in cand])
    got = bits @ pr
    total = path + (~bits) @ pen
    full = (1 << m) - 1
    feasible = got >= min_prize - TOL
    if not feasible.any():
        feasible = np.zeros_like(feasible)
        feasible[full] = True
    total = np.where(feasible, total, np.inf)
    mask = int(total.argmin())
    route = [] if mask == 0 else [cand[i] for i in _walk(parent, mask, int(best_end[mask]))]
    skipped = [penalties[c - 1] for c in cand if c not in route]
    return OracleResult(_route_sum(dist, [start] + route + [0], skipped), route + [0], cost.size)


def solve_exact(instance: Instance) -> OracleResult:
    p = instance.problem
    if p == "tsp":
        return held_karp(instance)
    if p == "op":
        return brute_force_op(instance)
    if p in ("pctsp", "spctsp"):
        return brute_force_pctsp(instance)
    raise ContractError(f"no exact oracle for {p}")


def optimality_gap(cost: float, optimal: float, maximize: bool = False) -> float:
    """Relative gap to the optimum, nonnegative for suboptimal solutions.

    For maximization pass the (positive) objective values, e.g. collected
    prize: the gap is (optimal - achieved) / optimal.
    """
    if maximize:
        if optimal <= 0:
            raise ContractError("maximization gap needs a positive optimum")
        return (optimal - cost) / optimal
    if optimal <= 0:
        raise ContractError("minimization gap needs a positive optimum")
    return (cost - optimal) / optimal
