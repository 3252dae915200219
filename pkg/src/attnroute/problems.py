"""Routing problem definitions: instances, rollout state machines, costs.

Node indexing: TSP uses 0..n-1. Every other problem puts the depot at
index 0 and customers at 1..n. Depot problems end their action sequence
with the return to the depot (a trailing 0).

The state machine is vectorized over a batch of same-size instances so the
decoder can step many rollouts at once; finished rows are padded with
no-op depot actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractError

PROBLEMS = ("tsp", "cvrp", "sdvrp", "op", "pctsp", "spctsp")
PRIZE_MODES = ("const", "unif", "dist")

# capacities, OP length budgets and PCTSP penalty scales at the sizes
# where they are given; other sizes interpolate linearly between anchors
# and extrapolate along the nearest segment
_ANCHOR_N = np.array([20.0, 50.0, 100.0])
_CAPACITY = np.array([30.0, 40.0, 50.0])
_MAX_LENGTH = np.array([2.0, 3.0, 4.0])
_PENALTY_K = np.array([2.0, 3.0, 4.0])

# slack for float comparisons on capacities and accumulated lengths
TOL = 1e-9


class FeasibilityError(ValueError):
    pass


def _piecewise(n: float, ys: np.ndarray) -> float:
    xs = _ANCHOR_N
    if n <= xs[0]:
        slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        return float(ys[0] + slope * (n - xs[0]))
    if n >= xs[-1]:
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return float(ys[-1] + slope * (n - xs[-1]))
    return float(np.interp(n, xs, ys))


def vrp_capacity(n: int) -> float:
    return _piecewise(n, _CAPACITY)


def op_max_length(n: int) -> float:
    return _piecewise(n, _MAX_LENGTH)


def pctsp_penalty_scale(n: int) -> float:
    return _piecewise(n, _PENALTY_K)


@dataclass
class Instance:
    """One routing instance. Customer arrays are indexed 0..n-1 (node i+1
    for depot problems); ``real_prizes`` is hidden information (SPCTSP)."""

    problem: str
    coords: np.ndarray
    depot: np.ndarray | None = None
    demands: np.ndarray | None = None  # integer demands delta_i
    capacity: float | None = None
    prizes: np.ndarray | None = None  # normalized prizes
    prize_mode: str | None = None
    penalties: np.ndarray | None = None
    max_length: float | None = None
    min_prize: float | None = None
    real_prizes: np.ndarray | None = None
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def has_depot(self) -> bool:
        return self.problem != "tsp"

    @property
    def norm_demands(self) -> np.ndarray:
        return np.asarray(self.demands, dtype=np.float64) / self.capacity

    def all_coords(self) -> np.ndarray:
        """Coordinates in model node order (depot first when present)."""
        if self.has_depot:
            return np.vstack([self.depot[None, :], self.coords])
        return self.coords

    def distance_matrix(self) -> np.ndarray:
        xy = self.all_coords()
        return np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))

    def permuted(self, perm) -> "Instance":
        """Reorder customers: new customer k is old customer perm[k]."""
        perm = np.asarray(perm)
        out = replace(self, coords=self.coords[perm].copy())
        for name in ("demands", "prizes", "penalties", "real_prizes"):
            val = getattr(self, name)
            if val is not None:
                setattr(out, name, np.asarray(val)[perm].copy())
        return out


def generate_instance(problem: str, n: int, rng: np.random.Generator,
                      prize_mode: str = "dist", seed: int | None = None) -> Instance:
    if problem not in PROBLEMS:
        raise ContractError(f"unknown problem {problem!r}")
    if n < 1:
        raise ContractError("n must be at least 1")
    if problem == "tsp":
        return Instance("tsp", rng.uniform(size=(n, 2)), seed=seed)
    depot = rng.uniform(size=2)
    coords = rng.uniform(size=(n, 2))
    if problem in ("cvrp", "sdvrp"):
        demands = rng.integers(1, 10, size=n).astype(np.float64)
        return Instance(problem, coords, depot, demands=demands, capacity=vrp_capacity(n), seed=seed)
    if problem == "op":
        if prize_mode == "const":
            prizes = np.ones(n)
        elif prize_mode == "unif":
            prizes = rng.integers(1, 101, size=n) / 100.0
        elif prize_mode == "dist":
            d0 = np.sqrt(((coords - depot) ** 2).sum(-1))
            prizes = (1 + np.floor(99 * d0 / d0.max())) / 100.0
        else:
            raise ContractError(f"unknown prize mode {prize_mode!r}")
        return Instance("op", coords, depot, prizes=prizes, prize_mode=prize_mode,
                        max_length=op_max_length(n), seed=seed)
    # pctsp / spctsp
    prizes = rng.uniform(size=n) * 4.0 / n
    penalties = rng.uniform(size=n) * 3.0 * pctsp_penalty_scale(n) / n
    real = None
    if problem == "spctsp":
        real = rng.uniform(size=n) * 2.0 * prizes
    return Instance(problem, coords, depot, prizes=prizes, penalties=penalties,
                    min_prize=1.0, real_prizes=real, seed=seed)


def generate_dataset(problem: str, n: int, count: int, seed: int, prize_mode: str = "dist") -> list:
    rng = np.random.default_rng(seed)
    return [generate_instance(problem, n, rng, prize_mode) for _ in range(count)]


def reveal_prize(instance: Instance, node: int) -> float:
    """Real prize collected at customer ``node`` (1-based) of an SPCTSP instance."""
    if instance.problem != "spctsp":
        raise ContractError("real prizes exist only for spctsp instances")
    if not 1 <= node <= instance.n:
        raise ContractError(f"node {node} is not a customer")
    return float(instance.real_prizes[node - 1])


# ---------------------------------------------------------------------------
# batched state machine


@dataclass
class Batch:
    """Same-problem, same-size instances stacked for vectorized decoding."""

    problem: str
    instances: list
    coords: np.ndarray  # (B, nodes, 2) in model order
    dist: np.ndarray  # (B, nodes, nodes)
    demand: np.ndarray | None = None  # (B, nodes) normalized, depot 0
    prize: np.ndarray | None = None  # (B, nodes) expected, depot 0
    real_prize: np.ndarray | None = None  # (B, nodes)
    penalty: np.ndarray | None = None  # (B, nodes)
    max_length: np.ndarray | None = None  # (B,)

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[1]

    @property
    def n(self) -> int:
        return self.num_nodes - (self.problem != "tsp")


def make_batch(instances) -> Batch:
    if isinstance(instances, Batch):
        return instances
    if isinstance(instances, Instance):
        instances = [instances]
    instances = list(instances)
    if not instances:
        raise ContractError("empty batch")
    problem = instances[0].problem
    n = instances[0].n
    for inst in instances:
        if inst.problem != problem or inst.n != n:
            raise ContractError("instances in a batch must share problem and size")
    coords = np.stack([inst.all_coords() for inst in instances])
    dist = np.sqrt(((coords[:, :, None, :] - coords[:, None, :, :]) ** 2).sum(-1))
    b = Batch(problem, instances, coords, dist)
    pad = lambda arr: np.concatenate([np.zeros((len(instances), 1)), arr], axis=1)
    if problem in ("cvrp", "sdvrp"):
        b.demand = pad(np.stack([inst.norm_demands for inst in instances]))
    if problem in ("op", "pctsp", "spctsp"):
        b.prize = pad(np.stack([np.asarray(inst.prizes, float) for inst in instances]))
    if problem in ("pctsp", "spctsp"):
        b.penalty = pad(np.stack([np.asarray(inst.penalties, float) for inst in instances]))
        b.real_prize = b.prize
    if problem == "spctsp":
        b.real_prize = pad(np.stack([np.asarray(inst.real_prizes, float) for inst in instances]))
    if problem == "op":
        b.max_length = np.array([inst.max_length for inst in instances], dtype=np.float64)
    return b


@dataclass
class DecodeState:
    t: int  # 1-based step about to be decided
    prev: np.ndarray  # (B,) last node; depot (0) at start for depot problems
    first: np.ndarray  # (B,) first node (TSP), -1 before step 1
    visited: np.ndarray  # (B, nodes) bool
    length: np.ndarray  # (B,) travelled distance so far
    done: np.ndarray  # (B,) bool
    capacity: np.ndarray | None = None  # remaining vehicle capacity (VRP)
    remaining_demand: np.ndarray | None = None  # (B, nodes) (VRP)
    remaining_length: np.ndarray | None = None  # (OP)
    remaining_prize: np.ndarray | None = None  # (PCTSP/SPCTSP)
    collected: np.ndarray | None = None  # prize collected (OP: expected; SPCTSP: real)
    actions: list = field(default_factory=list)  # per step (B,) arrays
    revealed: list | None = None  # per row [(node, real prize), ...] (SPCTSP)
    delivered: np.ndarray | None = None  # (B, nodes) total delivered (VRP)

    steps_taken: np.ndarray | None = None  # (B,) real (non-padding) steps per row

    @property
    def terminal(self) -> bool:
        return bool(self.done.all())


def initial_state(batch) -> DecodeState:
    batch = make_batch(batch)
    B, nn = batch.size, batch.num_nodes
    st = DecodeState(
        t=1,
        prev=np.zeros(B, dtype=np.int64),
        first=np.full(B, -1, dtype=np.int64),
        visited=np.zeros((B, nn), dtype=bool),
        length=np.zeros(B),
        done=np.zeros(B, dtype=bool),
        steps_taken=np.zeros(B, dtype=np.int64),
    )
    p = batch.problem
    if p in ("cvrp", "sdvrp"):
        st.capacity = np.ones(B)
        st.remaining_demand = batch.demand.copy()
        st.delivered = np.zeros((B, nn))
    elif p == "op":
        st.remaining_length = batch.max_length.copy()
        st.collected = np.zeros(B)
    elif p in ("pctsp", "spctsp"):
        st.remaining_prize = np.ones(B)
        st.collected = np.zeros(B)
        if p == "spctsp":
            st.revealed = [[] for _ in range(B)]
    return st


def _mask(batch: Batch, st: DecodeState) -> np.ndarray:
    """Feasible-action mask; finished rows get a depot-only no-op mask."""
    p = batch.problem
    B, nn = batch.size, batch.num_nodes
    if p == "tsp":
        mask = ~st.visited
    elif p in ("cvrp", "sdvrp"):
        rd = st.remaining_demand
        cap = st.capacity[:, None]
        mask = rd > 0
        if p == "cvrp":
            mask &= rd <= cap + TOL
        else:
            # an empty vehicle cannot deliver anything
            mask &= cap > 0
        mask[:, 0] = ~((st.t == 1) | (st.prev == 0))
        # all demand served: only the final return is allowed
        served = ~(rd[:, 1:] > 0).any(axis=1)
        mask[served, 0] = True
    elif p == "op":
        rows = np.arange(B)
        d_prev = batch.dist[rows, st.prev]
        d_back = batch.dist[:, :, 0]
        mask = ~st.visited & (d_prev + d_back <= st.remaining_length[:, None])
        mask[:, 0] = True
    else:
        mask = ~st.visited
        all_visited = st.visited[:, 1:].all(axis=1)
        mask[:, 0] = ~((st.remaining_prize > 0) & ~all_visited)
    mask = mask.copy()
    if st.done.any():
        mask[st.done] = False
        mask[st.done, 0] = True
    return mask


def feasible_mask(instance, state: DecodeState) -> np.ndarray:
    """Boolean mask of actions allowed at the current step.

    Returns shape (nodes,) for a single instance, (B, nodes) for a batch.
    """
    single = isinstance(instance, Instance)
    batch = make_batch(instance)
    if state.done.any():
        raise ContractError("feasible_mask called on a terminal state")
    mask = _mask(batch, state)
    return mask[0] if single else mask


def _step(batch: Batch, st: DecodeState, action: np.ndarray, mask: np.ndarray | None = None) -> DecodeState:
    """Apply one action per row. Finished rows must take the no-op 0."""
    action = np.asarray(action, dtype=np.int64).reshape(batch.size)
    if mask is None:
        mask = _mask(batch, st)
    rows = np.arange(batch.size)
    ok = mask[rows, action]
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise FeasibilityError(f"action {int(action[bad])} is infeasible for row {bad} at step {st.t}")
    active = ~st.done
    p = batch.problem
    new = replace(
        st,
        t=st.t + 1,
        prev=np.where(active, action, st.prev),
        first=np.where(st.first < 0, action, st.first),
        visited=st.visited.copy(),
        # TSP has no start location, so its first action travels nowhere
        length=st.length + np.where(active & ((p != "tsp") | (st.t > 1)), batch.dist[rows, st.prev, action], 0.0),
        done=st.done.copy(),
        actions=st.actions + [np.where(active, action, 0)],
        steps_taken=st.steps_taken + active,
    )
    act_rows = rows[active]
    act = action[active]
    new.visited[act_rows, act] = True

    if p == "tsp":
        new.done = new.visited.all(axis=1)
        # close the tour on the step that finishes it
        closing = new.done & active
        new.length = new.length + np.where(closing, batch.dist[rows, action, new.first], 0.0)
    elif p in ("cvrp", "sdvrp"):
        rd = st.remaining_demand.copy()
        cap = st.capacity.copy()
        delivered = st.delivered.copy()
        at_depot = active & (action == 0)
        at_cust = active & (action != 0)
        cr = rows[at_cust]
        ca = action[at_cust]
        amount = np.minimum(rd[cr, ca], cap[cr])
        delivered[cr, ca] += amount
        # normalized demand and capacity updates
        rd[cr, ca] = np.maximum(0.0, rd[cr, ca] - cap[cr])
        cap[cr] = np.maximum(cap[cr] - st.remaining_demand[cr, ca], 0.0)
        cap[at_depot] = 1.0
        # snap float residues so an exhausted counter is exactly zero
        rd[rd < TOL] = 0.0
        cap[cap < TOL] = 0.0
        new.remaining_demand = rd
        new.capacity = cap
        new.delivered = delivered
        served = ~(rd[:, 1:] > 0).any(axis=1)
        new.done = st.done | (at_depot & served)
    elif p == "op":
        new.remaining_length = st.remaining_length - np.where(active, batch.dist[rows, st.prev, action], 0.0)
        new.collected = st.collected + np.where(active, batch.prize[rows, action], 0.0)
        new.done = st.done | (active & (action == 0))
    else:
        gain = np.where(active, batch.real_prize[rows, action], 0.0)
        new.remaining_prize = np.maximum(0.0, st.remaining_prize - gain)
        new.collected = st.collected + gain
        new.done = st.done | (active & (action == 0))
        if p == "spctsp":
            new.revealed = [list(r) for r in st.revealed]
            for r, a in zip(act_rows, act):
                if a != 0:
                    new.revealed[r].append((int(a), float(batch.real_prize[r, a])))
    return new


def apply_action(instance, state: DecodeState, node) -> DecodeState:
    """Return the state after taking ``node`` (scalar or per-row array)."""
    batch = make_batch(instance)
    return _step(batch, state, np.broadcast_to(np.asarray(node), (batch.size,)))


def state_costs(batch: Batch, st: DecodeState) -> np.ndarray:
    """Objective of finished rollouts (lower is better)."""
    p = batch.problem
    if p in ("tsp", "cvrp", "sdvrp"):
        return st.length.copy()
    if p == "op":
        return -st.collected
    unvisited = ~st.visited
    unvisited[:, 0] = False
    return st.length + (batch.penalty * unvisited).sum(axis=1)


def state_sequences(st: DecodeState) -> list:
    """Per-row action sequences with padding removed."""
    if not st.actions:
        return [[] for _ in range(len(st.done))]
    acts = np.stack(st.actions, axis=1)
    return [acts[r, : st.steps_taken[r]].tolist() for r in range(acts.shape[0])]


def max_steps(batch: Batch) -> int:
    """Upper bound on rollout length for the batch's problem."""
    n = batch.n
    if batch.problem == "tsp":
        return n
    if batch.problem == "cvrp":
        return 2 * n
    if batch.problem == "sdvrp":
        # every route opens by fully serving a customer (demands <= 1), so at
        # most n routes, n finishing visits and n partial visits
        return 3 * n
    return n + 1


# ---------------------------------------------------------------------------
# independent feasibility checking and costs


def _tour_length(xy: np.ndarray, seq) -> float:
    pts = xy[list(seq)]
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1)).sum())


def check_solution(instance: Instance, actions) -> list:
    """Constraint violations of ``actions`` on ``instance`` (empty if feasible).

    Written directly from the problem definitions, separately from the
    vectorized mask logic.
    """
    acts = [int(a) for a in actions]
    n = instance.n
    p = instance.problem
    errs = []
    if p == "tsp":
        if sorted(acts) != list(range(n)):
            errs.append("not a permutation of all nodes")
        return errs
    if not acts or acts[-1] != 0:
        errs.append("route does not end at the depot")
        return errs
    if any(a < 0 or a > n for a in acts):
        errs.append("node index out of range")
        return errs
    customers = [a for a in acts if a != 0]
    if p in ("cvrp", "sdvrp"):
        for i in range(len(acts) - 1):
            if acts[i] == 0 and acts[i + 1] == 0:
                errs.append("depot visited twice in a row")
        if acts[0] == 0:
            errs.append("depot chosen at the first step")
        demand = instance.norm_demands
        if p == "cvrp":
            if len(customers) != len(set(customers)):
                errs.append("customer visited twice")
            if set(customers) != set(range(1, n + 1)):
                errs.append("not every customer served")
            load = 0.0
            for a in acts:
                if a == 0:
                    load = 0.0
                else:
                    load += demand[a - 1]
                    if load > 1.0 + TOL:
                        errs.append("route exceeds vehicle capacity")
                        break
        else:
            remaining = demand.copy()
            cap = 1.0
            for a in acts:
                if a == 0:
                    cap = 1.0
                    continue
                if remaining[a - 1] <= TOL:
                    errs.append(f"customer {a} visited with no demand left")
                    break
                give = min(cap, remaining[a - 1])
                if give <= TOL:
                    errs.append("visit with an empty vehicle")
                    break
                remaining[a - 1] -= give
                cap -= give
            if (remaining > TOL).any():
                errs.append("demand left unserved")
        return errs
    if len(customers) != len(set(customers)):
        errs.append("customer visited twice")
    if acts.count(0) != 1:
        errs.append("depot visited before the end of the route")
    if p == "op":
        length = _tour_length(instance.all_coords(), [0] + acts)
        if length > instance.max_length + TOL:
            errs.append(f"route length {length:.6f} exceeds budget {instance.max_length:.6f}")
    else:
        prizes = instance.real_prizes if p == "spctsp" else instance.prizes
        got = float(np.sum([prizes[a - 1] for a in customers]))
        if got < instance.min_prize - TOL and len(set(customers)) < n:
            errs.append(f"collected prize {got:.6f} below minimum {instance.min_prize}")
    return errs


def solution_cost(instance: Instance, actions, check: bool = True) -> float:
    """Objective of a complete solution; lower is better (OP is negated prize)."""
    if check:
        errs = check_solution(instance, actions)
        if errs:
            raise FeasibilityError("; ".join(errs))
    acts = [int(a) for a in actions]
    p = instance.problem
    if p == "tsp":
        return _tour_length(instance.coords, acts + acts[:1]) if acts else 0.0
    length = _tour_length(instance.all_coords(), [0] + acts)
    if p in ("cvrp", "sdvrp"):
        return length
    visited = {a for a in acts if a != 0}
    if p == "op":
        return -float(sum(instance.prizes[a - 1] for a in visited))
    pen = sum(instance.penalties[i] for i in range(instance.n) if (i + 1) not in visited)
    return length + float(pen)


@dataclass
class Solution:
    actions: list
    cost: float
    log_prob: float | None = None
    revealed: list | None = None
