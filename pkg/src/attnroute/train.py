"""REINFORCE training with exponential, critic and greedy-rollout baselines."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import AdamConfig, ContractError, ShapeError, Tensor, adam_step
from .model import Critic, ModelConfig, Policy, critic_value
from .oracle import MAX_SUBSET_NODES, MAX_TSP_NODES, optimality_gap, solve_exact
from .problems import PRIZE_MODES, PROBLEMS, generate_dataset, make_batch
from .rollout import run

BASELINES = ("exponential", "critic", "rollout", "none")
BASELINE_ALIASES = {"exp": "exponential"}


class DivergenceError(RuntimeError):
    """Raised when parameters or the loss stop being finite."""


# ---------------------------------------------------------------------------
# estimator pieces


def reinforce_loss(costs, baselines, log_probs: Tensor) -> Tensor:
    """Surrogate whose gradient is the baseline-corrected REINFORCE estimate.

    The advantage ``costs - baselines`` is a constant: no gradient flows
    into the baseline.
    """
    costs = np.asarray(costs, dtype=np.float64)
    b = np.broadcast_to(np.asarray(baselines, dtype=np.float64), costs.shape) if np.ndim(baselines) == 0 \
        else np.asarray(baselines, dtype=np.float64)
    if costs.ndim != 1 or b.shape != costs.shape or log_probs.shape != costs.shape:
        raise ShapeError(f"costs {costs.shape}, baselines {b.shape} and log-probs {log_probs.shape} must match")
    adv = costs - b
    return (log_probs * adv).mean()


def exponential_baseline(m: float | None, costs, beta: float = 0.8) -> float:
    """Moving average of the batch-mean cost; ``m=None`` marks the first batch."""
    if not 0 <= beta < 1:
        raise ContractError(f"beta must be in [0, 1), got {beta}")
    mean = float(np.mean(costs))
    if m is None:
        return mean
    return beta * m + (1 - beta) * mean


def paired_ttest(candidate, baseline) -> tuple:
    """One-sided paired t-test of mean(candidate - baseline) < 0.

    Returns (t, p). Zero-variance differences give t = -inf/+inf/nan with
    p = 0/1/1 respectively, so an identical pair never passes.
    """
    d = np.asarray(candidate, float) - np.asarray(baseline, float)
    if d.ndim != 1 or len(d) < 2:
        raise ShapeError("paired t-test needs two equal-length vectors with at least 2 entries")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean < 0:
            return -np.inf, 0.0
        return (np.inf, 1.0) if mean > 0 else (np.nan, 1.0)
    t = mean / (sd / np.sqrt(len(d)))
    return float(t), float(stats.t.cdf(t, len(d) - 1))


def greedy_costs(policy: Policy, instances, chunk: int = 1024) -> np.ndarray:
    """Greedy rollout costs in inference mode."""
    out = []
    with ad.no_grad():
        for i in range(0, len(instances), chunk):
            out.append(run(policy, instances[i:i + chunk], "greedy", update_stats=False).costs)
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class TrainConfig:
    problem: str = "tsp"
    n: int = 20
    epochs: int = 100
    steps: int = 2500
    batch: int = 512
    lr: float = 1e-4
    lr_decay: float = 1.0
    alpha: float = 0.05
    baseline: str = "rollout"
    warmup: bool = False
    beta: float = 0.8
    eval_size: int = 10000
    val_size: int = 10000
    seed: int = 0
    prize_mode: str = "dist"
    embed_dim: int = 128
    n_layers: int = 3
    n_heads: int = 8
    ff_hidden: int = 512
    tanh_clip: float = 10.0
    critic_hidden: int = 128
    max_grad_norm: float | None = None
    val_oracle: bool = True

    def __post_init__(self):
        self.baseline = BASELINE_ALIASES.get(self.baseline, self.baseline)
        if self.problem not in PROBLEMS:
            raise ContractError(f"unknown problem {self.problem!r}")
        if self.baseline not in BASELINES:
            raise ContractError(f"unknown baseline {self.baseline!r}")
        if self.prize_mode not in PRIZE_MODES:
            raise ContractError(f"unknown prize mode {self.prize_mode!r}")
        for name in ("n", "batch", "eval_size", "val_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("epochs", "steps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ContractError("learning rate and decay must be positive")
        if not 0 < self.alpha < 1:
            raise ContractError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.baseline == "rollout" and self.eval_size < 2:
            raise ContractError("the rollout baseline needs at least 2 evaluation instances")
        self.model_config()  # validates the architecture fields

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.problem, self.embed_dim, self.n_layers, self.n_heads, self.ff_hidden, self.tanh_clip)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def _stream(cfg: TrainConfig, kind: int, *more) -> np.random.Generator:
    # 0 instances, 1 policy sampling, 2 baseline eval sets, 3 init, 4 validation
    return np.random.default_rng([cfg.seed, kind, *more])


@dataclass
class BaselineState:
    kind: str
    m: float | None = None
    critic: Critic | None = None
    policy: Policy | None = None  # frozen rollout policy
    generation: int = 0  # index of the current eval set
    eval_set: list | None = None
    eval_costs: np.ndarray | None = None


@dataclass
class StepResult:
    loss: float
    costs: np.ndarray
    baseline_costs: np.ndarray
    samples: list
    baseline_solutions: list | None
    graph_size: int


@dataclass
class TrainState:
    cfg: TrainConfig
    policy: Policy
    baseline: BaselineState
    epoch: int = 0  # completed epochs
    history: list = field(default_factory=list)
    val_set: list | None = None
    val_opt: np.ndarray | None = None


def eval_set(cfg: TrainConfig, generation: int) -> list:
    rng = _stream(cfg, 2, generation)
    return generate_dataset(cfg.problem, cfg.n, cfg.eval_size, int(rng.integers(2**63)), cfg.prize_mode)


def refresh_rollout_baseline(bl: BaselineState, cfg: TrainConfig):
    bl.eval_set = eval_set(cfg, bl.generation)
    bl.eval_costs = greedy_costs(bl.policy, bl.eval_set)


def init_state(cfg: TrainConfig) -> TrainState:
    init = _stream(cfg, 3)
    policy = Policy(cfg.model_config(), init)
    bl = BaselineState(cfg.baseline)
    if cfg.baseline == "critic":
        bl.critic = Critic(cfg.model_config(), init, cfg.critic_hidden)
    if cfg.baseline == "rollout":
        bl.policy = policy.copy()
        refresh_rollout_baseline(bl, cfg)
    return TrainState(cfg, policy, bl)


def ttest_update(state: TrainState) -> dict:
    """Promote the current policy to rollout baseline if it is significantly better.

    Both policies decode greedily on the current evaluation set; on
    replacement a fresh evaluation set is drawn.
    """
    bl, cfg = state.baseline, state.cfg
    cand = greedy_costs(state.policy, bl.eval_set)
    t, p = paired_ttest(cand, bl.eval_costs)
    replace = p < cfg.alpha
    if replace:
        bl.policy = state.policy.copy()
        bl.generation += 1
        refresh_rollout_baseline(bl, cfg)
    return {"t": t, "p": p, "replaced": bool(replace), "candidate_mean": float(cand.mean())}


def _clip(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def train_step(state: TrainState, instances, rng: np.random.Generator, use_exponential: bool = False) -> StepResult:
    """One gradient step on a batch of instances.

    Baseline rollouts run without gradient tracking and before the sample
    graph is built, so they never add to its memory.
    """
    try:
        return _train_step(state, instances, rng, use_exponential)
    except FloatingPointError as exc:
        raise DivergenceError(f"epoch {state.epoch}: {exc}") from exc


def _train_step(state, instances, rng, use_exponential):
    cfg, policy, bl = state.cfg, state.policy, state.baseline
    batch = make_batch(instances)
    kind = "exponential" if use_exponential else bl.kind
    bl_solutions = None
    if kind == "rollout":
        with ad.no_grad():
            bres = run(bl.policy, batch, "greedy", update_stats=False)
        b = bres.costs
        bl_solutions = bres.solutions()
    res = run(policy, batch, "sample", rng, training=True)
    costs = res.costs
    if kind == "exponential":
        bl.m = exponential_baseline(bl.m, costs, cfg.beta)
        b = np.full_like(costs, bl.m)
    elif kind == "critic":
        v = critic_value(bl.critic, batch, training=True)
        b = v.data.copy()
        bl.critic.params.zero_grad()
        closs = ((v - costs) * (v - costs)).mean()
        closs.backward()
        lr = cfg.lr * cfg.lr_decay ** state.epoch
        adam_step(bl.critic.params, _clip(bl.critic.params.grads(), cfg.max_grad_norm), AdamConfig(lr=lr))
    elif kind == "none":
        b = np.zeros_like(costs)
    loss = reinforce_loss(costs, b, res.log_prob)
    size = ad.graph_size(loss)
    policy.params.zero_grad()
    loss.backward()
    grads = policy.params.grads()
    if not np.isfinite(loss.item()) or not all(np.isfinite(g).all() for g in grads.values()):
        raise DivergenceError(f"non-finite loss or gradient at epoch {state.epoch}")
    lr = cfg.lr * cfg.lr_decay ** state.epoch
    adam_step(policy.params, _clip(grads, cfg.max_grad_norm), AdamConfig(lr=lr))
    if not policy.params.all_finite():
        bad = [k for k, t in policy.params.items() if not np.isfinite(t.data).all()]
        raise DivergenceError(f"non-finite parameters after epoch {state.epoch} step: {bad[:5]}")
    return StepResult(loss.item(), costs, np.asarray(b, float), res.solutions(), bl_solutions, size)


# ---------------------------------------------------------------------------
# validation


def _oracle_ok(cfg: TrainConfig) -> bool:
    if cfg.problem == "tsp":
        return cfg.n <= MAX_TSP_NODES
    return cfg.problem in ("op", "pctsp") and cfg.n <= MAX_SUBSET_NODES


def prepare_validation(state: TrainState):
    cfg = state.cfg
    if state.val_set is None:
        seed = int(_stream(cfg, 4).integers(2**63))
        state.val_set = generate_dataset(cfg.problem, cfg.n, cfg.val_size, seed, cfg.prize_mode)
    if state.val_opt is None and cfg.val_oracle and _oracle_ok(cfg):
        state.val_opt = np.array([solve_exact(i).cost for i in state.val_set])


def mean_gap(costs, optimal, problem: str) -> float:
    if problem == "op":
        return float(np.mean([optimality_gap(-c, -o, maximize=True) for c, o in zip(costs, optimal)]))
    return float(np.mean([optimality_gap(c, o) for c, o in zip(costs, optimal)]))


def validate(state: TrainState) -> tuple:
    prepare_validation(state)
    costs = greedy_costs(state.policy, state.val_set)
    gap = mean_gap(costs, state.val_opt, state.cfg.problem) if state.val_opt is not None else float("nan")
    return float(costs.mean()), gap


# ---------------------------------------------------------------------------
# epoch loop


def train(cfg: TrainConfig, state: TrainState | None = None, on_epoch=None, log=None) -> TrainState:
    """Run (or resume) training until ``cfg.epochs`` epochs are complete.

    ``on_epoch(state)`` is called after every epoch, e.g. to checkpoint.
    Randomness is drawn from per-epoch streams derived from ``cfg.seed``, so
    runs with different baselines see the same training instances and a
    resumed run continues exactly as an uninterrupted one would.
    """
    if state is None:
        state = init_state(cfg)
    state.cfg = cfg
    if not state.history:
        t0 = time.perf_counter()
        vc, vg = validate(state)
        state.history.append({"epoch": 0, "train_cost": None, "val_cost": vc, "val_gap": vg,
                              "baseline_replaced": False, "seconds": time.perf_counter() - t0})
        if log:
            log(state.history[-1])
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        inst_rng = _stream(cfg, 0, state.epoch)
        samp_rng = _stream(cfg, 1, state.epoch)
        warm = cfg.warmup and cfg.baseline == "rollout" and state.epoch == 0
        train_costs = []
        for _ in range(cfg.steps):
            seed = int(inst_rng.integers(2**63))
            instances = generate_dataset(cfg.problem, cfg.n, cfg.batch, seed, cfg.prize_mode)
            res = train_step(state, instances, samp_rng, use_exponential=warm)
            train_costs.append(res.costs.mean())
        replaced = False
        if cfg.baseline == "rollout":
            replaced = ttest_update(state)["replaced"]
        state.epoch += 1
        vc, vg = validate(state)
        state.history.append({"epoch": state.epoch,
                              "train_cost": float(np.mean(train_costs)) if train_costs else None,
                              "val_cost": vc, "val_gap": vg, "baseline_replaced": replaced,
                              "seconds": time.perf_counter() - t0})
        if log:
            log(state.history[-1])
        if on_epoch:
            on_epoch(state)
    return state
