"""Running the factorized policy: greedy, sampled and teacher-forced decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .model import Policy, encode, precompute, step_log_probs
from .problems import (Batch, DecodeState, Solution, _mask, _step, initial_state, make_batch, max_steps,
                       state_costs, state_sequences)


@dataclass
class RolloutResult:
    batch: Batch
    state: DecodeState
    costs: np.ndarray  # (B,)
    log_prob: Tensor  # (B,) summed over steps; padded steps add exactly 0

    def solutions(self) -> list:
        seqs = state_sequences(self.state)
        out = []
        for r, seq in enumerate(seqs):
            rev = self.state.revealed[r] if self.state.revealed is not None else None
            out.append(Solution(seq, float(self.costs[r]), float(self.log_prob.data[r]), rev))
        return out


def greedy_pick(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the lowest tied index."""
    return probs.argmax(axis=-1)


def sample_pick(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw with one uniform per row."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=-1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    # guard against landing on a zero-probability tail entry through rounding
    bad = probs[np.arange(len(idx)), idx] <= 0
    if bad.any():
        nz = probs[bad] > 0
        idx[bad] = nz.shape[1] - 1 - np.argmax(nz[:, ::-1], axis=1)
    return idx


def run(policy: Policy, instances, decode: str = "greedy", rng: np.random.Generator | None = None,
        training: bool = False, actions: np.ndarray | None = None, update_stats: bool | None = None,
        record_steps: bool = False) -> RolloutResult:
    """Encode once and decode to termination for every row of the batch.

    ``actions`` (B x T) forces the sequence (teacher forcing); padding
    entries after a row terminates are ignored.
    """
    batch = make_batch(instances)
    if decode not in ("greedy", "sample"):
        raise ContractError(f"unknown decode mode {decode!r}")
    if decode == "sample" and rng is None and actions is None:
        raise ContractError("sampling needs an rng")
    emb = encode(policy, batch, training, update_stats)
    cache = precompute(policy, emb)
    state = initial_state(batch)
    total = None
    limit = max_steps(batch)
    step_lp = []
    while not state.done.all():
        if state.t > limit:
            raise RuntimeError("rollout exceeded its step bound")
        mask = _mask(batch, state)
        logp = step_log_probs(policy, batch, state, cache, mask)
        if np.isnan(logp.data).any():
            raise FloatingPointError(f"non-finite log-probabilities at step {state.t}")
        if actions is not None:
            col = state.t - 1
            if col >= actions.shape[1]:
                raise ContractError("forced sequence ended before the rollout terminated")
            a = np.where(state.done, 0, actions[:, col])
            a = np.asarray(a, dtype=np.int64)
        elif decode == "greedy":
            a = greedy_pick(logp.data)
        else:
            a = sample_pick(np.exp(logp.data), rng)
        rows = np.arange(batch.size)
        chosen = logp[rows, a]
        if state.done.any():
            chosen = chosen * (~state.done).astype(np.float64)
        if record_steps:
            step_lp.append(chosen.data.copy())
        total = chosen if total is None else total + chosen
        state = _step(batch, state, a, mask)
    costs = state_costs(batch, state)
    res = RolloutResult(batch, state, costs, total if total is not None else Tensor(np.zeros(batch.size)))
    if record_steps:
        res.step_log_probs = np.stack(step_lp, axis=1)
    return res


def rollout(policy: Policy, instances, mode: str = "greedy", rng: np.random.Generator | None = None,
            training: bool = False) -> list:
    """Decode solutions for a list of same-problem instances (no gradients)."""
    with ad.no_grad():
        return run(policy, instances, mode, rng, training, update_stats=False).solutions()


def _pad(seqs) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out


def log_prob(policy: Policy, instances, sequences, training: bool = False) -> Tensor:
    """Teacher-forced log p(sequence | instance) for each row, shape (B,).

    Raises FeasibilityError when a sequence leaves the feasible set, and
    ContractError when it stops before the rollout terminates.
    """
    batch = make_batch(instances)
    if batch.size == 1 and sequences and np.ndim(sequences[0]) == 0:
        sequences = [sequences]
    acts = _pad([list(s) for s in sequences])
    res = run(policy, batch, actions=acts, training=training, update_stats=False)
    taken = res.state.steps_taken
    lens = np.array([len(s) for s in sequences])
    if (taken != lens).any():
        raise ContractError("sequence length does not match the terminating rollout")
    return res.log_prob


def sample_best_of(policy: Policy, instance, k: int, rng: np.random.Generator, chunk: int = 1280) -> Solution:
    """Best of ``k`` sampled solutions; ties resolve to the first drawn."""
    if k < 1:
        raise ContractError("k must be at least 1")
    best = None
    drawn = 0
    with ad.no_grad():
        emb_batch = None
        while drawn < k:
            m = min(chunk, k - drawn)
            if emb_batch is None or emb_batch.size != m:
                emb_batch = make_batch([instance] * m)
            sols = run(policy, emb_batch, "sample", rng, update_stats=False).solutions()
            for s in sols:
                if best is None or s.cost < best.cost:
                    best = s
            drawn += m
    return best
