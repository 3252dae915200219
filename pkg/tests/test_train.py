import numpy as np
import pytest
from scipy import integrate
from math import lgamma, exp, sqrt, pi

from attnroute import autodiff as ad
from attnroute.autodiff import ContractError, ShapeError, Tensor, finite_diff_check
from attnroute.problems import generate_dataset
from attnroute.rollout import log_prob, rollout
from attnroute.train import (DivergenceError, TrainConfig, exponential_baseline, greedy_costs, init_state,
                             paired_ttest, reinforce_loss, train, train_step, ttest_update)

TINY = dict(n=5, epochs=2, steps=3, batch=16, embed_dim=8, n_layers=1, n_heads=2, ff_hidden=16, eval_size=32,
            val_size=16)


def cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def params_of(state):
    return {k: t.data.copy() for k, t in state.policy.params.items()}


def student_t_cdf(t, df):
    """Independent Student-t CDF by numerical integration of the density."""
    c = exp(lgamma((df + 1) / 2) - lgamma(df / 2)) / sqrt(df * pi)
    pdf = lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)
    if t < 0:
        return integrate.quad(pdf, -np.inf, t, epsabs=1e-14, epsrel=1e-12)[0]
    return 0.5 + integrate.quad(pdf, 0, t, epsabs=1e-14, epsrel=1e-12)[0]


def test_zero_advantage_gives_zero_gradient():
    state = init_state(cfg())
    data = generate_dataset("tsp", 5, 8, 0)
    sols = rollout(state.policy, data, "sample", np.random.default_rng(1))
    costs = np.array([s.cost for s in sols])
    state.policy.params.zero_grad()
    reinforce_loss(costs, costs, log_prob(state.policy, data, [s.actions for s in sols])).backward()
    assert all(np.all(g == 0) for g in state.policy.params.grads().values())


def test_zero_baseline_is_plain_reinforce():
    lp = Tensor(np.array([-1.0, -2.0, -0.5]), requires_grad=True)
    costs = np.array([3.0, 4.0, 5.0])
    reinforce_loss(costs, 0.0, lp).backward()
    assert np.allclose(lp.grad, costs / 3)


def test_reinforce_shape_mismatch():
    with pytest.raises(ShapeError):
        reinforce_loss(np.ones(3), np.ones(2), Tensor(np.zeros(3)))


def test_surrogate_gradient_finite_differences():
    state = init_state(cfg())
    pol = state.policy
    data = generate_dataset("tsp", 5, 6, 2)
    sols = rollout(pol, data, "sample", np.random.default_rng(3))
    seqs = [s.actions for s in sols]
    costs = np.array([s.cost for s in sols])
    b = costs.mean() + 0.1

    def surrogate():
        return reinforce_loss(costs, b, log_prob(pol, data, seqs))

    pol.params.zero_grad()
    surrogate().backward()
    for name in ("dec.Wq", "enc.layer0.ff.W0"):
        t = pol.params[name]

        def f(x, t=t):
            old = t.data
            t.data = x
            with ad.no_grad():
                out = surrogate().item()
            t.data = old
            return out

        assert finite_diff_check(f, t.data.copy(), t.grad, h=1e-6) < 1e-7


def test_exponential_baseline_recurrence():
    assert exponential_baseline(None, [1.0, 3.0]) == 2.0
    assert exponential_baseline(5.0, [1.0, 3.0], beta=0.0) == 2.0
    m, c = 10.0, 2.0
    for k in range(1, 20):
        m = exponential_baseline(m, [c, c])
        assert np.isclose(abs(m - c), 0.8 ** k * 8.0)
    with pytest.raises(ContractError):
        exponential_baseline(1.0, [1.0], beta=1.0)


def test_ttest_identical_and_clear_improvement():
    x = np.random.default_rng(4).normal(size=100)
    t, p = paired_ttest(x, x)
    assert p == 1.0
    rng = np.random.default_rng(5)
    base = rng.uniform(3, 4, size=1000)
    t, p = paired_ttest(base - 0.5 + rng.normal(0, 0.01, 1000), base)
    assert p < 1e-12
    assert paired_ttest(base - 1, base)[1] == 0.0


def test_ttest_matches_independent_cdf():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=30), rng.normal(0.3, 1, size=30)
    t, p = paired_ttest(a, b)
    d = a - b
    t_ref = d.mean() / (d.std(ddof=1) / np.sqrt(30))
    assert abs(t - t_ref) < 1e-12
    assert abs(p - student_t_cdf(t_ref, 29)) < 1e-6


def test_ttest_update_identical_parameters_keeps_baseline():
    state = init_state(cfg())
    old = state.baseline.policy
    out = ttest_update(state)
    assert not out["replaced"] and state.baseline.policy is old and state.baseline.generation == 0


def test_rollout_baseline_deterministic_and_zero_advantage_on_agreement():
    # three nodes: only six orderings, so many samples coincide with greedy
    state = init_state(cfg(n=3))
    data = generate_dataset("tsp", 3, 64, 7)
    assert np.array_equal(greedy_costs(state.baseline.policy, data), greedy_costs(state.baseline.policy, data))
    res = train_step(state, data, np.random.default_rng(8))
    same = [s.actions == g.actions for s, g in zip(res.samples, res.baseline_solutions)]
    assert any(same)
    adv = res.costs - res.baseline_costs
    assert np.all(adv[np.array(same)] == 0)


def test_baseline_rollouts_do_not_grow_the_graph():
    sizes = {}
    for kind in ("rollout", "none"):
        state = init_state(cfg(baseline=kind))
        sizes[kind] = train_step(state, generate_dataset("tsp", 5, 16, 9), np.random.default_rng(10)).graph_size
    assert sizes["rollout"] == sizes["none"]


def test_zero_steps_leave_parameters_unchanged():
    c = cfg(steps=0)
    before = params_of(init_state(c))
    after = params_of(train(c))
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_bit_reproducible():
    a, b = train(cfg()), train(cfg())
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert [h["val_cost"] for h in a.history] == [h["val_cost"] for h in b.history]


def test_history_records():
    st = train(cfg(epochs=3))
    assert [h["epoch"] for h in st.history] == [0, 1, 2, 3]
    assert set(st.history[1]) == {"epoch", "train_cost", "val_cost", "val_gap", "baseline_replaced", "seconds"}
    assert all(np.isfinite(h["val_gap"]) and h["val_gap"] >= -1e-9 for h in st.history)


@pytest.mark.parametrize("kind", ["exponential", "critic", "none"])
def test_other_baselines_train(kind):
    st = train(cfg(baseline=kind))
    assert st.epoch == 2 and st.policy.params.all_finite()
    if kind == "exponential":
        assert st.baseline.m is not None
    if kind == "critic":
        assert st.baseline.critic.params.all_finite()


def test_warmup_uses_exponential_first():
    st = init_state(cfg(warmup=True, epochs=1))
    train(st.cfg, st)
    assert st.baseline.m is not None
    st2 = init_state(cfg(warmup=False, epochs=1))
    train(st2.cfg, st2)
    assert st2.baseline.m is None


def test_instance_stream_shared_across_baselines():
    seen = {}
    import attnroute.train as tr

    real = tr.generate_dataset
    for kind in ("exponential", "rollout"):
        log = []

        def spy(problem, n, count, seed, prize_mode="dist", log=log):
            if count == TINY["batch"]:
                log.append(seed)
            return real(problem, n, count, seed, prize_mode)

        tr.generate_dataset = spy
        try:
            train(cfg(baseline=kind, val_size=10))
        finally:
            tr.generate_dataset = real
        seen[kind] = log
    assert seen["exponential"] == seen["rollout"] and len(seen["rollout"]) == 6


def test_divergence_detected():
    state = init_state(cfg())
    state.policy.params["dec.Wq"].data[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train_step(state, generate_dataset("tsp", 5, 8, 11), np.random.default_rng(12))


def test_lr_decay_changes_updates():
    a = train(cfg(lr=1e-3, lr_decay=0.5))
    b = train(cfg(lr=1e-3))
    pa, pb = params_of(a), params_of(b)
    assert any(not np.array_equal(pa[k], pb[k]) for k in pa)


@pytest.mark.parametrize("bad", [dict(alpha=1.0), dict(batch=0), dict(lr=0.0), dict(baseline="greedy"),
                                 dict(n_layers=0), dict(problem="vrp")])
def test_config_validation(bad):
    with pytest.raises(ContractError):
        cfg(**bad)
