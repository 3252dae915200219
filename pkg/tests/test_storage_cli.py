import json

import numpy as np
import pytest

from attnroute.cli import cache_path, main, oracle_costs
from attnroute.autodiff import ContractError
from attnroute.heuristics import nearest_neighbor
from attnroute.model import ModelConfig, Policy
from attnroute.problems import PROBLEMS, generate_dataset
from attnroute.storage import (checkpoint_bytes, checkpoint_from_bytes, checkpoint_to_state, instances_equal,
                               load_checkpoint, load_dataset, save_checkpoint, save_dataset, state_to_checkpoint)
from attnroute.train import TrainConfig, init_state, train

TINY = dict(n=5, epochs=1, steps=2, batch=8, embed_dim=8, n_layers=1, n_heads=2, ff_hidden=16, eval_size=16,
            val_size=8)


def params_of(policy):
    return {k: t.data.copy() for k, t in policy.params.items()}


def test_dataset_value_roundtrip(tmp_path):
    data = []
    for i, p in enumerate(PROBLEMS):
        data += generate_dataset(p, 7 + i, 1000 // len(PROBLEMS) + 1, i)
    path = tmp_path / "d.jsonl"
    save_dataset(path, data)
    back = load_dataset(path)
    assert len(back) == len(data)
    assert all(instances_equal(a, b) for a, b in zip(data, back))


def test_spctsp_real_prizes_survive_roundtrip(tmp_path):
    data = generate_dataset("spctsp", 6, 5, 1)
    save_dataset(tmp_path / "s.jsonl", data)
    back = load_dataset(tmp_path / "s.jsonl")
    for a, b in zip(data, back):
        assert np.array_equal(a.real_prizes, b.real_prizes)


@pytest.mark.parametrize("kind", ["rollout", "exponential", "critic"])
def test_checkpoint_byte_roundtrip(tmp_path, kind):
    state = train(TrainConfig(**TINY, baseline=kind))
    raw = checkpoint_bytes(state_to_checkpoint(state))
    assert checkpoint_bytes(checkpoint_from_bytes(raw)) == raw
    save_checkpoint(tmp_path / "c.ck", state_to_checkpoint(state))
    assert (tmp_path / "c.ck").read_bytes() == raw


def test_checkpoint_records_config_and_rejects_other_model(tmp_path):
    cfg = TrainConfig(**TINY)
    save_checkpoint(tmp_path / "c.ck", state_to_checkpoint(init_state(cfg)))
    ck = load_checkpoint(tmp_path / "c.ck", cfg.model_config())
    assert TrainConfig.from_dict(ck.train) == cfg
    other = ModelConfig(**{**cfg.model_config().to_dict(), "embed_dim": 16})
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "c.ck", other)
    with pytest.raises(ContractError):
        checkpoint_to_state(ck, TrainConfig(**{**TINY, "embed_dim": 16}))


def test_corrupt_checkpoint_rejected():
    with pytest.raises(ContractError):
        checkpoint_from_bytes(b"not a checkpoint at all")


def test_resume_matches_uninterrupted_run():
    full = train(TrainConfig(**{**TINY, "epochs": 2}))
    half = train(TrainConfig(**TINY))
    ck = checkpoint_from_bytes(checkpoint_bytes(state_to_checkpoint(half)))
    resumed = train(TrainConfig(**{**TINY, "epochs": 2}), checkpoint_to_state(ck, TrainConfig(**{**TINY, "epochs": 2})))
    a, b = params_of(full.policy), params_of(resumed.policy)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert [h["val_cost"] for h in full.history] == [h["val_cost"] for h in resumed.history]


def test_resume_with_no_further_epochs_is_identical():
    state = train(TrainConfig(**TINY))
    raw = checkpoint_bytes(state_to_checkpoint(state))
    again = train(state.cfg, checkpoint_to_state(checkpoint_from_bytes(raw)))
    assert checkpoint_bytes(state_to_checkpoint(again)) == raw


# ---------------------------------------------------------------------------
# command line


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    with open(path) as fh:
        return json.load(fh)


def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--problem", "cvrp", "--n", 10, "--count", 20, "--seed", 3,
                   "--out", tmp_path / name) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert run("generate", "--problem", "tsp", "--n", 10, "--count", 0, "--out", tmp_path / "e") == 0
    assert (tmp_path / "e").read_bytes() == b"" and load_dataset(tmp_path / "e") == []


@pytest.fixture
def trained(tmp_path):
    ck = tmp_path / "m.ck"
    assert run("train", "--problem", "tsp", "--n", 6, "--epochs", 1, "--steps", 2, "--batch", 8,
               "--eval-size", 16, "--val-size", 8, "--out", ck, "--history", tmp_path / "h.jsonl", "--quiet") == 0
    data = tmp_path / "d.jsonl"
    assert run("generate", "--problem", "tsp", "--n", 6, "--count", 12, "--seed", 9, "--out", data) == 0
    return ck, data


def test_train_writes_history_and_config(trained, tmp_path):
    ck, _ = trained
    lines = [json.loads(x) for x in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    c = load_checkpoint(ck)
    assert c.train["n"] == 6 and c.train["batch"] == 8 and c.epoch == 1


def test_eval_greedy_repeatable_and_gap(trained, tmp_path):
    ck, data = trained
    outs = []
    for name in ("r1", "r2"):
        assert run("eval", "--checkpoint", ck, "--dataset", data, "--oracle", "--out", tmp_path / name) == 0
        rep = read(tmp_path / name)
        rep.pop("seconds")
        outs.append(rep)
    assert outs[0] == outs[1]
    rep = outs[0]
    assert rep["count"] == 12
    assert all(r["gap"] >= -1e-9 for r in rep["rows"])
    assert np.isclose(rep["mean_cost"], np.mean([r["cost"] for r in rep["rows"]]))
    assert np.isclose(rep["mean_gap"], np.mean([r["gap"] for r in rep["rows"]]))


def test_eval_sampling_seeded(trained, tmp_path):
    ck, data = trained
    reps = []
    for name in ("s1", "s2"):
        assert run("eval", "--checkpoint", ck, "--dataset", data, "--mode", "sample", "--k", 16, "--seed", 4,
                   "--out", tmp_path / name) == 0
        reps.append([r["cost"] for r in read(tmp_path / name)["rows"]])
    assert reps[0] == reps[1]
    greedy = tmp_path / "g"
    run("eval", "--checkpoint", ck, "--dataset", data, "--out", greedy)
    assert read(greedy)["k"] == 1


def test_eval_problem_mismatch_is_config_error(trained, tmp_path):
    ck, _ = trained
    run("generate", "--problem", "op", "--n", 6, "--count", 3, "--out", tmp_path / "op")
    assert run("eval", "--checkpoint", ck, "--dataset", tmp_path / "op") == 2


def test_baseline_matches_library(tmp_path):
    path = tmp_path / "t.jsonl"
    run("generate", "--problem", "tsp", "--n", 9, "--count", 15, "--seed", 2, "--out", path)
    assert run("baseline", "--dataset", path, "--method", "nn", "--out", tmp_path / "r") == 0
    rep = read(tmp_path / "r")
    direct = [nearest_neighbor(i) for i in load_dataset(path)]
    assert [r["cost"] for r in rep["rows"]] == [s.cost for s in direct]
    assert [r["actions"] for r in rep["rows"]] == [list(s.actions) for s in direct]


def test_oracle_cache_reused(tmp_path):
    path = tmp_path / "p.jsonl"
    run("generate", "--problem", "pctsp", "--n", 7, "--count", 6, "--seed", 5, "--out", path)
    data = load_dataset(path)
    costs, solved = oracle_costs(path, data)
    assert solved == 6
    again, solved = oracle_costs(path, data)
    assert solved == 0 and np.array_equal(costs, again)
    # a poisoned cache entry is returned verbatim, proving it is read rather than recomputed
    cache = json.loads(open(cache_path(path)).read())
    key = sorted(cache)[0]
    cache[key]["cost"] = 123.0
    open(cache_path(path), "w").write(json.dumps(cache))
    assert 123.0 in oracle_costs(path, data)[0]


def test_oracle_workers_agree(tmp_path):
    path = tmp_path / "o.jsonl"
    run("generate", "--problem", "op", "--n", 7, "--count", 6, "--seed", 1, "--out", path)
    assert run("oracle", "--dataset", path, "--workers", 2, "--out", tmp_path / "w") == 0
    (tmp_path / "o.jsonl.oracle.json").unlink()
    assert run("oracle", "--dataset", path, "--out", tmp_path / "s") == 0
    assert read(tmp_path / "w")["rows"] == read(tmp_path / "s")["rows"]


def test_solve_hides_real_prizes(tmp_path):
    ck = tmp_path / "sp.ck"
    run("train", "--problem", "spctsp", "--n", 5, "--epochs", 1, "--steps", 1, "--batch", 4, "--eval-size", 8,
        "--val-size", 4, "--out", ck, "--quiet")
    data = tmp_path / "sp.jsonl"
    run("generate", "--problem", "spctsp", "--n", 5, "--count", 3, "--seed", 8, "--out", data)
    assert run("solve", "--checkpoint", ck, "--dataset", data, "--out", tmp_path / "sol") == 0
    text = (tmp_path / "sol").read_text()
    rep = json.loads(text)
    assert all("actions" in r for r in rep["rows"])
    for inst in load_dataset(data):
        for p in inst.real_prizes:
            assert repr(float(p)) not in text


def test_exit_codes(tmp_path):
    path = tmp_path / "big.jsonl"
    run("generate", "--problem", "tsp", "--n", 30, "--count", 1, "--out", path)
    assert run("oracle", "--dataset", path) == 3
    assert run("generate", "--problem", "tsp", "--n", 5, "--count", -1, "--out", tmp_path / "x") == 2
    assert run("train", "--problem", "tsp", "--n", 5, "--batch", 0, "--out", tmp_path / "y", "--quiet") == 2
    with pytest.raises(SystemExit):
        run("generate", "--problem", "nope", "--n", 5, "--count", 1, "--out", tmp_path / "z")
