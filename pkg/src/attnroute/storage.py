"""Dataset (JSON lines) and checkpoint (binary) formats."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autodiff import BNStats, ContractError, ParamStore
from .model import Critic, ModelConfig, Policy
from .problems import Instance

# ---------------------------------------------------------------------------
# atomic writes


def atomic_write(path, data: bytes):
    """Write to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# datasets

_ARRAYS = ("coords", "depot", "demands", "prizes", "penalties")
_SCALARS = ("capacity", "max_length", "min_prize")


def _floats(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def instance_to_record(inst: Instance, hide: bool = False) -> dict:
    """JSON-ready dict. Real SPCTSP prizes live under ``hidden``; ``hide``
    drops them (for output that must not leak them)."""
    rec = {"problem": inst.problem, "n": inst.n, "seed": inst.seed, "prize_mode": inst.prize_mode}
    for k in _ARRAYS:
        rec[k] = _floats(getattr(inst, k))
    for k in _SCALARS:
        v = getattr(inst, k)
        rec[k] = None if v is None else float(v)
    if inst.real_prizes is not None and not hide:
        rec["hidden"] = {"real_prizes": _floats(inst.real_prizes)}
    return rec


def record_to_instance(rec: dict) -> Instance:
    kw = {}
    for k in _ARRAYS:
        v = rec.get(k)
        kw[k] = None if v is None else np.array(v, dtype=np.float64)
    for k in _SCALARS:
        kw[k] = rec.get(k)
    hidden = rec.get("hidden") or {}
    real = hidden.get("real_prizes")
    inst = Instance(rec["problem"], prize_mode=rec.get("prize_mode"), seed=rec.get("seed"),
                    real_prizes=None if real is None else np.array(real, dtype=np.float64), **kw)
    if inst.n != rec["n"]:
        raise ContractError(f"record declares n={rec['n']} but has {inst.n} coordinates")
    return inst


def dumps_dataset(instances) -> str:
    # json writes floats with the shortest repr that round-trips exactly
    return "".join(json.dumps(instance_to_record(i), sort_keys=True) + "\n" for i in instances)


def save_dataset(path, instances):
    atomic_write(path, dumps_dataset(instances).encode())


def load_dataset(path) -> list:
    with open(path) as fh:
        return [record_to_instance(json.loads(line)) for line in fh if line.strip()]


def instances_equal(a: Instance, b: Instance) -> bool:
    """Value-level equality (arrays compared exactly)."""
    for k in ("problem", "prize_mode", "seed", *_SCALARS):
        if getattr(a, k) != getattr(b, k):
            return False
    for k in (*_ARRAYS, "real_prizes"):
        x, y = getattr(a, k), getattr(b, k)
        if (x is None) != (y is None):
            return False
        if x is not None and not np.array_equal(np.asarray(x, float), np.asarray(y, float)):
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 header length | header (sorted-key JSON)
#         | raw little-endian float64 blobs in header["arrays"] order

MAGIC = b"ATTNRTE\x00"
VERSION = 1


@dataclass
class Checkpoint:
    model: ModelConfig
    policy: Policy
    train: dict | None = None  # training config, if saved from a run
    epoch: int = 0
    history: list | None = None
    baseline: dict | None = None  # kind, m, generation
    baseline_policy: Policy | None = None
    critic: Critic | None = None
    rng: dict | None = None


def _store_arrays(prefix: str, store: ParamStore, bn: dict, arrays: list, meta: dict):
    names = store.names()
    meta["params"] = names
    meta["steps"] = [store.steps[k] for k in names]
    for k in names:
        arrays.append((f"{prefix}param/{k}", store[k].data))
        arrays.append((f"{prefix}adam_m/{k}", store.m[k]))
        arrays.append((f"{prefix}adam_v/{k}", store.v[k]))
    meta["bn"] = sorted(bn)
    meta["bn_momentum"] = [bn[k].momentum for k in meta["bn"]]
    for k in meta["bn"]:
        arrays.append((f"{prefix}bn/{k}/mean", bn[k].mean))
        arrays.append((f"{prefix}bn/{k}/var", bn[k].var))


def _load_arrays(prefix: str, meta: dict, blobs: dict) -> tuple:
    store = ParamStore()
    for k, s in zip(meta["params"], meta["steps"]):
        store.add(k, blobs[f"{prefix}param/{k}"])
        store.m[k] = blobs[f"{prefix}adam_m/{k}"]
        store.v[k] = blobs[f"{prefix}adam_v/{k}"]
        store.steps[k] = s
    bn = {k: BNStats(blobs[f"{prefix}bn/{k}/mean"], blobs[f"{prefix}bn/{k}/var"], mom)
          for k, mom in zip(meta["bn"], meta["bn_momentum"])}
    return store, bn


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    arrays: list = []
    header = {"format": "attnroute-checkpoint", "version": VERSION, "model": ck.model.to_dict(),
              "train": ck.train, "epoch": ck.epoch, "history": ck.history or [], "baseline": ck.baseline,
              "rng": ck.rng, "parts": {}}
    parts = [("policy", "", ck.policy), ("baseline_policy", "bl.", ck.baseline_policy), ("critic", "cr.", ck.critic)]
    for name, prefix, obj in parts:
        if obj is None:
            continue
        meta: dict = {"prefix": prefix}
        _store_arrays(prefix, obj.params, obj.bn, arrays, meta)
        if name == "critic":
            meta["hidden"] = int(obj.params["critic.mlp.W0"].data.shape[1])
        header["parts"][name] = meta
    header["arrays"] = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    return b"".join(out)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off: off + hlen])
    off += hlen
    blobs = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        blobs[entry["name"]] = np.frombuffer(data, "<f8", count, off).astype(np.float64).reshape(entry["shape"])
        off += 8 * count
    if off != len(data):
        raise ContractError("checkpoint has trailing or missing bytes")
    model = ModelConfig(**header["model"])
    parts = header["parts"]

    def policy(name):
        if name not in parts:
            return None
        store, bn = _load_arrays(parts[name]["prefix"], parts[name], blobs)
        return Policy(model, store=store, bn=bn)

    critic = None
    if "critic" in parts:
        critic = Critic.__new__(Critic)
        critic.cfg = model
        critic.params, critic.bn = _load_arrays(parts["critic"]["prefix"], parts["critic"], blobs)
    return Checkpoint(model, policy("policy"), header["train"], header["epoch"], header["history"],
                      header["baseline"], policy("baseline_policy"), critic, header["rng"])


def save_checkpoint(path, ck: Checkpoint):
    atomic_write(path, checkpoint_bytes(ck))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ck = checkpoint_from_bytes(fh.read())
    if expect is not None and ck.model.to_dict() != expect.to_dict():
        raise ContractError(f"checkpoint model {ck.model.to_dict()} does not match {expect.to_dict()}")
    return ck


# ---------------------------------------------------------------------------
# training state <-> checkpoint


def state_to_checkpoint(state) -> Checkpoint:
    cfg = state.cfg
    bl = state.baseline
    return Checkpoint(cfg.model_config(), state.policy, cfg.to_dict(), state.epoch, list(state.history),
                      {"kind": bl.kind, "m": bl.m, "generation": bl.generation}, bl.policy, bl.critic,
                      {"seed": cfg.seed, "next_epoch": state.epoch})


def checkpoint_to_state(ck: Checkpoint, cfg=None):
    """Rebuild a resumable training state. ``cfg`` may extend the epoch
    count but must describe the same model and baseline."""
    from .train import BaselineState, TrainConfig, TrainState, refresh_rollout_baseline

    if ck.train is None:
        raise ContractError("checkpoint holds no training state")
    saved = TrainConfig.from_dict(ck.train)
    cfg = saved if cfg is None else cfg
    if cfg.model_config().to_dict() != ck.model.to_dict():
        raise ContractError("config describes a different model than the checkpoint")
    for k in ("problem", "n", "baseline", "seed", "prize_mode"):
        if getattr(cfg, k) != getattr(saved, k):
            raise ContractError(f"config field {k!r} differs from the checkpoint")
    b = ck.baseline or {"kind": cfg.baseline}
    bl = BaselineState(b["kind"], b.get("m"), ck.critic, ck.baseline_policy, b.get("generation", 0))
    if bl.kind == "rollout":
        refresh_rollout_baseline(bl, cfg)
    return TrainState(cfg, ck.policy, bl, ck.epoch, list(ck.history or []))
