"""Attention encoder-decoder policy and the attention critic."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BNStats, ContractError, ParamStore, Tensor
from .problems import Batch, DecodeState

# logit clipping range for the output layer
TANH_CLIP = 10.0

NODE_FEATURES = {"tsp": 2, "cvrp": 3, "sdvrp": 3, "op": 3, "pctsp": 4, "spctsp": 4}


@dataclass
class ModelConfig:
    problem: str = "tsp"
    embed_dim: int = 128
    n_layers: int = 3
    n_heads: int = 8
    ff_hidden: int = 512
    tanh_clip: float = TANH_CLIP

    def __post_init__(self):
        if self.problem not in NODE_FEATURES:
            raise ContractError(f"unknown problem {self.problem!r}")
        if self.n_layers < 1:
            raise ContractError("encoder needs at least one layer")
        if self.embed_dim % self.n_heads:
            raise ContractError("embed_dim must be divisible by n_heads")

    @property
    def key_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def node_dim(self) -> int:
        return NODE_FEATURES[self.problem]

    @property
    def context_dim(self) -> int:
        if self.problem == "tsp":
            return 3 * self.embed_dim
        return 2 * self.embed_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_encoder(store: ParamStore, bn: dict, cfg: ModelConfig, rng, prefix: str):
    d, f = cfg.embed_dim, cfg.ff_hidden
    store.add(f"{prefix}init.W", _uniform(rng, (cfg.node_dim, d), cfg.node_dim))
    store.add(f"{prefix}init.b", _uniform(rng, (d,), cfg.node_dim))
    if cfg.problem != "tsp":
        store.add(f"{prefix}init.W0", _uniform(rng, (2, d), 2))
        store.add(f"{prefix}init.b0", _uniform(rng, (d,), 2))
    for layer in range(cfg.n_layers):
        p = f"{prefix}layer{layer}."
        for name in ("Wq", "Wk", "Wv"):
            store.add(p + name, _uniform(rng, (d, d), d))
        store.add(p + "Wo", _uniform(rng, (d, d), d))
        store.add(p + "ff.W0", _uniform(rng, (d, f), d))
        store.add(p + "ff.b0", _uniform(rng, (f,), d))
        store.add(p + "ff.W1", _uniform(rng, (f, d), f))
        store.add(p + "ff.b1", _uniform(rng, (d,), f))
        for k in (1, 2):
            store.add(p + f"bn{k}.w", np.ones(d))
            store.add(p + f"bn{k}.b", np.zeros(d))
            bn[p + f"bn{k}"] = BNStats(np.zeros(d), np.ones(d))


class Policy:
    """Learnable parameters and batch-norm statistics of the attention model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, store: ParamStore | None = None,
                 bn: dict | None = None):
        self.cfg = cfg
        if store is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            store, bn = ParamStore(), {}
            _init_encoder(store, bn, cfg, rng, "enc.")
            d = cfg.embed_dim
            if cfg.problem == "tsp":
                store.add("dec.v_last", _uniform(rng, (d,), d))
                store.add("dec.v_first", _uniform(rng, (d,), d))
            store.add("dec.Wq", _uniform(rng, (cfg.context_dim, d), cfg.context_dim))
            store.add("dec.Wk", _uniform(rng, (d, d), d))
            store.add("dec.Wv", _uniform(rng, (d, d), d))
            store.add("dec.Wo", _uniform(rng, (d, d), d))
            store.add("dec.Wk_logit", _uniform(rng, (d, d), d))
            if cfg.problem == "sdvrp":
                store.add("dec.Wk_demand", _uniform(rng, (1, d), 1))
                store.add("dec.Wv_demand", _uniform(rng, (1, d), 1))
                store.add("dec.Wk_logit_demand", _uniform(rng, (1, d), 1))
        self.params = store
        self.bn = bn if bn is not None else {}

    def copy(self) -> "Policy":
        bn = {k: BNStats(v.mean.copy(), v.var.copy(), v.momentum) for k, v in self.bn.items()}
        return Policy(self.cfg, store=self.params.copy(), bn=bn)


# ---------------------------------------------------------------------------
# encoder


def node_features(batch: Batch) -> tuple:
    """(depot coords or None, customer feature matrix) in model order."""
    p = batch.problem
    if p == "tsp":
        return None, batch.coords
    xy = batch.coords[:, 1:]
    if p in ("cvrp", "sdvrp"):
        extra = [batch.demand[:, 1:, None]]
    elif p == "op":
        extra = [batch.prize[:, 1:, None]]
    else:
        extra = [batch.prize[:, 1:, None], batch.penalty[:, 1:, None]]
    return batch.coords[:, :1], np.concatenate([xy] + extra, axis=-1)


def init_embed(batch: Batch, params: ParamStore, prefix: str = "enc.") -> Tensor:
    depot, feats = node_features(batch)
    W = params[prefix + "init.W"]
    if feats.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"expected {W.shape[0]} node features, got {feats.shape[-1]}")
    h = ad.matmul(Tensor(feats), W) + params[prefix + "init.b"]
    if depot is None:
        return h
    h0 = ad.matmul(Tensor(depot), params[prefix + "init.W0"]) + params[prefix + "init.b0"]
    return ad.concat([h0, h], axis=1)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, n, d = x.shape
    return x.reshape(B, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, M, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, M * dk)


def mha(h: Tensor, params: ParamStore, prefix: str, n_heads: int, adjacency=None,
        return_weights: bool = False):
    """Multi-head self attention over the nodes of each instance.

    ``adjacency`` (n x n or B x n x n, True = may attend) defaults to the
    complete graph with self loops.
    """
    B, n, d = h.shape
    dk = d // n_heads
    q = _split_heads(ad.matmul(h, params[prefix + "Wq"]), n_heads)
    k = _split_heads(ad.matmul(h, params[prefix + "Wk"]), n_heads)
    v = _split_heads(ad.matmul(h, params[prefix + "Wv"]), n_heads)
    compat = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    mask = None
    if adjacency is not None:
        adj = np.asarray(adjacency, dtype=bool)
        if not adj.any(axis=-1).all():
            raise ad.InvalidMaskError("adjacency leaves a node with no neighbours")
        mask = adj[:, None] if adj.ndim == 3 else adj[None, None]
    attn = ad.softmax_last(compat, mask)
    heads = ad.matmul(attn, v)
    out = ad.matmul(_merge_heads(heads), params[prefix + "Wo"])
    return (out, attn) if return_weights else out


def attention_layer(h: Tensor, params: ParamStore, bn: dict, prefix: str, n_heads: int,
                    training: bool, update_stats: bool = True, adjacency=None) -> Tensor:
    h = h + mha(h, params, prefix, n_heads, adjacency)
    h = ad.batchnorm(h, params[prefix + "bn1.w"], params[prefix + "bn1.b"], bn.get(prefix + "bn1"),
                     training, update_stats)
    ff = ad.relu(ad.matmul(h, params[prefix + "ff.W0"]) + params[prefix + "ff.b0"])
    ff = ad.matmul(ff, params[prefix + "ff.W1"]) + params[prefix + "ff.b1"]
    h = h + ff
    return ad.batchnorm(h, params[prefix + "bn2.w"], params[prefix + "bn2.b"], bn.get(prefix + "bn2"),
                        training, update_stats)


@dataclass
class Embeddings:
    nodes: Tensor  # (B, nodes, d)
    graph: Tensor  # (B, d)


def encode(policy: Policy, batch: Batch, training: bool = False, update_stats: bool | None = None,
           prefix: str = "enc.", n_layers: int | None = None, adjacency=None) -> Embeddings:
    cfg = policy.cfg
    if update_stats is None:
        update_stats = training
    h = init_embed(batch, policy.params, prefix)
    for layer in range(n_layers if n_layers is not None else cfg.n_layers):
        h = attention_layer(h, policy.params, policy.bn, f"{prefix}layer{layer}.", cfg.n_heads,
                            training, update_stats, adjacency)
    return Embeddings(h, h.mean(axis=1))


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderCache:
    """Per-rollout projections of the node embeddings, computed once."""

    emb: Embeddings
    glimpse_k: Tensor  # (B, M, nodes, dk)
    glimpse_v: Tensor
    logit_k: Tensor  # (B, nodes, d)


def precompute(policy: Policy, emb: Embeddings) -> DecoderCache:
    p = policy.params
    M = policy.cfg.n_heads
    return DecoderCache(
        emb,
        _split_heads(ad.matmul(emb.nodes, p["dec.Wk"]), M),
        _split_heads(ad.matmul(emb.nodes, p["dec.Wv"]), M),
        ad.matmul(emb.nodes, p["dec.Wk_logit"]),
    )


def _gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    return x[np.arange(len(idx)), idx]


def context_embedding(policy: Policy, batch: Batch, state: DecodeState, emb: Embeddings) -> Tensor:
    """Raw context vector per row: graph embedding plus step features."""
    p = batch.problem
    B = batch.size
    if p == "tsp":
        if state.t == 1:
            last = ad.broadcast_to(policy.params["dec.v_last"], (B, policy.cfg.embed_dim))
            first = ad.broadcast_to(policy.params["dec.v_first"], (B, policy.cfg.embed_dim))
        else:
            last = _gather_rows(emb.nodes, state.prev)
            first = _gather_rows(emb.nodes, state.first)
        return ad.concat([emb.graph, last, first], axis=-1)
    if p in ("cvrp", "sdvrp"):
        scalar = state.capacity
    elif p == "op":
        scalar = state.remaining_length
    elif p in ("pctsp", "spctsp"):
        scalar = state.remaining_prize
    else:
        raise ContractError(f"unknown problem {p!r}")
    last = _gather_rows(emb.nodes, state.prev)
    return ad.concat([emb.graph, last, Tensor(scalar[:, None])], axis=-1)


def glimpse(policy: Policy, ctx: Tensor, cache: DecoderCache, mask: np.ndarray,
            demand: np.ndarray | None = None, return_weights: bool = False):
    """One multi-head attention step from the context query to the nodes."""
    if not mask.any(axis=-1).all():
        raise ad.InvalidMaskError("no feasible node to attend to")
    prm = policy.params
    M = policy.cfg.n_heads
    B = ctx.shape[0]
    dk = policy.cfg.key_dim
    q = ad.matmul(ctx, prm["dec.Wq"]).reshape(B, M, 1, dk)
    k, v = cache.glimpse_k, cache.glimpse_v
    if demand is not None:
        dem = Tensor(demand[:, :, None])
        k = k + _split_heads(ad.matmul(dem, prm["dec.Wk_demand"]), M)
        v = v + _split_heads(ad.matmul(dem, prm["dec.Wv_demand"]), M)
    compat = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    attn = ad.softmax_last(compat, mask[:, None, None, :])
    heads = ad.matmul(attn, v).reshape(B, M * dk)
    out = ad.matmul(heads, prm["dec.Wo"])
    return (out, attn) if return_weights else out


def output_logits(policy: Policy, glimpsed: Tensor, cache: DecoderCache, mask: np.ndarray,
                  demand: np.ndarray | None = None, clip: float | None = None) -> Tensor:
    """Clipped single-head compatibilities; returns masked log-probabilities.

    The glimpse output serves directly as the query (its projection is
    folded into the glimpse output matrix).
    """
    prm = policy.params
    d = policy.cfg.embed_dim
    k = cache.logit_k
    if demand is not None:
        k = k + ad.matmul(Tensor(demand[:, :, None]), prm["dec.Wk_logit_demand"])
    raw = ad.matmul(k, glimpsed.reshape(glimpsed.shape[0], d, 1)).reshape(glimpsed.shape[0], k.shape[1])
    raw = raw * (1.0 / np.sqrt(d))
    clip = policy.cfg.tanh_clip if clip is None else clip
    logits = ad.tanh(raw) * clip if np.isfinite(clip) else raw
    return ad.log_softmax_last(logits, mask)


def step_log_probs(policy: Policy, batch: Batch, state: DecodeState, cache: DecoderCache,
                   mask: np.ndarray) -> Tensor:
    demand = state.remaining_demand if batch.problem == "sdvrp" else None
    ctx = context_embedding(policy, batch, state, cache.emb)
    g = glimpse(policy, ctx, cache, mask, demand)
    return output_logits(policy, g, cache, mask, demand)


# ---------------------------------------------------------------------------
# critic


class Critic:
    """Attention encoder, mean pooling and a one-hidden-layer MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, hidden: int = 128):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.params = ParamStore()
        self.bn: dict = {}
        _init_encoder(self.params, self.bn, cfg, rng, "critic.")
        d = cfg.embed_dim
        self.params.add("critic.mlp.W0", _uniform(rng, (d, hidden), d))
        self.params.add("critic.mlp.b0", _uniform(rng, (hidden,), d))
        self.params.add("critic.mlp.W1", _uniform(rng, (hidden, 1), hidden))
        self.params.add("critic.mlp.b1", _uniform(rng, (1,), hidden))


def critic_value(critic: Critic, batch: Batch, training: bool = False, update_stats: bool | None = None) -> Tensor:
    """Predicted cost per instance, shape (B,)."""
    emb = encode(critic, batch, training, update_stats, prefix="critic.")
    p = critic.params
    hid = ad.relu(ad.matmul(emb.graph, p["critic.mlp.W0"]) + p["critic.mlp.b0"])
    out = ad.matmul(hid, p["critic.mlp.W1"]) + p["critic.mlp.b1"]
    return out.reshape(batch.size)
