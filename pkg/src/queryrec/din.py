"""Target-aware CTR backbone: embeddings, adaptive pooling, prediction head, AUC."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParameterStore
from .rng import Rng

EMB_STD = 0.1


def glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_embeddings(store: ParameterStore, vocab, d: int, rng: Rng) -> None:
    store.add("emb.user", rng.normal(0, EMB_STD, (vocab.n_users, d)))
    store.add("emb.item", rng.normal(0, EMB_STD, (vocab.n_items, d)))
    store.add("emb.query", rng.normal(0, EMB_STD, (max(vocab.n_queries, 1), d)))
    for k, card in enumerate(vocab.user_field_cards):
        store.add(f"emb.ufield.{k}", rng.normal(0, EMB_STD, (card, d)))
    for k, card in enumerate(vocab.item_field_cards):
        store.add(f"emb.ifield.{k}", rng.normal(0, EMB_STD, (card, d)))


def init_scorer(store: ParameterStore, prefix: str, d: int, hidden: int, rng: Rng) -> None:
    """Two-layer scorer over [e_j, e_i, e_j*e_i, e_j-e_i]."""
    store.add(f"{prefix}.w1", glorot(rng, 4 * d, hidden))
    store.add(f"{prefix}.b1", np.zeros(hidden))
    store.add(f"{prefix}.w2", glorot(rng, hidden, 1))
    store.add(f"{prefix}.b2", np.zeros(1))


def init_head(store: ParameterStore, in_dim: int, hidden: tuple[int, ...], rng: Rng) -> None:
    dims = [in_dim, *hidden, 1]
    for k in range(len(dims) - 1):
        store.add(f"head.w{k + 1}", glorot(rng, dims[k], dims[k + 1]))
        store.add(f"head.b{k + 1}", np.zeros(dims[k + 1]))


def embed_features(P: dict[str, Tensor], users, items, user_feats, item_feats):
    """Row lookups for (e_u, e_i, e_xu, e_xi); field embeddings concatenated in schema order."""
    e_u = ag.gather(P["emb.user"], users)
    e_i = ag.gather(P["emb.item"], items)
    user_feats = np.asarray(user_feats).reshape(len(users), -1)
    item_feats = np.asarray(item_feats).reshape(len(items), -1)
    ufields = [ag.gather(P[f"emb.ufield.{k}"], user_feats[:, k]) for k in range(user_feats.shape[1])]
    ifields = [ag.gather(P[f"emb.ifield.{k}"], item_feats[:, k]) for k in range(item_feats.shape[1])]
    e_xu = ag.concat(ufields, axis=-1) if ufields else None
    e_xi = ag.concat(ifields, axis=-1) if ifields else None
    return e_u, e_i, e_xu, e_xi


def attention_weights(P: dict[str, Tensor], prefix: str, history: Tensor, target: Tensor) -> Tensor:
    """Unnormalised scalar weights a(e_j, e_i), shape (B, L)."""
    B, L, d = history.shape
    tgt = ag.expand(ag.reshape(target, (B, 1, d)), (B, L, d))
    feats = ag.concat([history, tgt, history * tgt, history - tgt], axis=-1)
    hidden = ag.tanh(feats @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"])
    score = hidden @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]
    return ag.reshape(score, (B, L))


def adaptive_pool(P, prefix: str, history: Tensor, target: Tensor, mask=None, weights=None) -> Tensor:
    """nu = sum_j a(e_j, e_i) e_j over unmasked history rows; empty history pools to 0.

    ``weights`` overrides the scorer (used to pin a(.,.) in tests).
    """
    B, L, d = history.shape
    if L == 0:
        return target.tape.constant(np.zeros((B, d), dtype=target.dtype))
    a = attention_weights(P, prefix, history, target) if weights is None else weights
    if mask is not None:
        a = a * np.asarray(mask, dtype=history.dtype)
    return ag.sum_(ag.reshape(a, (B, L, 1)) * history, axis=1)


def predict_ctr(P: dict[str, Tensor], parts, n_layers: int) -> Tensor:
    """Sigmoid MLP over the concatenation (e_u | e_i | e_xu | e_xi | nu_b | nu_q)."""
    h = ag.concat([p for p in parts if p is not None], axis=-1)
    for k in range(1, n_layers):
        h = ag.tanh(h @ P[f"head.w{k}"] + P[f"head.b{k}"])
    logit = h @ P[f"head.w{n_layers}"] + P[f"head.b{n_layers}"]
    return ag.sigmoid(ag.reshape(logit, (logit.shape[0],)))


def bce_loss(prob: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; log arguments are floored at 1e-12."""
    y = np.asarray(y, dtype=prob.dtype).reshape(prob.shape)
    if np.any(prob.data < 0) or np.any(prob.data > 1):
        raise ValueError("predicted probability outside [0, 1]")
    one = prob.tape.constant(np.ones_like(y))
    ll = ag.log(prob) * y + ag.log(one - prob) * (1.0 - y)
    return -ag.mean(ll)


def bce_value(prob: float, y: float) -> float:
    p = min(max(prob, ag.LOG_FLOOR), 1.0)
    q = min(max(1.0 - prob, ag.LOG_FLOOR), 1.0)
    return float(-y * np.log(p) - (1 - y) * np.log(q))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    start = 0
    n = len(x)
    # runs of equal scores share the mean of their 1-based ranks
    bounds = np.flatnonzero(np.diff(xs)) + 1
    for stop in [*bounds, n]:
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    return ranks


def auc(scores, labels) -> float:
    """Exact ROC AUC by the rank-sum statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = _average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P*N) reference definition of AUC."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    total = 0.0
    for p in pos:
        total += np.count_nonzero(p > neg) + 0.5 * np.count_nonzero(p == neg)
    return total / (pos.size * neg.size)
