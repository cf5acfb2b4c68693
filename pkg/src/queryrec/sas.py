"""Causal self-attention encoder over query histories and the next-item loss."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .din import glorot
from .optim import ParameterStore
from .rng import Rng

MASK_VALUE = -1e9


def init_sas(store: ParameterStore, d: int, l_max: int, rng: Rng, blocks: int = 1, ffn_mult: int = 4) -> None:
    store.add("sas.pos", rng.normal(0, 0.1, (max(l_max, 1), d)))
    store.add("sas.sentinel", rng.normal(0, 0.1, (d,)))
    for b in range(blocks):
        p = f"sas.block{b}"
        store.add(f"{p}.ln1.g", np.ones(d))
        store.add(f"{p}.ln1.b", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.{name}", glorot(rng, d, d))
        store.add(f"{p}.ln2.g", np.ones(d))
        store.add(f"{p}.ln2.b", np.zeros(d))
        store.add(f"{p}.ffn.w1", glorot(rng, d, ffn_mult * d))
        store.add(f"{p}.ffn.b1", np.zeros(ffn_mult * d))
        store.add(f"{p}.ffn.w2", glorot(rng, ffn_mult * d, d))
        store.add(f"{p}.ffn.b2", np.zeros(d))
    store.add("sas.ln_out.g", np.ones(d))
    store.add("sas.ln_out.b", np.zeros(d))


def _attention(P, p: str, h: Tensor, heads: int, bias: np.ndarray) -> Tensor:
    B, L, d = h.shape
    if d % heads:
        raise ShapeError(f"d={d} is not divisible by {heads} heads")
    dh = d // heads
    q = h @ P[f"{p}.wq"]
    k = h @ P[f"{p}.wk"]
    v = h @ P[f"{p}.wv"]
    outs = []
    for head in range(heads):
        cols = (Ellipsis, slice(head * dh, (head + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        scores = ag.matmul(qh, ag.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        weights = ag.softmax(scores + bias, axis=-1)
        outs.append(ag.matmul(weights, vh))
    att = outs[0] if heads == 1 else ag.concat(outs, axis=-1)
    return att @ P[f"{p}.wo"]


def sas_sequence(P, seq: Tensor, lengths, heads: int = 1, blocks: int = 1, causal: bool = True) -> Tensor:
    """Per-position outputs (B, L, d) for right-padded sequences."""
    B, L, d = seq.shape
    if L > P["sas.pos"].shape[0]:
        raise ShapeError(f"sequence length {L} exceeds the positional table ({P['sas.pos'].shape[0]})")
    lengths = np.asarray(lengths)
    valid = (np.arange(L)[None, :] < lengths[:, None]).astype(seq.dtype)
    x = (seq + P["sas.pos"][:L]) * valid[:, :, None]
    bias = np.zeros((B, L, L), dtype=seq.dtype)
    bias[:, :, :] = np.where(valid[:, None, :] > 0, 0.0, MASK_VALUE)
    if causal:
        bias = bias + np.triu(np.full((L, L), MASK_VALUE, dtype=seq.dtype), k=1)
    for b in range(blocks):
        p = f"sas.block{b}"
        h = ag.layer_norm(x) * P[f"{p}.ln1.g"] + P[f"{p}.ln1.b"]
        x = x + _attention(P, p, h, heads, bias)
        h = ag.layer_norm(x) * P[f"{p}.ln2.g"] + P[f"{p}.ln2.b"]
        f = ag.tanh(h @ P[f"{p}.ffn.w1"] + P[f"{p}.ffn.b1"]) @ P[f"{p}.ffn.w2"] + P[f"{p}.ffn.b2"]
        x = x + f
    return ag.layer_norm(x) * P["sas.ln_out.g"] + P["sas.ln_out.b"]


def sas_encode(P, seq: Tensor, lengths, heads: int = 1, blocks: int = 1, causal: bool = True) -> Tensor:
    """Final-position representation (B, d); empty sequences map to the sentinel."""
    B, L, d = seq.shape
    lengths = np.asarray(lengths)
    has = (lengths > 0).astype(seq.dtype)[:, None]
    sentinel = ag.expand(ag.reshape(P["sas.sentinel"], (1, d)), (B, d))
    if L == 0 or not has.any():
        return sentinel
    out = sas_sequence(P, seq, lengths, heads, blocks, causal)
    rows = np.arange(B) * L + np.maximum(lengths, 1) - 1
    last = ag.gather(ag.reshape(out, (B * L, d)), rows)
    return last * has + sentinel * (1.0 - has)


def nip_loss(e_q: Tensor, pos: Tensor, pos_mask, neg: Tensor, neg_mask) -> Tensor:
    """Next-item loss, averaged over the batch.

    Per sample: -mean log sigmoid(<e_q, e_j>) over sampled future clicks
    minus mean log(1 - sigmoid(<e_q, e_k>)) over sampled future non-clicks.
    A term whose list is empty (mask all zero) contributes 0.
    """
    B, d = e_q.shape
    pos_mask = np.asarray(pos_mask, dtype=e_q.dtype)
    neg_mask = np.asarray(neg_mask, dtype=e_q.dtype)
    q = ag.reshape(e_q, (B, 1, d))
    total = None
    for emb, mask, sign in ((pos, pos_mask, 1.0), (neg, neg_mask, -1.0)):
        if emb.shape[1] == 0:
            continue
        dots = ag.dot(q, emb) * sign
        # log(1 - sigmoid(x)) == log sigmoid(-x)
        ll = ag.log(ag.sigmoid(dots))
        count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        term = ag.sum_(ll * (mask / count), axis=1)
        total = term if total is None else total + term
    if total is None:
        return e_q.tape.constant(np.zeros((), dtype=e_q.dtype))
    return -ag.mean(total)
