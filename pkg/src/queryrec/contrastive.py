"""Query-item contrastive alignment through a bilinear tanh similarity."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParameterStore
from .rng import Rng


def init_bilinear(store: ParameterStore, d: int, rng: Rng) -> None:
    store.add("ctr.W", np.eye(d) + rng.normal(0, 0.01, (d, d)))


def bilinear_similarity(e_q: Tensor, e_i: Tensor, W: Tensor) -> Tensor:
    """tanh(e_q^T W e_i).

    ``e_q`` is (B, d); ``e_i`` is (B, d) or (B, K, d), giving (B,) or (B, K).
    """
    qW = e_q @ W
    if len(e_i.shape) == 3:
        qW = ag.reshape(qW, (qW.shape[0], 1, qW.shape[1]))
    return ag.tanh(ag.dot(qW, e_i))


def contrastive_loss(e_q: Tensor, pos: Tensor, pos_mask, neg: Tensor, W: Tensor, beta: float, active=None) -> Tensor:
    """InfoNCE-style loss with a sampled denominator, averaged over the batch.

    Per active sample:
    ``-(1/|P|) sum_p [ s(q, p)/beta - log sum_n exp(s(q, n)/beta) ]``,
    where the denominator runs over the sampled negatives only.
    """
    if beta <= 0:
        raise ValueError("temperature must be positive")
    B = e_q.shape[0]
    if neg.shape[1] == 0:
        raise ValueError("contrastive loss needs at least one negative")
    pos_mask = np.asarray(pos_mask, dtype=e_q.dtype)
    if active is None:
        active = pos_mask.sum(axis=1) > 0
    active = np.asarray(active, dtype=e_q.dtype) * (pos_mask.sum(axis=1) > 0)
    s_pos = bilinear_similarity(e_q, pos, W) * (1.0 / beta)
    s_neg = bilinear_similarity(e_q, neg, W) * (1.0 / beta)
    # log-sum-exp with the row max held constant; the shift cancels in the gradient
    shift = s_neg.data.max(axis=1, keepdims=True)
    log_denom = ag.log(ag.sum_(ag.exp(s_neg - shift), axis=1)) + shift[:, 0]
    count = np.maximum(pos_mask.sum(axis=1), 1.0)
    pos_term = ag.sum_(s_pos * (pos_mask / count[:, None]), axis=1)
    per_sample = (pos_term - log_denom) * active
    return -ag.mean(per_sample)

