"""The joint CTR estimator: backbone + next-item + contrastive losses."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import NonFiniteError, ShapeError, Tape
from .contrastive import contrastive_loss, init_bilinear
from .data import DatasetBundle, QueryItemSets, RecInteraction
from .diffusion import DiffusionAugmenter
from .din import adaptive_pool, auc, bce_loss, embed_features, init_embeddings, init_head, init_scorer, predict_ctr
from .optim import AdamState, ParameterStore, adam_step, named_grads
from .rng import Rng
from .sas import init_sas, nip_loss, sas_encode
from .validation import check_bundle, check_records

METRIC_KEYS = ("step", "l1", "l2", "l3", "l", "val_auc", "seconds")


def joint_loss(l1, l2, l3, lambda2: float, lambda3: float):
    """L = L1 + lambda2 * L2 + lambda3 * L3 (floats or tensors)."""
    for value in (l1, l2, l3):
        v = value.data if hasattr(value, "data") else value
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("loss component is not finite")
    return l1 + l2 * lambda2 + l3 * lambda3


@dataclass
class SampleTable:
    """Records with their behavior context, ready for batching."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    hist: list
    queries: list
    fpos: list
    fneg: list
    last_query: np.ndarray

    def __len__(self):
        return len(self.users)

    @classmethod
    def build(cls, bundle: DatasetBundle, records) -> "SampleTable":
        ctx = [bundle.behavior.context(r.user, r.time, r) for r in records]
        return cls(
            users=np.array([r.user for r in records], dtype=np.int64),
            items=np.array([r.item for r in records], dtype=np.int64),
            labels=np.array([float(r.clicked) for r in records]),
            hist=[c.items for c in ctx],
            queries=[c.queries for c in ctx],
            fpos=[c.future_pos for c in ctx],
            fneg=[c.future_neg for c in ctx],
            last_query=np.array([-1 if c.last_query is None else c.last_query for c in ctx], dtype=np.int64),
        )


def pad(rows, min_len: int = 1):
    """Right-pad integer lists into (B, L) plus lengths."""
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    L = max(min_len, int(lengths.max()) if len(rows) else 0)
    out = np.zeros((len(rows), L), dtype=np.int64)
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out, lengths


def sample_fixed(rows, n: int, rng: Rng):
    """Exactly ``n`` draws per row (without replacement, topped up by resampling); empty rows are masked."""
    idx = np.zeros((len(rows), n), dtype=np.int64)
    mask = np.zeros((len(rows), n))
    for k, r in enumerate(rows):
        if not r:
            continue
        r = np.asarray(r)
        if len(r) >= n:
            pick = rng.choice(len(r), size=n, replace=False)
        else:
            pick = np.concatenate([np.arange(len(r)), rng.integers(0, len(r), size=n - len(r))])
        idx[k] = r[pick]
        mask[k] = 1.0
    return idx, mask


class QueryRecClassifier(ClassifierMixin, BaseEstimator):
    """CTR model trained with L = L1 + lambda2 * L2 + lambda3 * L3.

    ``fit`` takes a :class:`DatasetBundle` and trains on its train split,
    early-stopping on validation AUC.  ``predict_proba`` and ``score`` take
    a list of :class:`RecInteraction` whose behavior context is read from
    the fitted bundle; ``score`` returns AUC rather than accuracy.

    Setting ``lambda2 = lambda3 = 0`` and ``use_query_feature=False`` gives
    the plain backbone.  With ``lambda3 > 0`` and ``augmenter`` set, the
    augmenter is fit on the bundle's query-item sets first and its enhanced
    positives feed the contrastive loss.
    """

    def __init__(
        self,
        d=32,
        att_hidden=16,
        head_hidden=(64, 32),
        sas_blocks=1,
        sas_heads=1,
        use_query_feature=True,
        n_pos=4,
        n_neg=4,
        n_ctr_pos=8,
        n_ctr_neg=64,
        beta_ctr=0.1,
        lambda2=0.1,
        lambda3=0.1,
        augmenter=None,
        lr=1e-3,
        batch_size=256,
        epochs=20,
        patience=3,
        seed=0,
        dtype="float32",
        verbose=False,
    ):
        self.d = d
        self.att_hidden = att_hidden
        self.head_hidden = head_hidden
        self.sas_blocks = sas_blocks
        self.sas_heads = sas_heads
        self.use_query_feature = use_query_feature
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.n_ctr_pos = n_ctr_pos
        self.n_ctr_neg = n_ctr_neg
        self.beta_ctr = beta_ctr
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.augmenter = augmenter
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.dtype = dtype
        self.verbose = verbose

    # -- parameters ---------------------------------------------------------

    def init_params(self, bundle: DatasetBundle) -> ParameterStore:
        """Create every learnable tensor for ``bundle``'s vocabulary."""
        vocab = bundle.vocab
        rng = Rng(self.seed).child("init")
        store = ParameterStore(np.dtype(self.dtype))
        init_embeddings(store, vocab, self.d, rng)
        init_scorer(store, "att_item", self.d, self.att_hidden, rng)
        n_parts = 2 + len(vocab.user_field_cards) + len(vocab.item_field_cards) + 1
        if self.use_query_feature:
            init_scorer(store, "att_query", self.d, self.att_hidden, rng)
            n_parts += 1
        init_head(store, n_parts * self.d, tuple(self.head_hidden), rng)
        init_sas(store, self.d, bundle.behavior.l_max, rng, blocks=self.sas_blocks)
        init_bilinear(store, self.d, rng)
        self.params_ = store
        self.n_layers_ = len(tuple(self.head_hidden)) + 1
        self.bundle_ = bundle
        return store

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        check_is_fitted(self, "params_")
        for name in self.params_:
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            value = np.asarray(tensors[name])
            if value.shape != self.params_[name].shape:
                raise ShapeError(
                    f"tensor {name!r}: checkpoint shape {value.shape} != model shape {self.params_[name].shape}"
                )
            self.params_[name] = value

    # -- forward ------------------------------------------------------------

    def _forward(self, P, bundle: DatasetBundle, table: SampleTable, rows, rng: Rng | None = None, sets: QueryItemSets | None = None):
        """Prediction and (when ``rng`` is given) the auxiliary losses for ``rows``."""
        users = table.users[rows]
        items = table.items[rows]
        e_u, e_i, e_xu, e_xi = embed_features(
            P, users, items, bundle.user_features[users], bundle.item_features[items]
        )
        hist, hlen = pad([table.hist[r] for r in rows])
        hmask = np.arange(hist.shape[1])[None, :] < hlen[:, None]
        nu_b = adaptive_pool(P, "att_item", ag.gather(P["emb.item"], hist), e_i, hmask)
        qhist, qlen = pad([table.queries[r] for r in rows])
        qmask = np.arange(qhist.shape[1])[None, :] < qlen[:, None]
        q_emb = ag.gather(P["emb.query"], qhist) if self.use_query_feature or rng is not None else None
        nu_q = adaptive_pool(P, "att_query", q_emb, e_i, qmask) if self.use_query_feature else None
        prob = predict_ctr(P, (e_u, e_i, e_xu, e_xi, nu_b, nu_q), self.n_layers_)
        out = {"prob": prob}
        if rng is None:
            return out
        zero = prob.tape.constant(np.zeros((), dtype=prob.dtype))
        out["l2"] = zero
        out["l3"] = zero
        if self.lambda2 > 0:
            e_seq = sas_encode(P, q_emb, qlen, heads=self.sas_heads, blocks=self.sas_blocks)
            pidx, pmask = sample_fixed([table.fpos[r] for r in rows], self.n_pos, rng)
            nidx, nmask = sample_fixed([table.fneg[r] for r in rows], self.n_neg, rng)
            out["l2"] = nip_loss(
                e_seq, ag.gather(P["emb.item"], pidx), pmask, ag.gather(P["emb.item"], nidx), nmask
            )
        if self.lambda3 > 0:
            out["l3"] = self._contrastive(P, table.last_query[rows], sets, bundle.vocab.n_items, rng)
        return out

    def _positives(self, sets: QueryItemSets, q: int) -> np.ndarray:
        cache = self._pos_cache
        if q not in cache:
            pos = np.array(sorted(sets.positives_for(q)), dtype=np.int64)
            comp = np.setdiff1d(np.arange(self._n_items), pos)
            cache[q] = (pos, comp)
        return cache[q]

    def _contrastive(self, P, last_query, sets, n_items, rng: Rng):
        B = len(last_query)
        pidx = np.zeros((B, self.n_ctr_pos), dtype=np.int64)
        pmask = np.zeros((B, self.n_ctr_pos))
        nidx = np.zeros((B, self.n_ctr_neg), dtype=np.int64)
        active = np.zeros(B)
        for k, q in enumerate(last_query):
            if q < 0:
                continue
            pos, comp = self._positives(sets, int(q))
            if pos.size == 0 or comp.size == 0:
                continue
            take = pos if pos.size <= self.n_ctr_pos else rng.choice(pos, size=self.n_ctr_pos, replace=False)
            pidx[k, : take.size] = take
            pmask[k, : take.size] = 1.0
            nidx[k] = comp[rng.integers(0, comp.size, size=self.n_ctr_neg)]
            active[k] = 1.0
        e_q = ag.gather(P["emb.query"], np.maximum(last_query, 0))
        return contrastive_loss(
            e_q,
            ag.gather(P["emb.item"], pidx),
            pmask,
            ag.gather(P["emb.item"], nidx),
            P["ctr.W"],
            self.beta_ctr,
            active,
        )

    def batch_loss(self, tape: Tape, P, bundle, table, rows, rng, sets):
        out = self._forward(P, bundle, table, rows, rng, sets)
        out["l1"] = bce_loss(out["prob"], table.labels[rows])
        out["l"] = joint_loss(out["l1"], out["l2"], out["l3"], self.lambda2, self.lambda3)
        return out

    # -- training -----------------------------------------------------------

    def _augment(self, bundle: DatasetBundle) -> QueryItemSets:
        if self.lambda3 <= 0 or self.augmenter is None:
            self.augmenter_ = None
            return bundle.query_items
        aug = clone(self.augmenter).set_params(n_items=bundle.vocab.n_items)
        self.augmenter_ = aug.fit(bundle.query_items)
        return aug.transform(bundle.query_items)

    def fit(self, X: DatasetBundle, y=None, clock=time.perf_counter, query_sets: QueryItemSets | None = None):
        """Train on ``X.train``; ``query_sets`` skips augmentation and uses the given sets."""
        check_bundle(X)
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("loss weights must be non-negative")
        start = clock()
        rng = Rng(self.seed)
        if query_sets is None:
            self.query_sets_ = self._augment(X)
        else:
            self.augmenter_ = None
            self.query_sets_ = query_sets
        store = self.init_params(X)
        self._pos_cache = {}
        self._n_items = X.vocab.n_items
        state = AdamState(lr=self.lr)
        train = SampleTable.build(X, X.train)
        val = SampleTable.build(X, X.val) if X.val else None
        batch_rng = rng.child("batches")
        self.metrics_ = []
        self.grad_norms_ = {name: 0.0 for name in store}
        best_auc, best_params, stale = -np.inf, None, 0
        step = 0
        for epoch in range(self.epochs):
            order = batch_rng.permutation(len(train))
            sums = np.zeros(4)
            n_batches = 0
            for lo in range(0, len(order), self.batch_size):
                rows = order[lo : lo + self.batch_size]
                tape = Tape()
                P = store.bind(tape)
                try:
                    out = self.batch_loss(tape, P, X, train, rows, batch_rng, self.query_sets_)
                    grads = named_grads(ag.backprop(tape, out["l"]), P)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"training aborted at epoch {epoch}, step {step + 1}: {exc}") from exc
                for name, g in grads.items():
                    self.grad_norms_[name] += float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
                adam_step(store, grads, state)
                step += 1
                n_batches += 1
                sums += [float(out[k].data) for k in ("l1", "l2", "l3", "l")]
            means = sums / max(n_batches, 1)
            val_auc = self._table_auc(X, val) if val is not None else float("nan")
            self.metrics_.append(
                dict(zip(METRIC_KEYS, [step, *map(float, means), val_auc, float(clock() - start)]))
            )
            if self.verbose:
                print(json.dumps(self.metrics_[-1]))
            if np.isnan(val_auc):
                continue
            if val_auc > best_auc:
                best_auc, stale = val_auc, 0
                best_params = {name: store[name].copy() for name in store}
                self.best_step_ = step
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_params is not None:
            for name, value in best_params.items():
                store[name] = value
        else:
            self.best_step_ = step
        self.n_steps_ = step
        self.classes_ = np.array([0, 1])
        return self

    # -- inference ----------------------------------------------------------

    def _table_scores(self, bundle, table: SampleTable) -> np.ndarray:
        out = np.empty(len(table))
        for lo in range(0, len(table), 1024):
            rows = np.arange(lo, min(lo + 1024, len(table)))
            tape = Tape()
            P = {n: tape.constant(v) for n, v in self.params_.items()}
            out[rows] = self._forward(P, bundle, table, rows)["prob"].data
        return out

    def _table_auc(self, bundle, table: SampleTable) -> float:
        labels = table.labels
        if labels.min() == labels.max():
            return float("nan")
        return auc(self._table_scores(bundle, table), labels)

    def predict_proba(self, X, bundle: DatasetBundle | None = None) -> np.ndarray:
        check_is_fitted(self, "params_")
        bundle = bundle or self.bundle_
        records = check_records(X, bundle)
        p = self._table_scores(bundle, SampleTable.build(bundle, records))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, bundle=None) -> np.ndarray:
        return (self.predict_proba(X, bundle)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None, bundle=None) -> float:
        records = check_records(X, bundle or self.bundle_)
        labels = np.array([r.clicked for r in records], dtype=float) if y is None else np.asarray(y)
        return auc(self.predict_proba(records, bundle)[:, 1], labels)

    def evaluate(self, split: str = "test", bundle: DatasetBundle | None = None) -> dict:
        bundle = bundle or self.bundle_
        records = bundle.split(split)
        if not records:
            raise ValueError(f"split {split!r} is empty")
        labels = {r.clicked for r in records}
        if len(labels) < 2:
            raise ValueError(f"split {split!r} has a single class")
        return {"split": split, "auc": self.score(records, bundle=bundle), "n": len(records)}


def write_metrics(path, metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            row = {k: rec[k] for k in METRIC_KEYS}
            if isinstance(row["val_auc"], float) and np.isnan(row["val_auc"]):
                row["val_auc"] = None
            fh.write(json.dumps(row) + "\n")
