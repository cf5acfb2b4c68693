"""Diffusion model over query-item vectors, used to enlarge sparse positive sets.

The forward process corrupts ``x_0`` in closed form, the denoiser predicts
``x_0`` directly, and the reverse chain plugs that prediction into the
Gaussian posterior ``q(x_{t-1} | x_t, x_0)`` with its fixed variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import Tape, Tensor
from .data import QueryItemSets
from .din import glorot
from .optim import AdamState, ParameterStore, adam_step, named_grads
from .rng import Rng, sample_standard_normal

TIME_DIM = 16


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step; index 0 is the clean state (alpha_bar[0] == 1)."""

    betas: np.ndarray  # (T+1,), betas[0] unused (0)
    alphas: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b < 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty 1-d array in [0, 1)")
        betas = np.concatenate([[0.0], b])
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        var = np.zeros_like(betas)
        for t in range(1, len(betas)):
            denom = 1.0 - alpha_bar[t]
            var[t] = 0.0 if denom == 0 else (1.0 - alphas[t]) * (1.0 - alpha_bar[t - 1]) / denom
        return cls(betas, alphas, alpha_bar, var)


def build_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear noise scales from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, T))


def build_x0(positives, negatives, n_items: int, r_p: float = 0.5, r_n: float = -0.5) -> np.ndarray:
    if not 0.0 <= r_p <= 1.0:
        raise ValueError("r_p must lie in [0, 1]")
    if not -1.0 <= r_n < 0.0:
        raise ValueError("r_n must lie in [-1, 0)")
    x = np.zeros(n_items)
    x[list(negatives)] = r_n
    # an item never sits in both sets, but positives win if it does
    x[list(positives)] = r_p
    return x


def _check_step(t, schedule: NoiseSchedule, lo: int = 1):
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ValueError(f"step out of range [{lo}, {schedule.T}]")
    return t


def _col(values, x):
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 and np.ndim(x) == 2 else values


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps; ``t`` may be per-row."""
    t = _check_step(t, schedule)
    ab = _col(schedule.alpha_bar[t], x0)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_coefficients(t, schedule: NoiseSchedule):
    """Weights (on x_t, on x_0) of the posterior mean at step ``t``."""
    t = _check_step(t, schedule)
    a = schedule.alphas[t]
    ab = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    denom = 1.0 - ab
    safe = np.where(denom == 0, 1.0, denom)
    c_t = np.where(denom == 0, 1.0, np.sqrt(a) * (1.0 - ab_prev) / safe)
    c_0 = np.where(denom == 0, 0.0, np.sqrt(ab_prev) * (1.0 - a) / safe)
    return c_t, c_0


def posterior_stats(x_t, x0, t, schedule: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    c_t, c_0 = posterior_coefficients(t, schedule)
    mean = _col(c_t, x_t) * np.asarray(x_t) + _col(c_0, x0) * np.asarray(x0)
    t = np.asarray(t)
    return mean, schedule.posterior_var[t]


def timestep_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def init_denoiser(store: ParameterStore, n_items: int, hidden: int, rng: Rng, prefix: str = "denoiser") -> None:
    store.add(f"{prefix}.w1", glorot(rng, n_items + TIME_DIM, hidden))
    store.add(f"{prefix}.b1", np.zeros(hidden))
    store.add(f"{prefix}.w2", glorot(rng, hidden, n_items))
    store.add(f"{prefix}.b2", np.zeros(n_items))


def denoise(P: dict[str, Tensor], x_t: Tensor, t, prefix: str = "denoiser") -> Tensor:
    """Predicted x_0 for a batch (B, |I|) at steps ``t``."""
    B = x_t.shape[0]
    temb = timestep_embedding(np.broadcast_to(np.asarray(t), (B,))).astype(x_t.dtype)
    h = ag.concat([x_t, x_t.tape.constant(temb)], axis=-1)
    h = ag.tanh(h @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"])
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def denoise_array(store: ParameterStore, x_t: np.ndarray, t, prefix: str = "denoiser") -> np.ndarray:
    tape = Tape()
    P = {n: tape.constant(store[n]) for n in store.names(prefix + ".")}
    return denoise(P, tape.constant(np.asarray(x_t, dtype=store.dtype)), t, prefix).data


def mask_positives(x0: np.ndarray, mask_rate: float, rng: Rng) -> np.ndarray:
    """Zero each positive entry independently with probability ``mask_rate``."""
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError("mask_rate must lie in [0, 1)")
    out = np.array(x0, copy=True)
    if mask_rate == 0:
        return out
    drop = (out > 0) & (rng.uniform(size=out.shape) < mask_rate)
    out[drop] = 0.0
    return out


def diffusion_loss(P, batch: np.ndarray, t, eps, schedule: NoiseSchedule, masked=None) -> Tensor:
    """MSE between the denoiser's prediction from corrupted (masked) input and the original."""
    batch = np.asarray(batch)
    source = batch if masked is None else masked
    x_t = q_sample(source, t, eps, schedule).astype(batch.dtype)
    tape = next(iter(P.values())).tape
    pred = denoise(P, tape.constant(x_t), t)
    diff = pred - batch
    return ag.mean(diff * diff)


def diffusion_train_step(batch, rng: Rng, schedule: NoiseSchedule, store: ParameterStore, state: AdamState, mask_rate: float) -> float:
    """Sample steps, noise and masks for ``batch``; apply one Adam update; return the loss."""
    batch = np.asarray(batch, dtype=store.dtype)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, |I|) array")
    t = rng.integers(1, schedule.T + 1, size=batch.shape[0])
    masked = mask_positives(batch, mask_rate, rng)
    eps = sample_standard_normal(rng, batch.shape, dtype=store.dtype)
    tape = Tape()
    P = store.bind(tape, store.names("denoiser."))
    loss = diffusion_loss(P, batch, t, eps, schedule, masked)
    grads = ag.backprop(tape, loss)
    adam_step(store, named_grads(grads, P), state)
    return float(loss.data)


def reverse_generate(x_q, predict_x0, schedule: NoiseSchedule, start_step: int, rng: Rng | None = None, deterministic: bool = True) -> np.ndarray:
    """Corrupt ``x_q`` to ``start_step`` and walk the posterior chain back to step 0.

    ``predict_x0(x_t, t)`` is the denoiser.  With ``deterministic`` every
    noise draw (initial corruption included) is replaced by zero.
    """
    x = np.atleast_2d(np.asarray(x_q, dtype=np.float64))
    if not 0 <= start_step <= schedule.T:
        raise ValueError(f"start step must lie in [0, {schedule.T}]")
    if start_step == 0:
        return x.reshape(np.shape(x_q)).copy()
    if not deterministic and rng is None:
        raise ValueError("stochastic generation needs an rng")
    eps = np.zeros_like(x) if deterministic else sample_standard_normal(rng, x.shape)
    x = q_sample(x, np.full(x.shape[0], start_step), eps, schedule)
    for t in range(start_step, 0, -1):
        x0_hat = np.asarray(predict_x0(x, t), dtype=np.float64)
        mean, var = posterior_stats(x, x0_hat, t, schedule)
        if deterministic or t == 1:
            x = mean
        else:
            x = mean + np.sqrt(var) * sample_standard_normal(rng, x.shape)
    return x.reshape(np.shape(x_q))


def topk_augment(x_tilde, k: int, original=()) -> frozenset[int]:
    """Union of ``original`` with the ``k`` largest entries (ties to the lower index)."""
    x = np.asarray(x_tilde, dtype=np.float64)
    if k > x.size:
        raise ValueError(f"K={k} exceeds vector length {x.size}")
    order = np.lexsort((np.arange(x.size), -x))
    return frozenset(int(i) for i in order[:k]) | frozenset(original)


# ---------------------------------------------------------------------------
# estimator


class DiffusionAugmenter(TransformerMixin, BaseEstimator):
    """Learns query-item vectors and enlarges sparse positive sets.

    ``fit`` trains the denoiser on every query's vector; ``transform``
    returns a copy of the sets whose ``enhanced`` map holds, for each query
    with at most ``sparse_max`` observed positives, the union of those
    positives with the top-``top_k`` generated items.
    """

    def __init__(
        self,
        n_steps=50,
        beta_min=1e-4,
        beta_max=0.02,
        r_p=0.5,
        r_n=-0.5,
        mask_rate=0.3,
        top_k=4,
        train_steps=1000,
        batch_size=32,
        lr=1e-3,
        hidden=None,
        start_step=None,
        deterministic=True,
        sparse_max=1,
        n_items=None,
        seed=0,
        dtype="float64",
    ):
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.r_p = r_p
        self.r_n = r_n
        self.mask_rate = mask_rate
        self.top_k = top_k
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.start_step = start_step
        self.deterministic = deterministic
        self.sparse_max = sparse_max
        self.n_items = n_items
        self.seed = seed
        self.dtype = dtype

    def _n_items(self, X: QueryItemSets) -> int:
        if self.n_items is not None:
            return int(self.n_items)
        items = [i for s in (*X.positives.values(), *X.negatives.values()) for i in s]
        return 1 + max(items, default=0)

    def vectors(self, X: QueryItemSets, queries=None) -> tuple[list[int], np.ndarray]:
        n = getattr(self, "n_items_", None) or self._n_items(X)
        queries = X.queries if queries is None else list(queries)
        rows = [build_x0(X.positives.get(q, ()), X.negatives.get(q, ()), n, self.r_p, self.r_n) for q in queries]
        return queries, np.array(rows).reshape(len(queries), n)

    def fit(self, X: QueryItemSets, y=None):
        if not isinstance(X, QueryItemSets):
            raise TypeError("DiffusionAugmenter.fit expects QueryItemSets")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        self.n_items_ = self._n_items(X)
        self.schedule_ = build_schedule(self.n_steps, self.beta_min, self.beta_max)
        rng = Rng(self.seed)
        r_init, r_train = rng.split(2)
        hidden = self.hidden or min(4 * self.n_items_, 256)
        self.params_ = ParameterStore(np.dtype(self.dtype))
        init_denoiser(self.params_, self.n_items_, hidden, r_init)
        queries, X0 = self.vectors(X)
        if not queries:
            raise ValueError("no queries to train on")
        state = AdamState(lr=self.lr)
        self.loss_curve_ = []
        bs = min(self.batch_size, len(queries))
        for _ in range(self.train_steps):
            idx = r_train.choice(len(queries), size=bs, replace=False)
            self.loss_curve_.append(diffusion_train_step(X0[idx], r_train, self.schedule_, self.params_, state, self.mask_rate))
        return self

    def load_params(self, tensors: dict[str, np.ndarray]) -> "DiffusionAugmenter":
        """Restore a trained denoiser from ``denoiser.*`` tensors."""
        names = ("w1", "b1", "w2", "b2")
        missing = [n for n in names if f"denoiser.{n}" not in tensors]
        if missing:
            raise KeyError(f"missing denoiser tensors: {missing}")
        w1 = np.asarray(tensors["denoiser.w1"])
        self.n_items_ = w1.shape[0] - TIME_DIM
        if self.n_items is not None and self.n_items_ != self.n_items:
            raise ag.ShapeError(f"tensor 'denoiser.w1' covers {self.n_items_} items, expected {self.n_items}")
        self.schedule_ = build_schedule(self.n_steps, self.beta_min, self.beta_max)
        self.params_ = ParameterStore(np.dtype(self.dtype))
        for n in names:
            self.params_.add(f"denoiser.{n}", tensors[f"denoiser.{n}"])
        return self

    def predict_x0(self, x_t, t):
        check_is_fitted(self, "params_")
        return denoise_array(self.params_, x_t, t)

    def generate(self, X: QueryItemSets, queries=None) -> dict[int, np.ndarray]:
        check_is_fitted(self, "params_")
        queries, X0 = self.vectors(X, queries)
        if not queries:
            return {}
        start = self.n_steps // 2 if self.start_step is None else int(self.start_step)
        rng = Rng(self.seed).child("generate")
        out = reverse_generate(X0, self.predict_x0, self.schedule_, start, rng, self.deterministic)
        return {q: out[k] for k, q in enumerate(queries)}

    def sparse_queries(self, X: QueryItemSets) -> list[int]:
        if self.sparse_max is None:
            return X.queries
        return [q for q in X.queries if len(X.positives.get(q, ())) <= self.sparse_max]

    def transform(self, X: QueryItemSets) -> QueryItemSets:
        generated = self.generate(X, self.sparse_queries(X))
        enhanced = {q: topk_augment(x, self.top_k, X.positives.get(q, ())) for q, x in generated.items()}
        return X.with_enhanced(enhanced)


def write_enhanced_tsv(path, sets: QueryItemSets) -> None:
    """Rows (query_id, item_id, source) with source observed or generated."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id\titem_id\tsource\n")
        for q in sets.queries:
            observed = sets.positives.get(q, frozenset())
            for i in sorted(observed):
                fh.write(f"{q}\t{i}\tobserved\n")
            for i in sorted(sets.enhanced.get(q, frozenset()) - observed):
                fh.write(f"{q}\t{i}\tgenerated\n")


def read_enhanced_tsv(path) -> dict[int, frozenset[int]]:
    out: dict[int, set[int]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["query_id", "item_id", "source"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for line in fh:
            q, i, _ = line.rstrip("\n").split("\t")
            out.setdefault(int(q), set()).add(int(i))
    return {q: frozenset(v) for q, v in out.items()}
