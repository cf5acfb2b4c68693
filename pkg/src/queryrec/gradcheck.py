"""Finite-difference checks of every primitive and every training loss.

Each case builds a scalar from named float64 inputs on a fresh tape.  The
analytic gradient from :func:`backprop` is compared with central
differences using the norm-wise relative error
``max|a - n| / max(max|a|, max|n|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tape, finite_difference_gradient
from .contrastive import contrastive_loss, init_bilinear
from .data import Vocabulary
from .diffusion import build_schedule, diffusion_loss, init_denoiser
from .din import adaptive_pool, bce_loss, embed_features, init_embeddings, init_head, init_scorer, predict_ctr
from .optim import ParameterStore
from .rng import Rng
from .sas import init_sas, nip_loss, sas_encode

TOLERANCE = 1e-4
MODULES = ("autograd", "din", "sas", "contrastive", "diffusion", "model")


@dataclass
class GradcheckResult:
    module: str
    name: str
    rel_error: float
    n_coords: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def check_gradients(
    build: Callable[[Tape, dict], ag.Tensor],
    inputs: dict[str, np.ndarray],
    eps: float = 1e-6,
    coords: dict[str, np.ndarray] | None = None,
) -> tuple[float, int]:
    """Worst relative error over ``inputs`` (optionally a subset of flat coordinates each)."""
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def evaluate(values):
        tape = Tape()
        bound = {k: tape.variable(v, name=k) for k, v in values.items()}
        return tape, bound, build(tape, bound)

    tape, bound, loss = evaluate(inputs)
    grads = ag.backprop(tape, loss)
    worst, count = 0.0, 0
    for name, value in inputs.items():
        analytic = grads.get(bound[name].node, np.zeros_like(value)).reshape(-1)
        picks = np.arange(value.size) if coords is None or name not in coords else coords[name]
        numeric = np.empty(len(picks))
        for j, k in enumerate(picks):
            def f(x, k=k):
                shifted = dict(inputs)
                flat = value.reshape(-1).copy()
                flat[k] = x[0]
                shifted[name] = flat.reshape(value.shape)
                return float(evaluate(shifted)[2].data)

            numeric[j] = finite_difference_gradient(f, value.reshape(-1)[k : k + 1], eps)[0]
        worst = max(worst, relative_error(analytic[picks], numeric))
        count += len(picks)
    return worst, count


# ---------------------------------------------------------------------------
# cases


def _projection(rng, shape):
    return rng.normal(0, 1, shape)


def primitive_cases(seed: int = 0):
    """One case per primitive (and matmul variant), with inputs drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 1, (3, 4))
    B = rng.normal(0, 1, (4, 2))
    C = rng.normal(0, 1, (3, 4))
    row = rng.normal(0, 1, (4,))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    batch = rng.normal(0, 1, (2, 3, 4))
    batch_b = rng.normal(0, 1, (2, 4, 3))
    idx = np.array([[0, 2], [1, 1], [2, 0]])

    def scalar(t: ag.Tensor, k: int):
        return ag.sum_(t * _projection(np.random.default_rng([seed, k]), t.shape))

    return {
        "add": (lambda T, v: scalar(v["a"] + v["b"], 1), {"a": A, "b": row}),
        "sub": (lambda T, v: scalar(v["a"] - v["b"], 2), {"a": A, "b": C}),
        "mul": (lambda T, v: scalar(v["a"] * v["b"], 3), {"a": A, "b": row}),
        "matmul": (lambda T, v: scalar(v["a"] @ v["b"], 4), {"a": A, "b": B}),
        "matmul_batched": (lambda T, v: scalar(ag.matmul(v["a"], v["b"]), 5), {"a": batch, "b": batch_b}),
        "matmul_vector": (lambda T, v: scalar(v["a"] @ v["b"], 6), {"a": A, "b": row}),
        "dot": (lambda T, v: scalar(ag.dot(v["a"], v["b"]), 7), {"a": A, "b": C}),
        "concat": (lambda T, v: scalar(ag.concat([v["a"], v["b"]], axis=0), 8), {"a": A, "b": C}),
        "slice": (lambda T, v: scalar(v["a"][1:, ::2], 9), {"a": A}),
        "reshape": (lambda T, v: scalar(ag.reshape(v["a"], (2, 6)), 10), {"a": A}),
        "transpose": (lambda T, v: scalar(ag.transpose(v["a"], (2, 0, 1)), 11), {"a": batch}),
        "expand": (lambda T, v: scalar(ag.expand(ag.reshape(v["a"], (1, 4)), (3, 4)), 12), {"a": row}),
        "sum": (lambda T, v: scalar(ag.sum_(v["a"], axis=1), 13), {"a": batch}),
        "mean": (lambda T, v: scalar(ag.mean(v["a"], axis=0, keepdims=True), 14), {"a": A}),
        "sigmoid": (lambda T, v: scalar(ag.sigmoid(v["a"] * 3.0), 15), {"a": A}),
        "tanh": (lambda T, v: scalar(ag.tanh(v["a"]), 16), {"a": A}),
        "exp": (lambda T, v: scalar(ag.exp(v["a"]), 17), {"a": A}),
        "log": (lambda T, v: scalar(ag.log(v["a"]), 18), {"a": pos}),
        "softmax": (lambda T, v: scalar(ag.softmax(v["a"], axis=-1), 19), {"a": batch}),
        "gather": (lambda T, v: scalar(ag.gather(v["a"], idx), 20), {"a": A}),
        "layer_norm": (lambda T, v: scalar(ag.layer_norm(v["a"]), 21), {"a": batch}),
    }


def _toy_vocab():
    return Vocabulary(n_users=3, n_items=6, n_queries=4, user_field_cards=(2,), item_field_cards=(2, 3))


def _store_cases():
    """Loss cases over d=4 toy parameter stores; inputs are the store contents."""
    d = 4
    rng = Rng(7)
    vocab = _toy_vocab()
    cases = {}

    # L1: backbone prediction + BCE
    store = ParameterStore(np.float64)
    init_embeddings(store, vocab, d, rng)
    init_scorer(store, "att_item", d, 3, rng)
    init_scorer(store, "att_query", d, 3, rng)
    init_head(store, 7 * d, (5,), rng)
    users = np.array([0, 1, 2, 1])
    items = np.array([3, 0, 5, 2])
    ufeat = np.array([[0], [1], [1]])
    ifeat = np.array([[0, 1], [1, 2], [0, 0], [1, 1], [0, 2], [1, 0]])
    hist = np.array([[1, 2, 0], [4, 0, 0], [5, 3, 2], [0, 0, 0]])
    hmask = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=float)
    qhist = np.array([[0, 3], [1, 0], [2, 2], [3, 1]])
    qmask = np.array([[1, 1], [1, 0], [1, 1], [0, 0]], dtype=float)
    labels = np.array([1.0, 0.0, 1.0, 0.0])

    def l1(T, P):
        e_u, e_i, e_xu, e_xi = embed_features(P, users, items, ufeat[users], ifeat[items])
        nu_b = adaptive_pool(P, "att_item", ag.gather(P["emb.item"], hist), e_i, hmask)
        nu_q = adaptive_pool(P, "att_query", ag.gather(P["emb.query"], qhist), e_i, qmask)
        prob = predict_ctr(P, (e_u, e_i, e_xu, e_xi, nu_b, nu_q), 2)
        return bce_loss(prob, labels)

    cases["din"] = {"L1": (l1, dict(store.items()))}

    # L2: SAS encoder + next-item loss
    store = ParameterStore(np.float64)
    store.add("emb.query", rng.normal(0, 0.5, (4, d)))
    store.add("emb.item", rng.normal(0, 0.5, (6, d)))
    init_sas(store, d, 3, rng, blocks=1)
    lengths = np.array([2, 1, 0, 2])
    pos = np.array([[1, 2], [3, 3], [0, 0], [5, 4]])
    pmask = np.array([[1, 1], [1, 0], [0, 0], [1, 1]], dtype=float)
    neg = np.array([[0, 4], [2, 5], [1, 1], [3, 0]])
    nmask = np.array([[1, 1], [1, 1], [0, 0], [1, 0]], dtype=float)

    def l2(heads):
        def build(T, P):
            seq = ag.gather(P["emb.query"], qhist)
            e = sas_encode(P, seq, lengths, heads=heads, blocks=1)
            return nip_loss(e, ag.gather(P["emb.item"], pos), pmask, ag.gather(P["emb.item"], neg), nmask)

        return build

    cases["sas"] = {"L2 (1 head)": (l2(1), dict(store.items())), "L2 (2 heads)": (l2(2), dict(store.items()))}

    # L3: bilinear contrastive loss
    store = ParameterStore(np.float64)
    store.add("emb.query", rng.normal(0, 0.5, (4, d)))
    store.add("emb.item", rng.normal(0, 0.5, (6, d)))
    init_bilinear(store, d, rng)
    queries = np.array([0, 2, 3])
    cpos = np.array([[1, 2], [4, 0], [5, 5]])
    cpmask = np.array([[1, 1], [1, 0], [1, 1]], dtype=float)
    cneg = np.array([[3, 4, 5], [1, 2, 3], [0, 1, 2]])

    def l3(T, P):
        return contrastive_loss(
            ag.gather(P["emb.query"], queries),
            ag.gather(P["emb.item"], cpos),
            cpmask,
            ag.gather(P["emb.item"], cneg),
            P["ctr.W"],
            0.5,
        )

    cases["contrastive"] = {"L3": (l3, dict(store.items()))}

    # diffusion MSE
    store = ParameterStore(np.float64)
    init_denoiser(store, 6, 8, rng)
    schedule = build_schedule(10, 1e-4, 0.02)
    x0 = np.array([[0.5, -0.5, 0, 0, 0.5, 0], [0, 0, -0.5, 0.5, 0, 0]])
    masked = np.array([[0.5, -0.5, 0, 0, 0, 0], [0, 0, -0.5, 0.5, 0, 0]])
    t = np.array([3, 9])
    eps = np.random.default_rng(3).normal(0, 1, x0.shape)

    def ldiff(T, P):
        return diffusion_loss(P, x0, t, eps, schedule, masked)

    cases["diffusion"] = {"diffusion MSE": (ldiff, dict(store.items()))}
    return cases


def _joint_case():
    """Joint loss L of the full estimator on a tiny synthetic dataset."""
    from .model import QueryRecClassifier, SampleTable
    from .synthetic import SyntheticConfig, generate_synthetic

    bundle = generate_synthetic(
        SyntheticConfig(n_users=6, n_items=8, n_queries=4, n_categories=2, sessions=3, l_max=4, window=3), seed=1
    )
    model = QueryRecClassifier(
        d=4, att_hidden=3, head_hidden=(5,), lambda2=0.7, lambda3=0.4, n_pos=2, n_neg=2,
        n_ctr_pos=2, n_ctr_neg=3, beta_ctr=0.5, dtype="float64", seed=3,
    )
    store = model.init_params(bundle)
    model._pos_cache, model._n_items = {}, bundle.vocab.n_items
    table = SampleTable.build(bundle, bundle.train)
    rows = np.arange(min(len(table), 8))

    def joint(T, P):
        return model.batch_loss(T, P, bundle, table, rows, Rng(11), bundle.query_items)["l"]

    inputs = dict(store.items())
    pick = np.random.default_rng(5)
    coords = {k: pick.choice(v.size, size=min(v.size, 6), replace=False) for k, v in inputs.items()}
    return joint, inputs, coords


def run_gradcheck(module: str | None = None, tolerance: float = TOLERANCE) -> list[GradcheckResult]:
    """Run every case of ``module`` (all modules when None)."""
    if module is not None and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    results = []
    if module in (None, "autograd"):
        for name, (build, inputs) in primitive_cases().items():
            err, n = check_gradients(build, inputs)
            results.append(GradcheckResult("autograd", name, err, n, tolerance))
    store_cases = _store_cases()
    for mod in ("din", "sas", "contrastive", "diffusion"):
        if module in (None, mod):
            for name, (build, inputs) in store_cases[mod].items():
                err, n = check_gradients(build, inputs)
                results.append(GradcheckResult(mod, name, err, n, tolerance))
    if module in (None, "model"):
        build, inputs, coords = _joint_case()
        err, n = check_gradients(build, inputs, coords=coords)
        results.append(GradcheckResult("model", "joint L", err, n, tolerance))
    return results


def format_results(results, seconds: float | None = None) -> str:
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.module:<12} {r.name:<16} rel_err={r.rel_error:.3e}  coords={r.n_coords}"
        for r in results
    ]
    if seconds is not None:
        lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed in {seconds:.2f}s")
    return "\n".join(lines)


def main_gradcheck(module=None) -> tuple[list[GradcheckResult], float]:
    start = time.perf_counter()
    results = run_gradcheck(module)
    return results, time.perf_counter() - start
