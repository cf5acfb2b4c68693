"""Shared fixtures-by-function for the unit and acceptance suites."""

import numpy as np

from queryrec.diffusion import DiffusionAugmenter, reverse_generate, topk_augment
from queryrec.synthetic import SyntheticConfig, generate_synthetic

# 8 queries over 16 items in 8 disjoint 2-item clusters; every off-cluster
# impression lands in the neighbouring cluster, so each query's negatives
# identify it even when its positives are withheld.
RECALL_TOY = SyntheticConfig(n_users=200, n_items=16, n_queries=8, n_categories=8, affinity=0.5, related=1.0, noise=0.0)
RECALL_K = 4


def recall_toy(seed=0, train_steps=2000):
    """Train on the toy query-item sets; return the held-out top-K hit-rate and the augmenter."""
    bundle = generate_synthetic(RECALL_TOY, seed=seed)
    sets = bundle.query_items
    aug = DiffusionAugmenter(
        n_steps=10, train_steps=train_steps, batch_size=8, mask_rate=0.5, lr=1e-2, top_k=RECALL_K, seed=seed
    ).fit(sets)
    queries, x0 = aug.vectors(sets)
    held = x0.copy()
    held[held > 0] = 0.0
    out = reverse_generate(held, aug.predict_x0, aug.schedule_, aug.n_steps // 2)
    hits = [
        len(topk_augment(out[k], RECALL_K) & bundle.ground_truth[q]) / len(bundle.ground_truth[q])
        for k, q in enumerate(queries)
    ]
    return float(np.mean(hits)), aug


def tiny_run_config(**overrides):
    """A seconds-scale end-to-end configuration on the small synthetic dataset."""
    from queryrec.config import RunConfig

    base = RunConfig(
        synthetic=SyntheticConfig(n_users=60, n_items=40, n_queries=12, n_categories=4, sessions=6),
        d=8,
        att_hidden=4,
        head_hidden=(8,),
        n_ctr_neg=8,
        epochs=2,
        batch_size=64,
        diffusion_steps=10,
        diffusion_train_steps=20,
        diffusion_sparse_max=3,
    )
    return base.with_overrides(**overrides)


def benchmark_config(**overrides):
    """The end-to-end benchmark: planted cross-domain affinity and interest shift, many sparse queries."""
    from pathlib import Path

    from queryrec.config import load_config

    return load_config(Path(__file__).parents[1] / "configs" / "benchmark.cfg").with_overrides(**overrides)


BENCHMARK_SEEDS = (0, 1, 2, 3, 4)
