"""Synthetic search + recommendation logs with planted cross-domain structure.

Each query belongs to one item category (its ground-truth cluster).  A user
alternates search events and recommendation exposures:

* a search event draws an intent category from the user's search-domain
  preference, issues one of that category's queries and shows impressions
  that land in the query's cluster with probability ``affinity`` (otherwise
  in the neighbouring category with probability ``related``, otherwise
  uniformly);
* a recommendation exposure draws a category from the user's rec-domain
  preference and shows one of its items; the click logit grows with that
  preference and, scaled by ``affinity``, with whether the user searched
  that category before.

Search clicks on in-cluster impressions use the same preference term (with
the search-domain preference), so at ``shift = 0`` both domains share the
same expected category-click distribution.

``shift`` mixes the search preference away from the rec preference, so the
per-user interest divergence grows with it; ``affinity = 0`` makes the two
domains independent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DatasetBundle, RecInteraction, SearchInteraction, assemble_bundle
from .rng import Rng


@dataclass
class SyntheticConfig:
    n_users: int = 300
    n_items: int = 120
    n_queries: int = 40
    n_categories: int = 8
    n_user_fields: int = 1
    user_field_card: int = 4
    n_item_fields: int = 1
    item_field_card: int = 5
    sessions: int = 10
    search_prob: float = 0.7
    rec_per_session: int = 4
    impressions: int = 2
    shift: float = 0.5
    affinity: float = 0.8
    related: float = 0.0
    noise: float = 0.05
    concentration: float = 0.5
    search_click_rate: float = 0.35
    rec_bias: float = -1.5
    pref_weight: float = 1.0
    search_boost: float = 2.5
    l_max: int = 50
    window: int = 10

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("synthetic config needs at least one user and one item")
        if self.n_categories < 1 or self.n_categories > self.n_items:
            raise ValueError("n_categories must be in [1, n_items]")
        if self.n_queries < 1:
            raise ValueError("n_queries must be positive")
        for name in ("shift", "affinity", "related", "noise", "search_prob", "search_click_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def from_dict(cls, values: dict) -> "SyntheticConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(f"unknown synthetic config key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def _bernoulli(rng: Rng, p: float) -> bool:
    return bool(rng.uniform() < p)


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> DatasetBundle:
    """Generate a :class:`DatasetBundle`; identical (config, seed) give identical logs."""
    config.validate()
    root = Rng(seed)
    r_world, r_users, r_events = root.split(3)
    C = config.n_categories

    category = r_world.permutation(np.arange(config.n_items) % C)
    item_extra = r_world.integers(0, config.item_field_card, size=(config.n_items, config.n_item_fields))
    item_features = np.column_stack([category, item_extra]).astype(np.int64)
    query_cat = np.arange(config.n_queries) % C
    members = [np.flatnonzero(category == c) for c in range(C)]
    queries_of = [np.flatnonzero(query_cat == c) for c in range(C)]
    truth = {q: frozenset(int(i) for i in members[query_cat[q]]) for q in range(config.n_queries)}

    user_features = r_users.integers(0, config.user_field_card, size=(config.n_users, config.n_user_fields))
    alpha = np.full(C, config.concentration)
    p_rec = r_users.generator.dirichlet(alpha, size=config.n_users)
    p_other = r_users.generator.dirichlet(alpha, size=config.n_users)
    p_src = (1.0 - config.shift) * p_rec + config.shift * p_other
    p_src /= p_src.sum(axis=1, keepdims=True)
    user_bias = 0.3 * (user_features[:, 0] - (config.user_field_card - 1) / 2.0) if config.n_user_fields else np.zeros(config.n_users)

    rate = min(max(config.search_click_rate, 1e-9), 1 - 1e-9)
    search_logit = float(np.log(rate / (1.0 - rate)))

    rec: list[RecInteraction] = []
    search: list[SearchInteraction] = []
    for u in range(config.n_users):
        stream = r_events.child(f"user-{u}")
        t = 0
        searched = np.zeros(C, dtype=bool)
        for _ in range(config.sessions):
            if _bernoulli(stream, config.search_prob):
                c = int(stream.choice(C, p=p_src[u]))
                pool = queries_of[c]
                if pool.size == 0:
                    pool = np.arange(config.n_queries)
                q = int(stream.choice(pool))
                for _ in range(config.impressions):
                    draw = stream.uniform()
                    if draw < config.affinity:
                        item = int(stream.choice(members[c]))
                    elif draw < config.affinity + (1 - config.affinity) * config.related:
                        item = int(stream.choice(members[(c + 1) % C]))
                    else:
                        item = int(stream.integers(0, config.n_items))
                    if _bernoulli(stream, config.noise):
                        click = _bernoulli(stream, 0.5)
                    elif category[item] == c:
                        click = _bernoulli(stream, _sigmoid(search_logit + config.pref_weight * (C * p_src[u, c] - 1.0)))
                    else:
                        click = False
                    search.append(SearchInteraction(q, u, item, t, click))
                searched[c] = True
                t += 1
            for _ in range(config.rec_per_session):
                c = int(stream.choice(C, p=p_rec[u]))
                item = int(stream.choice(members[c]))
                logit = (
                    config.rec_bias
                    + user_bias[u]
                    + config.pref_weight * (C * p_rec[u, c] - 1.0)
                    + config.affinity * config.search_boost * float(searched[c])
                )
                if _bernoulli(stream, config.noise):
                    click = _bernoulli(stream, 0.5)
                else:
                    click = _bernoulli(stream, _sigmoid(logit))
                rec.append(RecInteraction(u, item, t, click))
                t += 1

    return assemble_bundle(
        rec,
        search,
        user_features,
        item_features,
        n_queries=config.n_queries,
        l_max=config.l_max,
        window=config.window,
        ground_truth=truth,
    )
