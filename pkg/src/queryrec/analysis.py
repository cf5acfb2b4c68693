"""Cross-domain diagnostics: interest shift, correlation ratios, bootstrap tests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .rng import Rng

JS_BINS = 20


def interest_distribution(categories: Sequence[int], n_categories: int) -> np.ndarray:
    """Normalised category frequencies of a user's clicked items."""
    cats = np.asarray(categories, dtype=np.int64)
    if cats.size == 0:
        raise ValueError("interest distribution of an empty click set is undefined")
    if cats.min() < 0 or cats.max() >= n_categories:
        raise ValueError("category id out of range")
    return np.bincount(cats, minlength=n_categories) / cats.size


def js_divergence(p, q) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distributions must be 1-d and equal length, got {p.shape} and {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a normalised distribution")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return float(min(1.0, max(0.0, 0.5 * (kl(p) + kl(q)))))


def user_js_divergences(rec, search, item_category, n_categories: int, users=None) -> dict[int, float]:
    """Per-user JS divergence between search- and rec-domain click categories.

    Users without clicks in either domain are skipped.
    """
    src: dict[int, list[int]] = {}
    rcm: dict[int, list[int]] = {}
    for s in search:
        if s.clicked:
            src.setdefault(s.user, []).append(int(item_category[s.item]))
    for r in rec:
        if r.clicked:
            rcm.setdefault(r.user, []).append(int(item_category[r.item]))
    pool = sorted(set(src) & set(rcm))
    if users is not None:
        pool = [u for u in pool if u in set(users)]
    return {
        u: js_divergence(
            interest_distribution(src[u], n_categories), interest_distribution(rcm[u], n_categories)
        )
        for u in pool
    }


def js_histogram(values: Sequence[float], bins: int = JS_BINS) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, c in rows:
            fh.write(f"{lo:.2f},{hi:.2f},{c}\n")


# ---------------------------------------------------------------------------
# correlation ratios


@dataclass
class CorrelationReport:
    r1: float
    r2: float
    n: int
    indicators: list[float] = field(default_factory=list)
    probabilities: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"R1_corr": self.r1, "R2_corr": self.r2, "n": self.n}


def correlation_scores(samples: Sequence[tuple[int, Sequence[int]]], p_src) -> CorrelationReport:
    """R1/R2 overlap ratios of rec clicks against prior search impressions.

    ``samples`` holds ``(clicked_category, impression_categories)`` pairs;
    ``p_src`` maps a category to its frequency among search impressions.
    The chance model is ``Pr = 1 - (1 - p_src)^|s|``.  Samples with an
    empty impression list are dropped from both ratios.
    """
    ind, prob = [], []
    for target, impressions in samples:
        if len(impressions) == 0:
            continue
        p = float(p_src[target]) if not isinstance(p_src, dict) else float(p_src.get(target, 0.0))
        ind.append(1.0 if target in set(impressions) else 0.0)
        prob.append(1.0 - (1.0 - p) ** len(impressions))
    if not ind:
        raise ValueError("no sample has a non-empty impression list")
    ind_a = np.array(ind)
    prob_a = np.array(prob)
    if np.all(prob_a == 0):
        raise ValueError("all chance probabilities are zero")
    r1 = float(ind_a.mean() / prob_a.mean())
    keep = prob_a > 0
    # a zero-probability sample can only have indicator 0 here
    r2 = float(np.sum(ind_a[keep] / prob_a[keep]) / ind_a.size)
    return CorrelationReport(r1, r2, int(ind_a.size), ind, prob)


def correlation_samples(rec, search, item_category, n_samples: int | None, rng: Rng | None = None):
    """Build (category, prior impression categories) pairs from raw logs.

    Positive rec interactions are sampled without replacement when
    ``n_samples`` is smaller than the pool.  Returns the samples, the
    category-level ``p_src`` and the user of each sample (for clustered
    resampling).
    """
    cat = np.asarray(item_category)
    n_cat = int(cat.max()) + 1
    p_src = np.bincount([cat[s.item] for s in search], minlength=n_cat).astype(np.float64)
    if p_src.sum() > 0:
        p_src /= p_src.sum()
    by_user: dict[int, list] = {}
    for s in search:
        by_user.setdefault(s.user, []).append((s.time, int(cat[s.item])))
    for rows in by_user.values():
        rows.sort(key=lambda r: r[0])
    positives = [r for r in rec if r.clicked]
    if n_samples is not None and n_samples < len(positives):
        rng = rng or Rng(0)
        idx = np.sort(rng.choice(len(positives), size=n_samples, replace=False))
        positives = [positives[i] for i in idx]
    samples, users = [], []
    for r in positives:
        rows = by_user.get(r.user, [])
        samples.append((int(cat[r.item]), [c for t, c in rows if t < r.time]))
        users.append(r.user)
    return samples, p_src, users


def bootstrap_standard_error(samples, p_src, resamples: int, rng: Rng, groups=None) -> tuple[float, float]:
    """Bootstrap standard errors of (R1, R2).

    With ``groups`` (e.g. the user of each sample) whole groups are
    resampled, since samples of one user share the same impression history
    and are not independent; otherwise individual samples are resampled.
    """
    groups = range(len(samples)) if groups is None else groups
    if len(groups) != len(samples):
        raise ValueError("groups must align with samples")
    clusters: dict = {}
    for sample, g in zip(samples, groups):
        if len(sample[1]):
            clusters.setdefault(g, []).append(sample)
    members = list(clusters.values())
    n = len(members)
    if n == 0:
        raise ValueError("no samples with impressions")
    r1s, r2s = [], []
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        try:
            rep = correlation_scores([s for i in idx for s in members[i]], p_src)
        except ValueError:
            continue
        r1s.append(rep.r1)
        r2s.append(rep.r2)
    return float(np.std(r1s, ddof=1)), float(np.std(r2s, ddof=1))


# ---------------------------------------------------------------------------
# bootstrap comparison


@dataclass
class BootstrapReport:
    resamples: int
    mean_a: float
    mean_b: float
    mean_diff: float
    ci_a: tuple[float, float]
    ci_b: tuple[float, float]
    ci_diff: tuple[float, float]
    p_value: float
    boot_means_a: np.ndarray = field(repr=False, default=None)
    boot_means_b: np.ndarray = field(repr=False, default=None)
    boot_diffs: np.ndarray = field(repr=False, default=None)

    @property
    def ci_width(self) -> float:
        return self.ci_diff[1] - self.ci_diff[0]

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("boot_means_a", "boot_means_b", "boot_diffs"):
            out.pop(key)
        return out


def bootstrap_compare(auc_a, auc_b, resamples: int = 10000, rng: Rng | None = None, level: float = 0.95) -> BootstrapReport:
    """Percentile bootstrap of two metric lists and of ``mean(b) - mean(a)``.

    The p-value is two-sided, from resampling both lists after shifting each
    to the pooled mean (equal-means null), floored at ``1/(resamples+1)``.
    """
    a = np.asarray(auc_a, dtype=np.float64)
    b = np.asarray(auc_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each list needs at least two values")
    rng = rng or Rng(0)
    r_obs, r_null = rng.split(2)
    ia = r_obs.integers(0, a.size, size=(resamples, a.size))
    ib = r_obs.integers(0, b.size, size=(resamples, b.size))
    ma = a[ia].mean(axis=1)
    mb = b[ib].mean(axis=1)
    diffs = mb - ma
    observed = b.mean() - a.mean()
    pooled = np.concatenate([a, b]).mean()
    a0 = a - a.mean() + pooled
    b0 = b - b.mean() + pooled
    na = r_null.integers(0, a.size, size=(resamples, a.size))
    nb = r_null.integers(0, b.size, size=(resamples, b.size))
    null = b0[nb].mean(axis=1) - a0[na].mean(axis=1)
    tol = 1e-12 * max(1.0, abs(observed))
    if np.ptp(a) == 0 and np.ptp(b) == 0 and a[0] == b[0]:
        p = 1.0
    else:
        extreme = np.count_nonzero(np.abs(null) >= abs(observed) - tol)
        p = (extreme + 1.0) / (resamples + 1.0)
    lo, hi = 100 * (1 - level) / 2, 100 * (1 + level) / 2

    def ci(x):
        return float(np.percentile(x, lo)), float(np.percentile(x, hi))

    return BootstrapReport(
        resamples=resamples,
        mean_a=float(a.mean()),
        mean_b=float(b.mean()),
        mean_diff=float(observed),
        ci_a=ci(ma),
        ci_b=ci(mb),
        ci_diff=ci(diffs),
        p_value=float(min(1.0, p)),
        boot_means_a=ma,
        boot_means_b=mb,
        boot_diffs=diffs,
    )


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
