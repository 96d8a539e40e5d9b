"""One-way ANOVA, pooled two-sample t and permutation Tukey HSD across clusters."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from ..errors import ContractError

DEFAULT_SHUFFLES = 10_000


@dataclass(frozen=True)
class PairwiseRow:
    a: int
    b: int
    mean_diff: float  # mean(a) - mean(b)
    q: float  # studentized range statistic
    p_value: float


@dataclass
class StatReport:
    anova_f: float
    anova_p: float
    pairwise: list[PairwiseRow] = field(default_factory=list)
    method: str = "f-distribution"

    def to_dict(self) -> dict:
        return {
            "anova_f": self.anova_f,
            "anova_p": self.anova_p,
            "anova_p_method": self.method,
            "pairwise": [
                {"a": r.a, "b": r.b, "mean_diff": r.mean_diff, "q": r.q, "p_value": r.p_value}
                for r in self.pairwise
            ],
        }


def _pool(groups) -> tuple[np.ndarray, np.ndarray]:
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ContractError("need at least two groups")
    for i, g in enumerate(groups):
        if g.size < 2:
            raise ContractError(f"group {i} has {g.size} samples; at least 2 required")
    values = np.concatenate(groups)
    codes = np.repeat(np.arange(len(groups)), [g.size for g in groups])
    return values, codes


def _ss(values: np.ndarray, codes: np.ndarray, k: int):
    counts = np.bincount(codes, minlength=k)
    sums = np.bincount(codes, weights=values, minlength=k)
    means = sums / counts
    grand = values.mean()
    ssb = float(np.sum(counts * (means - grand) ** 2))
    ssw = float(np.sum((values - means[codes]) ** 2))
    return ssb, ssw, means, counts


def _f_from_ss(ssb: float, ssw: float, k: int, n: int) -> float:
    if ssw == 0.0:
        return 0.0 if ssb == 0.0 else float("inf")
    return (ssb / (k - 1)) / (ssw / (n - k))


def anova_oneway(groups, permutations: int = 0, seed: int = 0) -> tuple[float, float]:
    """Classical between/within F. The p-value comes from the F distribution unless
    ``permutations`` > 0, in which case it is a seeded permutation p-value."""
    values, codes = _pool(groups)
    k, n = int(codes.max()) + 1, values.size
    ssb, ssw, _, _ = _ss(values, codes, k)
    f = _f_from_ss(ssb, ssw, k, n)
    if permutations:
        rng = np.random.default_rng(seed)
        hits = 0
        for _ in range(permutations):
            pb, pw, _, _ = _ss(values, rng.permutation(codes), k)
            hits += _f_from_ss(pb, pw, k, n) >= f
        return f, (hits + 1) / (permutations + 1)
    if np.isinf(f):
        return f, 0.0
    return f, float(sps.f.sf(f, k - 1, n - k))


def pooled_t(a, b) -> float:
    """Two-sample t with pooled variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    sp2 = (np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)) / (na + nb - 2)
    return float((a.mean() - b.mean()) / np.sqrt(sp2 * (1 / na + 1 / nb)))


def _q_matrix(means: np.ndarray, counts: np.ndarray, msw: float) -> np.ndarray:
    diff = np.abs(means[:, None] - means[None, :])
    se = np.sqrt(msw / 2.0 * (1.0 / counts[:, None] + 1.0 / counts[None, :]))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(se > 0, diff / se, np.where(diff > 0, np.inf, 0.0))
    return q


def tukey_hsd(groups, shuffles: int = DEFAULT_SHUFFLES, seed: int = 0) -> list[PairwiseRow]:
    """Pairwise mean differences with Tukey-Kramer q and permutation p-values.

    Each shuffle reassigns the pooled values to groups of the original sizes and records
    the maximum q over all pairs; a pair's p-value is the share of shuffles whose maximum
    reaches its observed q (with the usual +1 correction).
    """
    values, codes = _pool(groups)
    k, n = int(codes.max()) + 1, values.size
    _, ssw, means, counts = _ss(values, codes, k)
    q_obs = _q_matrix(means, counts, ssw / (n - k))
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(k, 1)
    maxima = np.empty(shuffles)
    for s in range(shuffles):
        _, pw, pm, pc = _ss(values, rng.permutation(codes), k)
        maxima[s] = _q_matrix(pm, pc, pw / (n - k))[iu].max()
    maxima.sort()
    rows = []
    for a, b in itertools.combinations(range(k), 2):
        q = float(q_obs[a, b])
        if not np.isfinite(q) or q == 0.0 and np.all(maxima == 0.0):
            hits = shuffles if q == 0.0 else int(np.count_nonzero(maxima == np.inf))
        else:
            hits = shuffles - int(np.searchsorted(maxima, q, side="left"))
        rows.append(PairwiseRow(a, b, float(means[a] - means[b]), q, (hits + 1) / (shuffles + 1)))
    return rows


def cluster_statistics(mean_ndre, labels, shuffles: int = DEFAULT_SHUFFLES, seed: int = 0,
                       permutation_anova: bool = False) -> StatReport:
    """ANOVA and Tukey HSD of per-patch mean NDRE grouped by cluster label."""
    mean_ndre = np.asarray(mean_ndre, dtype=float)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    groups = [mean_ndre[labels == j] for j in ids]
    f, p = anova_oneway(groups, permutations=shuffles if permutation_anova else 0, seed=seed)
    rows = [
        PairwiseRow(int(ids[r.a]), int(ids[r.b]), r.mean_diff, r.q, r.p_value)
        for r in tukey_hsd(groups, shuffles, seed)
    ]
    return StatReport(f, p, rows, "permutation" if permutation_anova else "f-distribution")
