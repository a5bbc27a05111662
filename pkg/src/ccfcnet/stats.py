"""Two-sample Welch t-test and one-way ANOVA, written out from their formulas."""

from __future__ import annotations

import numpy as np
from scipy import stats as _sps

from .errors import DegenerateSample


def welch_t_test(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DegenerateSample("each sample needs at least two observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise DegenerateSample("both samples have zero variance")
    sa, sb = va / a.size, vb / b.size
    se2 = sa + sb
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1))
    p = 2.0 * _sps.t.sf(abs(t), df)
    return float(t), float(min(1.0, p))


def anova_oneway(groups) -> tuple[float, float]:
    """One-way ANOVA F statistic with ``(k - 1, N - k)`` degrees of freedom."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    k = len(groups)
    n = sum(g.size for g in groups)
    if k < 2 or any(g.size < 1 for g in groups) or n - k < 1:
        raise DegenerateSample("ANOVA needs at least two non-empty groups and N > k")
    grand = np.concatenate(groups).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    if ss_within == 0:
        raise DegenerateSample("zero within-group variance")
    f = (ss_between / (k - 1)) / (ss_within / (n - k))
    return float(f), float(_sps.f.sf(f, k - 1, n - k))


def bonferroni(pvalues) -> np.ndarray:
    p = np.asarray(pvalues, dtype=np.float64)
    m = np.count_nonzero(~np.isnan(p))
    return np.minimum(1.0, p * max(m, 1))
