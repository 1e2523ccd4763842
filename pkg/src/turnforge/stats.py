"""Group comparisons on turn-level features.

Two tests per feature: a weighted multivariate test of equal decile
proportions across groups, and pairwise differences in (winsorized) means.
Both use a one-way conversation-clustered sandwich covariance with the
``G / (G - 1)`` finite-sample factor. P-values from a run are adjusted
together with the Benjamini-Hochberg step-up procedure.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .errors import (
    OutOfRange,
    SingularDesign,
    StatsError,
    TooFewClusters,
    TooFewGroups,
    UnknownSpeakerInGrouping,
    ZeroMargin,
)
from .features import BOUNDED_FEATURES, DecileBinning, conversation_weights, decile_bin, is_missing, winsorize

log = logging.getLogger(__name__)

N_BINS = 10


@dataclass
class GroupDesign:
    values: np.ndarray
    groups: np.ndarray
    clusters: np.ndarray
    weights: np.ndarray
    group_order: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.groups = np.asarray(self.groups).astype(str)
        self.clusters = np.asarray(self.clusters).astype(str)
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.values.shape[0]
        if not (self.groups.shape[0] == self.clusters.shape[0] == self.weights.shape[0] == n):
            raise ValueError("design columns differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        present = sorted(set(self.groups.tolist()))
        if self.group_order:
            missing = [g for g in self.group_order if g not in present]
            extra = [g for g in present if g not in self.group_order]
            if extra:
                raise ValueError(f"groups {extra} missing from group_order")
            self.group_order = tuple(g for g in self.group_order if g not in missing)
        else:
            self.group_order = tuple(present)

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.clusters).size)

    def subset(self, mask: np.ndarray) -> GroupDesign:
        return GroupDesign(
            self.values[mask], self.groups[mask], self.clusters[mask], self.weights[mask],
            tuple(g for g in self.group_order if g in set(self.groups[mask].tolist())),
        )


@dataclass(frozen=True)
class DistributionTestResult:
    group_labels: tuple[str, ...]
    group_proportions: np.ndarray  # (K, 10), rows sum to 1
    F_stat: float
    df_num: int
    df_den: int
    p_value: float


@dataclass(frozen=True)
class MeanDiffResult:
    group_a: str
    group_b: str
    diff: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float

    @property
    def contrast(self) -> str:
        return f"{self.group_a} - {self.group_b}"


@dataclass(frozen=True)
class ChiSquaredResult:
    stat: float
    df: int
    p: float


@dataclass
class GroupComparison:
    feature: str
    distribution: DistributionTestResult
    mean: MeanDiffResult
    n_turns: int
    n_clusters: int
    p_adj_mean: float = float("nan")
    p_adj_distr: float = float("nan")

    @property
    def contrast(self) -> str:
        return self.mean.contrast

    def to_record(self) -> dict:
        return {
            "feature": self.feature,
            "contrast": self.contrast,
            "diff": self.mean.diff,
            "ci": [self.mean.ci_low, self.mean.ci_high],
            "p_mean": self.mean.p_value,
            "p_distr": self.distribution.p_value,
            "p_adj_mean": self.p_adj_mean,
            "p_adj_distr": self.p_adj_distr,
            "n_turns": self.n_turns,
            "n_clusters": self.n_clusters,
        }


def _check_design(design: GroupDesign) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    labels = design.group_order
    if len(labels) < 2:
        raise TooFewGroups(f"need at least 2 groups, got {len(labels)}")
    g_index = {g: i for i, g in enumerate(labels)}
    gi = np.array([g_index[g] for g in design.groups.tolist()], dtype=np.int64)
    _, ci = np.unique(design.clusters, return_inverse=True)
    if ci.max(initial=-1) + 1 < 2:
        raise TooFewClusters("need at least 2 clusters")
    for k, g in enumerate(labels):
        if np.unique(ci[gi == k]).size < 2:
            raise TooFewClusters(f"group {g!r} appears in fewer than 2 clusters")
    return labels, gi, ci


def cluster_robust_cov(
    scores: np.ndarray, bread: np.ndarray, cluster_index: np.ndarray, n_clusters: int | None = None
) -> np.ndarray:
    """One-way clustered sandwich ``c * bread @ (sum_g s_g s_g') @ bread``.

    ``scores`` has one row per observation (already weighted), ``bread`` is
    the inverse Hessian. ``c = G / (G - 1)``.
    """
    G = int(cluster_index.max()) + 1 if n_clusters is None else n_clusters
    summed = np.zeros((G, scores.shape[1]))
    np.add.at(summed, cluster_index, scores)
    meat = summed.T @ summed
    return (G / (G - 1)) * bread @ meat @ bread.T


def _group_regression(
    y: np.ndarray, gi: np.ndarray, ci: np.ndarray, w: np.ndarray, K: int
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted regression of (possibly multivariate) ``y`` on group dummies.

    Returns coefficients ``(K, m)`` and the clustered covariance of their
    row-major vectorization ``(K*m, K*m)``.
    """
    if y.ndim == 1:
        y = y[:, None]
    m = y.shape[1]
    wsum = np.bincount(gi, weights=w, minlength=K)
    coef = np.zeros((K, m))
    for j in range(m):
        coef[:, j] = np.bincount(gi, weights=w * y[:, j], minlength=K) / wsum
    resid = y - coef[gi]
    # score of coefficient (k, j) is w_i * resid_ij on rows of group k
    scores = np.zeros((y.shape[0], K * m))
    rows = np.arange(y.shape[0])
    for j in range(m):
        scores[rows, gi * m + j] = w * resid[:, j]
    bread = np.diag(np.repeat(1.0 / wsum, m))
    cov = cluster_robust_cov(scores, bread, ci)
    return coef, cov


def distribution_test(design: GroupDesign, bins: DecileBinning | np.ndarray | None = None) -> DistributionTestResult:
    """Joint Wald F test that all groups share the same decile proportions.

    Decile indicators 2..10 (bin 1 is the omitted reference) are regressed
    on group dummies; the hypothesis sets every group's coefficient vector
    equal to the first group's. Bins empty across all rows are dropped and
    ``df_num`` is the rank of the restriction covariance, which is
    ``(bins_present - 1) * (K - 1)`` unless a group misses some bins;
    ``df_den = G - 1``.
    """
    labels, gi, ci = _check_design(design)
    K = len(labels)
    if bins is None:
        bins = decile_bin(design.values, design.weights)
    assign = np.asarray(bins.assignments if isinstance(bins, DecileBinning) else bins, dtype=np.int64)
    if assign.shape[0] != gi.shape[0]:
        raise ValueError("bin assignments do not match design rows")
    w = design.weights

    props = np.zeros((K, N_BINS))
    for k in range(K):
        sel = gi == k
        props[k] = np.bincount(assign[sel] - 1, weights=w[sel], minlength=N_BINS)[:N_BINS]
        props[k] /= props[k].sum()

    present = np.unique(assign)
    if present.size < 2:
        raise SingularDesign("all observations fall in a single bin")
    for k in range(K):
        if np.unique(assign[gi == k]).size < 2:
            raise SingularDesign(f"group {labels[k]!r} lies entirely within one bin")
    cats = present[1:]
    Y = (assign[:, None] == cats[None, :]).astype(float)
    m = cats.size
    coef, cov = _group_regression(Y, gi, ci, w, K)

    q = m * (K - 1)
    R = np.zeros((q, K * m))
    for k in range(1, K):
        for j in range(m):
            R[(k - 1) * m + j, k * m + j] = 1.0
            R[(k - 1) * m + j, j] = -1.0
    b = coef.reshape(-1)
    rb = R @ b
    rvr = R @ cov @ R.T
    G = int(ci.max()) + 1
    # A rank-deficient covariance arises when a group never reaches some bins.
    # Test on its range; a contrast with no sampling variance is decisive.
    evals, evecs = np.linalg.eigh((rvr + rvr.T) / 2)
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    rank = int(keep.sum())
    if rank == 0:
        raise SingularDesign("restriction covariance is zero")
    proj = evecs.T @ rb
    if np.linalg.norm(proj[~keep]) > 1e-9 * max(np.linalg.norm(rb), 1e-12):
        return DistributionTestResult(labels, props, math.inf, rank, G - 1, 0.0)
    wald = float((proj[keep] ** 2 / evals[keep]).sum())
    F = wald / rank
    p = float(sps.f.sf(F, rank, G - 1))
    return DistributionTestResult(labels, props, F, rank, G - 1, p)


def pairwise_distribution_tests(
    design: GroupDesign, bins: DecileBinning | np.ndarray | None = None
) -> dict[tuple[str, str], DistributionTestResult]:
    """Distribution test for every pair of groups separately."""
    if bins is None:
        bins = decile_bin(design.values, design.weights)
    assign = np.asarray(bins.assignments if isinstance(bins, DecileBinning) else bins)
    out = {}
    for a, b in itertools.combinations(design.group_order, 2):
        mask = np.isin(design.groups, [a, b])
        sub = design.subset(mask)
        sub.group_order = (a, b)
        out[(a, b)] = distribution_test(sub, assign[mask])
    return out


def mean_difference(
    design: GroupDesign,
    winsor_level: float | None = 0.95,
    ci: Literal["normal", "t"] = "normal",
    alpha: float = 0.05,
) -> list[MeanDiffResult]:
    """Pairwise differences in weighted (winsorized) group means.

    ``winsor_level=None`` skips winsorization, for bounded features. For
    groups ordered ``g_1..g_K`` the contrasts are ``g_i - g_j`` for i < j.
    Critical values are normal, or t with ``G - 1`` df when ``ci="t"``.
    """
    labels, gi, ci_idx = _check_design(design)
    K = len(labels)
    y = design.values
    if winsor_level is not None:
        y = winsorize(y, winsor_level)
    coef, cov = _group_regression(y, gi, ci_idx, design.weights, K)
    beta = coef[:, 0]
    G = int(ci_idx.max()) + 1
    if ci == "t":
        crit = float(sps.t.ppf(1 - alpha / 2, G - 1))
    else:
        crit = float(sps.norm.ppf(1 - alpha / 2))
    out = []
    for a, b in itertools.combinations(range(K), 2):
        diff = float(beta[a] - beta[b])
        var = cov[a, a] + cov[b, b] - 2 * cov[a, b]
        se = float(math.sqrt(max(var, 0.0)))
        if se == 0.0:
            p = 1.0 if diff == 0 else 0.0
        else:
            z = abs(diff) / se
            p = float(2 * (sps.t.sf(z, G - 1) if ci == "t" else sps.norm.sf(z)))
        out.append(MeanDiffResult(labels[a], labels[b], diff, se, diff - crit * se, diff + crit * se, p))
    return out


def bh_adjust(p_values: Sequence[float]) -> list[float]:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return []
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise OutOfRange("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    q = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(q[::-1])[::-1]
    q = np.minimum(q, 1.0)
    out = np.empty(m)
    out[order] = q
    return out.tolist()


def chi_squared_independence(table: Sequence[Sequence[float]]) -> ChiSquaredResult:
    """Pearson chi-squared test of independence for an R x C count table."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2:
        raise ValueError("table must be two-dimensional")
    if np.any(obs < 0):
        raise ValueError("counts must be non-negative")
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise ZeroMargin("a row or column total is zero")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(((obs - expected) ** 2 / expected).sum())
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return ChiSquaredResult(stat, df, float(sps.chi2.sf(stat, df)))


@dataclass
class CompareConfig:
    features: Sequence[str] | None = None
    winsor_level: float = 0.95
    bounded_features: frozenset[str] = BOUNDED_FEATURES
    ci: Literal["normal", "t"] = "normal"
    group_order: tuple[str, ...] = ()
    skip_failed: bool = False


@dataclass
class ComparisonRun:
    comparisons: list[GroupComparison]
    skipped: dict[str, str] = field(default_factory=dict)


def _lookup_groups(
    rows: Sequence[Mapping], grouping: Mapping[tuple[str, str], str]
) -> list[str | None]:
    present = {(str(r["conversation_id"]), str(r["speaker_id"])) for r in rows}
    unknown = sorted(k for k in grouping if k not in present)
    if unknown:
        raise UnknownSpeakerInGrouping(
            f"{len(unknown)} grouping entries match no feature rows, e.g. {unknown[0]}"
        )
    return [grouping.get((str(r["conversation_id"]), str(r["speaker_id"]))) for r in rows]


def compare_groups(
    rows: Sequence[Mapping],
    grouping: Mapping[tuple[str, str], str],
    config: CompareConfig | None = None,
) -> ComparisonRun:
    """Run both tests for every feature and BH-adjust the whole run.

    ``rows`` are per-turn feature records carrying ``conversation_id`` and
    ``speaker_id``; ``grouping`` maps (conversation, speaker) to a label.
    Deciles are cut on all rows with a value, grouped or not, with each
    speaker-conversation weighted equally; tests use the grouped rows only.
    All mean-contrast and distribution p-values form one BH family.
    """
    config = config or CompareConfig()
    labels = _lookup_groups(rows, grouping)
    if len({g for g in labels if g is not None}) < 2:
        raise TooFewGroups("grouping defines fewer than 2 groups")
    features = list(config.features) if config.features else [
        k for k in rows[0] if k not in ("conversation_id", "speaker_id", "turn_id", "weight")
        and not k.startswith("decile_")
    ] if rows else []

    comparisons: list[GroupComparison] = []
    skipped: dict[str, str] = {}
    distr_p: dict[str, float] = {}
    for feat in features:
        idx = [i for i, r in enumerate(rows) if not is_missing(r.get(feat))]
        if not idx:
            skipped[feat] = "no values"
            continue
        vals = np.array([float(rows[i][feat]) for i in idx])
        keys = [(str(rows[i]["conversation_id"]), str(rows[i]["speaker_id"])) for i in idx]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            binning = decile_bin(vals, conversation_weights(keys))
        sel = np.array([labels[i] is not None for i in idx], dtype=bool)
        g_keys = [k for k, s in zip(keys, sel) if s]
        design = GroupDesign(
            values=vals[sel],
            groups=np.array([labels[i] for i, s in zip(idx, sel) if s]),
            clusters=np.array([k[0] for k in g_keys]),
            weights=np.array(conversation_weights(g_keys)),
            group_order=config.group_order,
        )
        try:
            dist = distribution_test(design, binning.assignments[sel])
            level = None if feat in config.bounded_features else config.winsor_level
            means = mean_difference(design, level, config.ci)
        except StatsError as exc:
            if not config.skip_failed or isinstance(exc, TooFewGroups):
                raise
            log.warning("skipping feature %s: %s", feat, exc)
            skipped[feat] = f"{type(exc).__name__}: {exc}"
            continue
        distr_p[feat] = dist.p_value
        for md in means:
            comparisons.append(GroupComparison(feat, dist, md, int(sel.sum()), design.n_clusters))

    # one BH family: every mean contrast plus one distribution test per feature
    feats_in_order = list(distr_p)
    family = [c.mean.p_value for c in comparisons] + [distr_p[f] for f in feats_in_order]
    adjusted = bh_adjust(family)
    n_mean = len(comparisons)
    adj_distr = dict(zip(feats_in_order, adjusted[n_mean:]))
    for c, p_adj in zip(comparisons, adjusted[:n_mean]):
        c.p_adj_mean = p_adj
        c.p_adj_distr = adj_distr[c.feature]
    return ComparisonRun(comparisons, skipped)


def _fmt_p(p: float) -> str:
    return "< .001" if p < 0.001 else f"{p:.3f}"


def format_table(comparisons: Iterable[GroupComparison]) -> str:
    """Aligned plain-text table, one row per (feature, contrast)."""
    header = ["Feature", "Contrast", "Diff.", "95% CI", "p_adj (mean)", "p_adj (distr.)"]
    body = []
    for c in comparisons:
        body.append([
            c.feature,
            c.contrast,
            f"{c.mean.diff:.3f}",
            f"[{c.mean.ci_low:.3f}, {c.mean.ci_high:.3f}]",
            _fmt_p(c.p_adj_mean),
            _fmt_p(c.p_adj_distr),
        ])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(
            cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))
        ).rstrip())
    return "\n".join(lines) + "\n"


def decile_proportion_rows(comparisons: Iterable[GroupComparison]) -> list[dict]:
    """Plot-ready rows: group x decile weighted proportions per feature."""
    out = []
    seen: set[str] = set()
    for c in comparisons:
        if c.feature in seen:
            continue
        seen.add(c.feature)
        d = c.distribution
        for k, label in enumerate(d.group_labels):
            for j in range(N_BINS):
                out.append({"feature": c.feature, "group": label, "decile": j + 1,
                            "proportion": float(d.group_proportions[k, j])})
    return out


def grouping_from_rows(rows: Iterable[Mapping]) -> dict[tuple[str, str], str]:
    grouping: dict[tuple[str, str], str] = {}
    for r in rows:
        grouping[(str(r["conversation_id"]), str(r["speaker_id"]))] = str(r["group"])
    return grouping
