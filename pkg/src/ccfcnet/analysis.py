"""Post-training explanation: prototype-guided FC, counter-condition checks,
mask statistics, diff maps and patient subtyping.

Everything here runs the model in eval mode and never mutates it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import (
    ConfigError,
    DegeneratePrototype,
    DegenerateSample,
    EmptyFilter,
    FilterFail,
    TooFewPatients,
)
from .fc_data import CONTROL, PATIENT, Dataset, SubjectRecord, devectorize_symmetric, n_edges, vectorize_upper
from .model import NORM_EPS, CCFCNet, round_half_up
from .stats import anova_oneway, bonferroni, welch_t_test
from .training import MetricSet, metric_set

EXTREME_FRACTION = 0.01
SELECT_THRESHOLD = 0.5
CHANGE_QUANTILE = 0.90


def _require_prototypes(model: CCFCNet):
    if model.cfg.no_prototype:
        raise ConfigError("model was trained without the prototype classifier; counter-condition FC is undefined")


def _dtype(model):
    return next(model.parameters()).dtype


def _as_batch(model, fcs) -> torch.Tensor:
    if isinstance(fcs, torch.Tensor):
        x = fcs.to(_dtype(model))
    else:
        x = torch.as_tensor(np.array(fcs), dtype=_dtype(model))
    return x[None] if x.dim() == 2 else x


@torch.no_grad()
def encode_subjects(model: CCFCNet, fcs):
    """Eval-mode trace for a stack of FC matrices."""
    model.eval()
    return model(_as_batch(model, fcs))


@torch.no_grad()
def pfc_from_features(model: CCFCNet, z_bar, z_summary_out, target_classes) -> torch.Tensor:
    """Decode ``z_bar + p_c'`` with ``p_c`` rescaled to the norm of each subject's summary."""
    _require_prototypes(model)
    protos = model.prototypes[torch.as_tensor(target_classes, dtype=torch.long)]
    pn = protos.norm(dim=-1, keepdim=True)
    if bool((pn < NORM_EPS).any()):
        raise DegeneratePrototype("prototype norm below 1e-12")
    scaled = protos / pn * z_summary_out.norm(dim=-1, keepdim=True)
    return model.decode(z_bar + scaled)


def generate_pfc(model: CCFCNet, subject, target_class: int) -> np.ndarray:
    """Prototype-guided FC of one subject (record or matrix) for ``target_class``."""
    fc = subject.fc if isinstance(subject, SubjectRecord) else subject
    trace = encode_subjects(model, fc)
    out = pfc_from_features(model, trace.z_bar, trace.z_summary_out, [target_class])
    return out[0].double().cpu().numpy()


@torch.no_grad()
def classify_unmasked(model: CCFCNet, fcs) -> np.ndarray:
    """Class probabilities of FC matrices fed straight into the encoder (no re-masking)."""
    model.eval()
    _, _, probs = model.classify_fc(_as_batch(model, fcs))
    return probs.double().cpu().numpy()


@dataclass
class CounterResult:
    metrics: MetricSet
    subject_ids: list[str]
    own_labels: np.ndarray
    target_labels: np.ndarray
    cc_probs: np.ndarray
    n_total: int


def counter_condition_classify(dataset: Dataset, model: CCFCNet) -> CounterResult:
    """Flip correctly classified subjects to the opposite prototype and re-classify the pFC."""
    _require_prototypes(model)
    trace = encode_subjects(model, dataset.fcs)
    labels = dataset.labels
    pred = trace.prediction.cpu().numpy()
    correct = np.flatnonzero(pred == labels)
    if correct.size == 0:
        raise EmptyFilter("no subject was classified correctly")
    keep = torch.as_tensor(correct)
    target = 1 - labels[correct]
    pfc = pfc_from_features(model, trace.z_bar[keep], trace.z_summary_out[keep], target)
    probs = classify_unmasked(model, pfc)
    metrics = metric_set(probs[:, PATIENT], probs.argmax(axis=1), target)
    ids = [dataset.records[k].subject_id for k in correct]
    return CounterResult(metrics, ids, labels[correct], target, probs, len(dataset))


# --------------------------------------------------------------------------
# masks and degree centrality


@dataclass
class MaskStats:
    mean_mask: dict[int, np.ndarray]
    std_mask: dict[int, np.ndarray]
    degree_centrality: dict[int, np.ndarray]
    dc_pvalues: np.ndarray
    dc_tstats: np.ndarray
    subject_dc: np.ndarray
    labels: np.ndarray
    masks: np.ndarray = field(repr=False)

    @property
    def dc_difference(self) -> np.ndarray:
        return self.degree_centrality[PATIENT] - self.degree_centrality[CONTROL]


def degree_centrality(selected: np.ndarray) -> np.ndarray:
    """Fraction of other ROIs each ROI is connected to, for ``(..., R, R)`` boolean graphs."""
    sel = np.asarray(selected, dtype=bool).copy()
    r = sel.shape[-1]
    idx = np.arange(r)
    sel[..., idx, idx] = False
    return sel.sum(axis=-1) / (r - 1)


def _safe_welch(a, b):
    try:
        return welch_t_test(a, b)
    except DegenerateSample:
        return float("nan"), float("nan")


def mask_statistics(dataset: Dataset, model: CCFCNet, threshold: float = SELECT_THRESHOLD) -> MaskStats:
    masks = encode_subjects(model, dataset.fcs).mask.double().cpu().numpy()
    labels = dataset.labels
    r = dataset.r
    off = ~np.eye(r, dtype=bool)
    dc = degree_centrality((masks >= threshold) & off)
    mean_mask, std_mask, group_dc = {}, {}, {}
    for c in range(len(dataset.class_names)):
        sel = labels == c
        if not sel.any():
            continue
        mean_mask[c] = masks[sel].mean(axis=0)
        std_mask[c] = masks[sel].std(axis=0)
        group_dc[c] = dc[sel].mean(axis=0)
    tstats = np.full(r, np.nan)
    pvals = np.full(r, np.nan)
    if (labels == PATIENT).sum() >= 2 and (labels == CONTROL).sum() >= 2:
        for i in range(r):
            tstats[i], pvals[i] = _safe_welch(dc[labels == PATIENT, i], dc[labels == CONTROL, i])
    return MaskStats(mean_mask, std_mask, group_dc, pvals, tstats, dc, labels, masks)


# --------------------------------------------------------------------------
# diff maps


@dataclass
class CounterConditionReport:
    subject_id: str
    label: int
    own_recon: np.ndarray
    pfc_per_class: dict[int, np.ndarray]
    diff: np.ndarray
    raw_diff: np.ndarray
    excluded: list[tuple[int, int]]
    cc_probs: np.ndarray
    cc_correct: bool
    own_correct: bool

    @property
    def opposite(self) -> int:
        return 1 - self.label


def n_extreme(r: int, fraction: float = EXTREME_FRACTION) -> int:
    return round_half_up(fraction * n_edges(r))


def extreme_edges(diff_upper: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest ``|diff|`` entries (stable: lower index wins ties)."""
    order = np.argsort(-np.abs(diff_upper), kind="stable")
    return np.sort(order[:k])


def apply_extreme_rule(diff: np.ndarray, mode: str = "exclude", fraction: float = EXTREME_FRACTION):
    """Return ``(reported_diff, extreme_pairs)`` for one subject.

    ``exclude`` zeroes the extreme entries, ``keep`` zeroes everything else.
    """
    if mode not in ("exclude", "keep"):
        raise ConfigError(f"extreme mode must be 'exclude' or 'keep', got {mode!r}")
    r = diff.shape[0]
    upper = vectorize_upper(diff)
    pos = extreme_edges(upper, n_extreme(r, fraction))
    out = upper.copy()
    if mode == "exclude":
        out[pos] = 0.0
    else:
        kept = np.zeros_like(out)
        kept[pos] = out[pos]
        out = kept
    iu = np.triu_indices(r, k=1)
    pairs = [(int(iu[0][p]), int(iu[1][p])) for p in pos]
    return devectorize_symmetric(out, r), pairs


@torch.no_grad()
def build_reports(dataset: Dataset, model: CCFCNet, extreme_mode: str = "exclude",
                  fraction: float = EXTREME_FRACTION) -> list[CounterConditionReport]:
    """One report per subject (filtered or not); check ``own_correct``/``cc_correct``."""
    _require_prototypes(model)
    if len(dataset) == 0:
        return []
    trace = encode_subjects(model, dataset.fcs)
    labels = dataset.labels
    pred = trace.prediction.cpu().numpy()
    own = trace.x_hat.double().cpu().numpy()
    z_bar, z_sum = trace.z_bar, trace.z_summary_out
    pfc = {}
    for c in range(model.cfg.n_classes):
        pfc[c] = pfc_from_features(model, z_bar, z_sum, [c] * len(dataset)).double().cpu().numpy()
    opposite = 1 - labels
    opp_pfc = np.stack([pfc[opposite[k]][k] for k in range(len(dataset))])
    cc_probs = classify_unmasked(model, opp_pfc)
    reports = []
    for k, rec in enumerate(dataset.records):
        raw = own[k] - opp_pfc[k]
        diff, excluded = apply_extreme_rule(raw, extreme_mode, fraction)
        reports.append(
            CounterConditionReport(
                subject_id=rec.subject_id,
                label=int(labels[k]),
                own_recon=own[k],
                pfc_per_class={c: pfc[c][k] for c in pfc},
                diff=diff,
                raw_diff=raw,
                excluded=excluded,
                cc_probs=cc_probs[k],
                cc_correct=bool(cc_probs[k].argmax() == opposite[k]),
                own_correct=bool(pred[k] == labels[k]),
            )
        )
    return reports


def diff_map(model: CCFCNet, subject: SubjectRecord, extreme_mode: str = "exclude",
             fraction: float = EXTREME_FRACTION) -> CounterConditionReport:
    """Own-minus-counter-condition FC for a subject passing both classifications."""
    ds = Dataset(records=(subject,), r=subject.fc.shape[0])
    rep = build_reports(ds, model, extreme_mode, fraction)[0]
    if not rep.own_correct:
        raise FilterFail(subject.subject_id, "misclassified on its own FC")
    if not rep.cc_correct:
        raise FilterFail(subject.subject_id, "counter-condition FC not classified as the opposite class")
    return rep


def passing(reports: Sequence[CounterConditionReport]) -> list[CounterConditionReport]:
    return [rep for rep in reports if rep.own_correct and rep.cc_correct]


def group_mean_diff(reports: Sequence[CounterConditionReport], label: int) -> Optional[np.ndarray]:
    """Average reported diff of passing subjects with the given own class."""
    diffs = [rep.diff for rep in passing(reports) if rep.label == label]
    return np.mean(diffs, axis=0) if diffs else None


def group_fc_difference(dataset: Dataset) -> np.ndarray:
    """Observed mean control FC minus mean patient FC."""
    fcs, labels = dataset.fcs, dataset.labels
    return fcs[labels == CONTROL].mean(axis=0) - fcs[labels == PATIENT].mean(axis=0)


def upper_corr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.corrcoef(vectorize_upper(a), vectorize_upper(b))[0, 1])


# --------------------------------------------------------------------------
# subtypes


@dataclass
class SubtypeResult:
    subject_ids: list[str]
    assignments: np.ndarray
    k: int
    roi_anova_pvalues: np.ndarray
    roi_anova_raw: np.ndarray
    score_anova_pvalue: float
    score_anova_f: float
    applicable: bool
    linkage: np.ndarray = field(repr=False)


def changed_edges(diff: np.ndarray, quantile: float = CHANGE_QUANTILE) -> np.ndarray:
    """Boolean graph of connections whose ``|diff|`` exceeds the subject's quantile."""
    upper = np.abs(vectorize_upper(diff))
    thr = np.quantile(upper, quantile)
    return devectorize_symmetric((upper > thr).astype(np.float64), diff.shape[0]) > 0


def _relabel_by_first_seen(labels: np.ndarray) -> np.ndarray:
    mapping = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping) + 1)
    return np.array([mapping[int(lab)] for lab in labels], dtype=np.int64)


def ward_clusters(vectors: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Ward-linkage agglomerative clustering cut at ``k`` clusters, labels in 1..k."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] < 2:
        return np.ones(vectors.shape[0], dtype=np.int64), np.zeros((0, 4))
    z = linkage(vectors, method="ward", metric="euclidean")
    return _relabel_by_first_seen(fcluster(z, t=k, criterion="maxclust")), z


def subtype_cluster(diffs: Sequence[np.ndarray], k: int = 3, scores: Optional[Sequence] = None,
                    subject_ids: Optional[Sequence[str]] = None) -> SubtypeResult:
    """Cluster patient diff maps and test ROI change-centrality and scores across clusters."""
    diffs = [np.asarray(d, dtype=np.float64) for d in diffs]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(diffs) < max(k, 2 if k > 1 else 1):
        raise TooFewPatients(f"{len(diffs)} patient diff maps for k={k}")
    r = diffs[0].shape[0]
    ids = list(subject_ids) if subject_ids is not None else [str(i) for i in range(len(diffs))]
    vectors = np.stack([vectorize_upper(d) for d in diffs])
    assign, z = ward_clusters(vectors, k)
    raw = np.full(r, np.nan)
    score_p = score_f = float("nan")
    applicable = k > 1 and len(np.unique(assign)) > 1
    if applicable:
        dc = degree_centrality(np.stack([changed_edges(d) for d in diffs]))
        clusters = np.unique(assign)
        for i in range(r):
            try:
                _, raw[i] = anova_oneway([dc[assign == c, i] for c in clusters])
            except DegenerateSample:
                pass
        if scores is not None:
            s = np.array([np.nan if v is None else float(v) for v in scores])
            groups = [s[(assign == c) & ~np.isnan(s)] for c in clusters]
            groups = [g for g in groups if g.size]
            try:
                score_f, score_p = anova_oneway(groups)
            except DegenerateSample:
                pass
    return SubtypeResult(ids, assign, k, bonferroni(raw), raw, score_p, score_f, applicable, z)
