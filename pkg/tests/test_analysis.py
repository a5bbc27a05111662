import itertools

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from ccfcnet import analysis
from ccfcnet.errors import ConfigError, DegeneratePrototype, FilterFail, TooFewPatients
from ccfcnet.fc_data import PATIENT, SyntheticSpec, devectorize_symmetric, generate_synthetic, vectorize_upper
from ccfcnet.model import CCFCNet, ModelConfig


def _ward_brute_force(points, k):
    """Greedy merges minimising the increase in total within-cluster sum of squares."""
    clusters = [[i] for i in range(len(points))]

    def sse(idx):
        p = points[idx]
        return ((p - p.mean(axis=0)) ** 2).sum()

    while len(clusters) > k:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            cost = sse(clusters[a] + clusters[b]) - sse(clusters[a]) - sse(clusters[b])
            if best is None or cost < best[0]:
                best = (cost, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.zeros(len(points), dtype=int)
    for c, members in enumerate(clusters):
        labels[members] = c
    return labels


@pytest.mark.parametrize("k", [2, 3, 4])
def test_ward_matches_brute_force(k):
    pts = np.array([[0.0, 0.0], [0.3, 0.1], [4.0, 4.2], [4.5, 3.9], [9.0, 0.5]])
    labels, _ = analysis.ward_clusters(pts, k)
    assert adjusted_rand_score(_ward_brute_force(pts, k), labels) == 1.0
    assert sorted(set(labels.tolist())) == list(range(1, k + 1))


def test_ward_random_against_brute_force(rng):
    for _ in range(20):
        pts = rng.normal(size=(7, 3))
        labels, _ = analysis.ward_clusters(pts, 3)
        assert adjusted_rand_score(_ward_brute_force(pts, 3), labels) == 1.0


# --------------------------------------------------------------------------
# extreme-connection rule


def test_n_extreme():
    assert analysis.n_extreme(200) == 199
    assert analysis.n_extreme(20) == 2  # 1.9 rounds up
    assert analysis.n_extreme(5) == 0


def test_exclude_and_keep_are_complementary(rng):
    r = 30
    diff = devectorize_symmetric(rng.normal(size=r * (r - 1) // 2), r)
    ex, pairs = analysis.apply_extreme_rule(diff, "exclude")
    kept, pairs2 = analysis.apply_extreme_rule(diff, "keep")
    assert pairs == pairs2 and len(pairs) == analysis.n_extreme(r)
    np.testing.assert_array_equal(ex + kept, diff)
    largest = np.sort(np.abs(vectorize_upper(diff)))[-len(pairs):]
    assert sorted(abs(diff[i, j]) for i, j in pairs) == sorted(largest.tolist())
    with pytest.raises(ConfigError):
        analysis.apply_extreme_rule(diff, "drop")


def test_zero_diff_stays_zero():
    out, _ = analysis.apply_extreme_rule(np.zeros((12, 12)))
    assert not out.any()


# --------------------------------------------------------------------------
# degree centrality and masks


def test_degree_centrality():
    sel = np.ones((1, 4, 4), dtype=bool)
    np.fill_diagonal(sel[0], False)
    np.testing.assert_array_equal(analysis.degree_centrality(sel), [[1, 1, 1, 1]])
    sel = np.zeros((1, 4, 4), dtype=bool)
    sel[0, 0, 1] = sel[0, 1, 0] = True
    np.testing.assert_allclose(analysis.degree_centrality(sel), [[1 / 3, 1 / 3, 0, 0]])


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(r=8, n_per_class=12, planted_edges=((0, 1), (0, 2)), seed=3))


def test_mask_statistics_identity_mask(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8, no_mask=True))
    stats = analysis.mask_statistics(small, m)
    for g in (0, 1):
        np.testing.assert_array_equal(stats.degree_centrality[g], np.ones(8))
        assert not stats.std_mask[g].any()


def test_mask_statistics_null_calibration():
    # both groups drawn from the same distribution: no systematic DC differences
    ds = generate_synthetic(SyntheticSpec(r=10, n_per_class=40, effect_size=0.0, noise_std=0.3, seed=9))
    m = CCFCNet(ModelConfig(r=10, n_heads=2, hidden_enc=8, init_seed=1))
    # sharpen the output layer so masks straddle the selection threshold
    with torch.no_grad():
        m.attention.W2.weight.mul_(50)
    stats = analysis.mask_statistics(ds, m)
    p = stats.dc_pvalues[~np.isnan(stats.dc_pvalues)]
    assert p.size > 0 and np.mean(p < 0.05) <= 0.3


def test_mask_statistics_shapes(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8))
    stats = analysis.mask_statistics(small, m)
    assert stats.masks.shape == (24, 8, 8) and stats.subject_dc.shape == (24, 8)
    assert bool(((stats.masks >= 0) & (stats.masks <= 1)).all())
    np.testing.assert_allclose(stats.dc_difference, stats.degree_centrality[1] - stats.degree_centrality[0])


# --------------------------------------------------------------------------
# pFC and counter-condition


def test_pfc_deterministic_and_symmetric(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8))
    a = analysis.generate_pfc(m, small.records[0], 1)
    b = analysis.generate_pfc(m, small.records[0], 1)
    assert np.array_equal(a, b) and np.array_equal(a, a.T) and not np.diag(a).any()


def test_pfc_prototype_norm_matched(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8)).eval()
    tr = analysis.encode_subjects(m, small.fcs[:1])
    p = m.prototypes[1]
    expect = m.decode(tr.z_bar + p / p.norm() * tr.z_summary_out.norm()).detach()
    got = analysis.pfc_from_features(m, tr.z_bar, tr.z_summary_out, [1])
    assert torch.allclose(got, expect)


def test_degenerate_prototype(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8))
    with torch.no_grad():
        m.prototypes.zero_()
    with pytest.raises(DegeneratePrototype):
        analysis.generate_pfc(m, small.records[0], 0)


def test_no_prototype_refused(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8, no_prototype=True))
    with pytest.raises(ConfigError):
        analysis.counter_condition_classify(small, m)
    with pytest.raises(ConfigError):
        analysis.build_reports(small, m)


def test_reports_consistent(small):
    m = CCFCNet(ModelConfig(r=8, n_heads=2, hidden_enc=8))
    reps = analysis.build_reports(small, m)
    for rep in reps:
        np.testing.assert_allclose(rep.raw_diff, rep.own_recon - rep.pfc_per_class[rep.opposite])
        assert len(rep.excluded) == analysis.n_extreme(8)
    rep = reps[0]
    if rep.own_correct and rep.cc_correct:
        assert analysis.diff_map(m, small.records[0]).subject_id == rep.subject_id
    else:
        with pytest.raises(FilterFail):
            analysis.diff_map(m, small.records[0])


@pytest.mark.slow
def test_trained_model_pfc_behaviour(bench, bench_run):
    # a correctly classified subject decoded with its own prototype stays in its class
    model = bench_run[0].model
    te = bench_run[1][2]
    tr = analysis.encode_subjects(model, te.fcs)
    ok = (tr.prediction.numpy() == te.labels)
    own = analysis.pfc_from_features(model, tr.z_bar[ok], tr.z_summary_out[ok], te.labels[ok])
    probs = analysis.classify_unmasked(model, own)
    assert np.mean(probs.argmax(1) == te.labels[ok]) >= 0.9


# --------------------------------------------------------------------------
# subtypes


def _blobs(rng, n=30, r=10):
    e = r * (r - 1) // 2
    centres = rng.normal(0, 1, size=(3, e))
    truth = np.arange(n) % 3
    diffs = [devectorize_symmetric(centres[t] + rng.normal(0, 0.1, e), r) for t in truth]
    scores = 10 + 5 * truth + rng.normal(0, 1, n)
    return diffs, truth, scores


def test_subtype_recovers_blobs(rng):
    diffs, truth, scores = _blobs(rng)
    res = analysis.subtype_cluster(diffs, 3, scores)
    assert adjusted_rand_score(truth, res.assignments) >= 0.9
    assert res.applicable and res.score_anova_pvalue < 0.05
    assert res.roi_anova_pvalues.shape == (10,)
    assert np.all((res.roi_anova_pvalues >= res.roi_anova_raw) | np.isnan(res.roi_anova_raw))


def test_subtype_single_cluster(rng):
    diffs, _, scores = _blobs(rng, n=6)
    res = analysis.subtype_cluster(diffs, 1, scores)
    assert not res.applicable and np.isnan(res.score_anova_pvalue)
    assert set(res.assignments.tolist()) == {1}


def test_subtype_too_few(rng):
    diffs, _, _ = _blobs(rng, n=2)
    with pytest.raises(TooFewPatients):
        analysis.subtype_cluster(diffs, 3)


def test_changed_edges_quantile(rng):
    r = 12
    d = devectorize_symmetric(rng.normal(size=66), r)
    ch = analysis.changed_edges(d)
    assert np.array_equal(ch, ch.T)
    # linear-interpolated 90th percentile of 66 values sits at rank 58.5, leaving 7 above it
    assert vectorize_upper(ch).sum() == 7


def test_group_fc_difference(small):
    diff = analysis.group_fc_difference(small)
    ctrl = small.fcs[small.labels == 0].mean(0)
    pat = small.fcs[small.labels == PATIENT].mean(0)
    np.testing.assert_allclose(diff, ctrl - pat)
