import itertools
import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ruackit import metrics as M
from ruackit.metrics import EvalRecord, UndefinedMetricError

# --------------------------------------------------------------------------
# brute-force oracles written straight from the definitions, pixel by pixel


def _oracle_jaccard(p, g):
    inter = union = 0
    for a, b in zip(p.ravel(), g.ravel()):
        inter += bool(a and b)
        union += bool(a or b)
    return 1.0 if union == 0 else inter / union


def _oracle_boundary(m):
    h, w = m.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx]:
                        out.add((y, x))
    return out


def _oracle_boundary_f(p, g, tol=1):
    bp, bg = _oracle_boundary(p), _oracle_boundary(g)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def near(a, pts):
        return any(max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= tol for b in pts)

    prec = sum(near(a, bg) for a in bp) / len(bp)
    rec = sum(near(b, bp) for b in bg) / len(bg)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def _oracle_pavpu(err, unc, ps, tau):
    h, w = err.shape
    good = total = 0
    for y0 in range(0, h, ps):
        for x0 in range(0, w, ps):
            cells = [(y, x) for y in range(y0, min(y0 + ps, h)) for x in range(x0, min(x0 + ps, w))]
            acc = sum(1 - err[c] for c in cells) / len(cells) >= 0.5
            unc_hi = sum(unc[c] for c in cells) / len(cells) > tau
            good += acc != unc_hi
            total += 1
    return good / total


def _oracle_aurc(err, unc):
    order = sorted(range(len(err)), key=lambda i: (unc[i], i))
    risks = [sum(err[i] for i in order[:k]) / k for k in range(1, len(err) + 1)]
    return sum(risks) / len(risks)


def _oracle_ece(p, g, bins=15):
    buckets = [[] for _ in range(bins)]
    for pi, gi in zip(p, g):
        conf = max(pi, 1 - pi)
        b = min(int((conf - 0.5) * 2 * bins), bins - 1)
        buckets[b].append((conf, float((pi >= 0.5) == bool(gi))))
    total = 0.0
    for bk in buckets:
        if bk:
            total += len(bk) / len(p) * abs(sum(c for _, c in bk) / len(bk) - sum(c for c, _ in bk) / len(bk))
    return total


def _oracle_auroc(unc, err):
    pos = [u for u, e in zip(unc, err) if e]
    neg = [u for u, e in zip(unc, err) if not e]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _midranks(vals):
    ranks = []
    for v in vals:
        below = sum(w < v for w in vals)
        equal = sum(w == v for w in vals)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def _oracle_wilcoxon(a, b, side):
    d = [x - y for x, y in zip(a, b) if x != y]
    r = _midranks([abs(x) for x in d])
    w = sum(ri for ri, x in zip(r, d) if x > 0)
    null = [sum(ri for ri, s in zip(r, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    upper = sum(v >= w - 1e-9 for v in null) / len(null)
    lower = sum(v <= w + 1e-9 for v in null) / len(null)
    p = {"greater": upper, "less": lower, "two-sided": min(1.0, 2 * min(upper, lower))}[side]
    return w, p


def _random_case(rng):
    h, w = rng.integers(1, 5, size=2)
    gt = rng.random((h, w)) < rng.random()
    prob = rng.random((h, w))
    prob[rng.random((h, w)) < 0.2] = 0.5
    unc = np.round(rng.random((h, w)), 1)  # coarse values force ties
    return prob, gt, unc


CASES = [_random_case(np.random.default_rng(s)) for s in range(200)]


# --------------------------------------------------------------------------
# oracle agreement on ≤ 16-pixel inputs


def test_jaccard_and_boundary_f_match_oracle():
    for prob, gt, _ in CASES:
        pred = prob >= 0.5
        j, f, jf = M.jf_score(pred, gt)
        assert abs(j - _oracle_jaccard(pred, gt)) <= 1e-12
        assert abs(f - _oracle_boundary_f(pred, gt)) <= 1e-12
        assert jf == (j + f) / 2


def test_pavpu_matches_oracle():
    for prob, gt, unc in CASES:
        rec = EvalRecord(prob, gt, unc)
        for ps in (1, 2, 3):
            # patch sizes are in {1, 2, 3, 4, 6, 9}; these τ are never an exact patch mean
            taus = (0.04, 0.33, 0.61)
            per_tau, mean = M.pavpu(rec, ps, taus)
            want = [_oracle_pavpu(rec.err, unc, ps, t) for t in taus]
            assert np.allclose(list(per_tau.values()), want, atol=1e-12, rtol=0)
            assert abs(mean - sum(want) / 3) <= 1e-12


def test_aurc_matches_oracle():
    for prob, gt, unc in CASES:
        err = ((prob >= 0.5) != gt).astype(float).ravel()
        assert abs(M.aurc(err, unc.ravel())[0] - _oracle_aurc(list(err), list(unc.ravel()))) <= 1e-12


def test_ece_matches_oracle():
    for prob, gt, _ in CASES:
        for bins in (1, 4, 15):
            assert abs(M.ece(prob, gt, bins) - _oracle_ece(prob.ravel(), gt.ravel(), bins)) <= 1e-12


def test_auroc_matches_oracle():
    checked = 0
    for prob, gt, unc in CASES:
        err = ((prob >= 0.5) != gt).ravel()
        if err.all() or not err.any():
            with pytest.raises(UndefinedMetricError):
                M.auroc_pixel(unc, err)
            continue
        assert abs(M.auroc_pixel(unc, err) - _oracle_auroc(unc.ravel(), err)) <= 1e-12
        checked += 1
    assert checked > 100


def test_pearson_matches_stdlib():
    for prob, _, unc in CASES:
        x, y = prob.ravel(), unc.ravel()
        if x.size < 2 or len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert abs(M.pearson(x, y) - statistics.correlation(list(x), list(y))) <= 1e-12


@pytest.mark.parametrize("side", ["greater", "less", "two-sided"])
def test_wilcoxon_matches_enumeration(side):
    rng = np.random.default_rng(7)
    for _ in range(60):
        n = int(rng.integers(1, 11))
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        if np.all(a == b):
            continue
        w, p = M.wilcoxon_signed_rank(a, b, side)
        w0, p0 = _oracle_wilcoxon(list(a), list(b), side)
        assert abs(w - w0) <= 1e-12 and abs(p - p0) <= 1e-12


# --------------------------------------------------------------------------
# worked examples


def test_jf_examples():
    m = np.zeros((20, 30), bool)
    m[5:15, 5:15] = True
    assert M.jf_score(m, m) == (1.0, 1.0, 1.0)
    other = np.zeros_like(m)
    other[:3, 25:] = True
    assert M.jf_score(m, other) == (0.0, 0.0, 0.0)
    shifted = np.roll(m, 5, axis=1)
    assert M.jaccard(m, shifted) == pytest.approx(1 / 3, abs=1e-15)
    assert M.jf_score(np.zeros((4, 4)), np.zeros((4, 4))) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        M.jf_score(np.zeros((2, 2)), np.zeros((3, 3)))


def test_pavpu_examples():
    rec = EvalRecord(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4)))
    per_tau, mean = M.pavpu(rec)
    assert all(v == 1.0 for v in per_tau.values()) and mean == 1.0
    err = np.array([[1.0, 0], [0, 0]])
    assert M.pavpu_arrays(err, np.array([[0.2, 0], [0, 0]]), 1, (0.1,))[0][0.1] == 1.0
    assert M.pavpu_arrays(err, np.zeros((2, 2)), 1, (0.1,))[0][0.1] == 0.75
    with pytest.raises(ValueError):
        M.pavpu_counts(err, err, 0)


def test_aurc_examples():
    assert M.aurc(np.zeros(5), np.arange(5.0))[0] == 0.0
    assert M.aurc([0, 0, 1], [0.1, 0.2, 0.9])[0] == pytest.approx(1 / 9, abs=1e-15)
    assert M.aurc([1, 0, 0], [0.1, 0.2, 0.9])[0] == pytest.approx(11 / 18, abs=1e-15)
    _, curve = M.aurc([1, 0, 0], [0.1, 0.2, 0.9], coverages=[1 / 3, 2 / 3, 1.0])
    assert np.allclose(curve[:, 1], [1, 0.5, 1 / 3])
    with pytest.raises(ValueError):
        M.aurc([], [])


def test_ece_examples():
    assert M.ece(np.ones(10), np.ones(10)) == 0.0
    gt = np.array([1, 0] * 50)
    assert M.ece(np.full(100, 0.8), gt, bins=1) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        M.ece(np.ones(3), np.ones(3), bins=0)


def test_ece_small_on_calibrated_stream():
    rng = np.random.default_rng(0)
    p = rng.random(100_000)
    conf = np.maximum(p, 1 - p)
    correct = rng.random(p.size) < conf
    gt = np.where(correct, p >= 0.5, p < 0.5)
    assert M.ece(p, gt) < 0.02


def test_auroc_examples():
    assert M.auroc_pixel([0.9, 0.1], [1, 0]) == 1.0
    assert M.auroc_pixel([0.1, 0.9], [1, 0]) == 0.0
    rng = np.random.default_rng(1)
    for frac in (0.05, 0.5, 0.9):
        err = rng.random(100_000) < frac
        assert abs(M.auroc_pixel(rng.random(100_000), err) - 0.5) < 0.01
    with pytest.raises(UndefinedMetricError):
        M.auroc_pixel([0.1, 0.2], [0, 0])


def test_auroc_mask_median_split():
    # low-IoU masks carry the high uncertainty
    assert M.auroc_mask([0.9, 0.8, 0.2, 0.1], [0.1, 0.3, 0.8, 0.9]) == 1.0


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0, 4.5])
    assert M.pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert M.pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert M.pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        M.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        M.pearson([1.0], [2.0])


def test_wilcoxon_examples():
    a = np.array([5.0, 6, 7, 8, 9])
    assert M.wilcoxon_signed_rank(a, a - np.arange(1, 6), "greater") == (15.0, 1 / 32)
    b = np.array([1.0, 2, 3])
    assert M.wilcoxon_signed_rank(b + [0, 0, 1], b, "greater")[1] == 0.5
    d = np.array([1.0, -1, 2, -2])
    assert M.wilcoxon_signed_rank(d, np.zeros(4), "two-sided")[1] == 1.0
    with pytest.raises(UndefinedMetricError):
        M.wilcoxon_signed_rank(b, b)
    with pytest.raises(ValueError):
        M.wilcoxon_signed_rank(b + 1, b, "sideways")


def test_wilcoxon_handles_23_domains():
    rng = np.random.default_rng(2)
    a = rng.normal(size=23)
    w, p = M.wilcoxon_signed_rank(a + 0.5, a, "greater")
    assert w == 276 and p == 2.0 ** -23


def test_channel_alignment_examples():
    rng = np.random.default_rng(3)
    v = rng.normal(size=32)
    r, norm = M.channel_alignment(v, v)
    assert r == pytest.approx(1.0, abs=1e-15) and norm == pytest.approx(np.sqrt((v * v).sum()))
    assert M.channel_alignment(v, -v)[0] == pytest.approx(-1.0, abs=1e-15)
    assert abs(M.channel_alignment(rng.normal(size=1000), rng.normal(size=1000))[0]) < 0.1
    with pytest.raises(ValueError):
        M.channel_alignment([1.0], [1.0])


def test_pooled_shift():
    fa = np.zeros((2, 8, 8))
    fb = np.zeros((2, 8, 8))
    fb[0] = 1.0
    fb[1, :4] = 2.0
    mask = np.zeros((8, 8))
    mask[1:3, 1:3] = 1
    assert np.allclose(M.pooled_shift(fa, fb, [mask], dilate=0), [1.0, 2.0])
    with pytest.raises(ValueError):
        M.pooled_shift(fa, fb, [np.zeros((8, 8))], dilate=0)


# --------------------------------------------------------------------------
# properties


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_ranges(seed):
    prob, gt, unc = _random_case(np.random.default_rng(seed))
    rec = EvalRecord(prob, gt, unc)
    j, f, _ = M.jf_score(rec.pred_mask, gt)
    vals = [j, f, M.pavpu(rec, 2)[1], M.aurc(rec.err, unc)[0], M.ece(prob, gt)]
    if 0 < rec.err.sum() < rec.err.size:
        vals.append(M.auroc_pixel(unc, rec.err))
    assert all(0.0 <= v <= 1.0 for v in vals)


@pytest.mark.parametrize("seed", range(30))
def test_aurc_minimized_by_errors_last(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    err = (rng.random(n) < 0.4).astype(float)
    u = np.sort(rng.random(n))
    best = min(M.aurc(err, np.array(perm))[0] for perm in itertools.permutations(u))
    ordered = np.empty(n)
    ordered[np.argsort(err, kind="stable")] = u  # erroneous pixels get the largest values
    assert M.aurc(err, ordered)[0] == pytest.approx(best, abs=1e-15)


def test_pavpu_zero_uncertainty_is_patch_accuracy():
    for prob, gt, _ in CASES[:50]:
        rec = EvalRecord(prob, gt, np.zeros_like(prob))
        n_ac, n_au, n_ic, n_iu = M.pavpu_counts(rec.err, rec.unc, 2, 0.05)
        assert M.pavpu(rec, 2)[1] == n_ac / (n_ac + n_ic) and n_au == n_iu == 0


def test_record_validation():
    with pytest.raises(ValueError):
        EvalRecord(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
    rec = EvalRecord(np.array([[0.5, 0.49]]), np.array([[1, 1]]), np.zeros((1, 2)))
    assert rec.pred_mask.tolist() == [[True, False]] and rec.err.tolist() == [[0.0, 1.0]]


# --------------------------------------------------------------------------
# reports


def test_summarize_and_report_serialization():
    recs = [EvalRecord(p, g, u, domain="fog") for p, g, u in CASES[:10]]
    row = M.summarize(recs, method="ruac")
    assert row["domain"] == "fog" and row["n"] == 10
    rep = M.MetricsReport(rows=[row])
    lines = rep.to_csv().splitlines()
    assert lines[0].split(",") == list(M.MetricsReport.COLUMNS) and len(lines) == 2
    assert json.loads(json.dumps(rep.to_json()))["rows"][0]["method"] == "ruac"


def test_summarize_flags_undefined_as_nan():
    rec = EvalRecord(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3)))
    row = M.summarize([rec])
    assert np.isnan(row["auroc"]) and np.isnan(row["pcc"]) and row["aurc"] == 0.0
