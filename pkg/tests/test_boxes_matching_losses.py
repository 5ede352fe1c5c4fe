import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpg.boxes import (
    box_iou_np, cxcywh_to_xyxy, cxcywh_to_xyxy_t, giou, giou_t, pairwise_giou_np, xyxy_to_cxcywh,
)
from cpg.engine import Tensor, gradcheck, ops
from cpg.losses import (
    LossConfig, Targets, align_from_logits, contrastive_align_loss, positive_matrix, total_loss,
)
from cpg.matching import Assignment, assignment_cost, hungarian, matching_cost, span_probability
from cpg.model import CpgOutput


def random_corner_boxes(rng, n):
    p = rng.uniform(0, 1, (n, 2, 2))
    lo, hi = p.min(axis=1), p.max(axis=1)
    return np.concatenate([lo, hi], axis=1)


# ---------------------------------------------------------------- boxes
def test_full_image_box():
    assert cxcywh_to_xyxy([0.5, 0.5, 1, 1]).tolist() == [0, 0, 1, 1]


def test_conversion_roundtrip():
    rng = np.random.default_rng(0)
    b = np.column_stack([rng.uniform(0, 1, (1000, 2)), rng.uniform(0, 0.5, (1000, 2))])
    assert np.max(np.abs(xyxy_to_cxcywh(cxcywh_to_xyxy(b)) - b)) < 1e-12


def test_degenerate_and_negative_extent():
    assert cxcywh_to_xyxy([0.3, 0.4, 0.0, 0.0]).tolist() == [0.3, 0.4, 0.3, 0.4]
    with pytest.raises(ValueError):
        cxcywh_to_xyxy([0.5, 0.5, -0.1, 0.2])


def test_giou_bounds_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = random_corner_boxes(rng, 100_000), random_corner_boxes(rng, 100_000)
    g = giou(a, b)
    assert np.all((g >= -1) & (g <= 1))
    assert np.array_equal(g, giou(b, a))
    iou = box_iou_np(a, b, fmt="xyxy")
    assert np.all(g <= iou + 1e-15)


def test_giou_identical_is_one():
    b = random_corner_boxes(np.random.default_rng(2), 1000)
    assert np.max(np.abs(giou(b, b) - 1.0)) <= 1e-12


def _mc_giou(a, b, n, rng):
    """Monte-Carlo areas inside the enclosing box."""
    lo = np.minimum(a[:2], b[:2])
    hi = np.maximum(a[2:], b[2:])
    pts = rng.uniform(lo, hi, (n, 2))
    in_a = np.all((pts >= a[:2]) & (pts <= a[2:]), axis=1)
    in_b = np.all((pts >= b[:2]) & (pts <= b[2:]), axis=1)
    enc = np.prod(hi - lo)
    inter, union = enc * np.mean(in_a & in_b), enc * np.mean(in_a | in_b)
    return inter / union - (enc - union) / enc


def test_giou_corner_touching_case():
    a, b = np.array([0.0, 0, 1, 1]), np.array([1.0, 1, 2, 2])
    assert abs(giou(a, b) - (-0.5)) <= 1e-9
    assert abs(_mc_giou(a, b, 1_000_000, np.random.default_rng(3)) - (-0.5)) <= 3e-3


def test_giou_mc_oracle_random_pairs():
    rng = np.random.default_rng(4)
    for a, b in zip(random_corner_boxes(rng, 5), random_corner_boxes(rng, 5)):
        assert abs(giou(a, b) - _mc_giou(a, b, 400_000, rng)) <= 6e-3


def test_giou_tensor_matches_numpy():
    rng = np.random.default_rng(5)
    a, b = random_corner_boxes(rng, 50), random_corner_boxes(rng, 50)
    got = giou_t(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - giou(a, b))) < 1e-7
    assert np.allclose(pairwise_giou_np(a, b).diagonal(), giou(a, b))


def test_giou_tensor_gradcheck():
    rng = np.random.default_rng(6)
    c = np.column_stack([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2))])
    gt = Tensor(cxcywh_to_xyxy(c[::-1].copy() + 0.03))
    p = Tensor(c, requires_grad=True)
    err = gradcheck(lambda: giou_t(cxcywh_to_xyxy_t(p), gt).sum(), [p])
    assert err < 1e-6


# ---------------------------------------------------------------- hungarian
def brute_force(c):
    n, m = c.shape
    best = math.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, sum(c[i, perm[i]] for i in range(n)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, sum(c[perm[j], j] for j in range(m)))
    return best


def test_hungarian_worked_example():
    a = hungarian([[1, 2], [3, 0]])
    assert set(a.pairs) == {(0, 0), (1, 1)}
    assert assignment_cost([[1, 2], [3, 0]], a) == 1


def test_hungarian_dominant_diagonal():
    c = np.ones((5, 5)) * 10 - np.eye(5) * 9
    assert hungarian(c).pairs == [(i, i) for i in range(5)]


def test_hungarian_vs_brute_force_1000():
    rng = np.random.default_rng(7)
    mismatches = 0
    for t in range(1000):
        n, m = rng.integers(1, 7, size=2)
        c = rng.integers(0, 6, (n, m)).astype(float) if t % 3 == 0 else rng.normal(size=(n, m))
        a = hungarian(c)
        assert len(a.pairs) == min(n, m)
        assert len(set(a.queries)) == len(a.pairs) == len(set(a.targets))
        mismatches += abs(assignment_cost(c, a) - brute_force(c)) > 1e-9
    assert mismatches == 0


def test_hungarian_vs_random_permutations_large():
    rng = np.random.default_rng(8)
    c = rng.uniform(size=(30, 30))
    opt = assignment_cost(c, hungarian(c))
    for _ in range(100):
        p = rng.permutation(30)
        assert opt <= c[np.arange(30), p].sum() + 1e-12


def test_hungarian_rejects_nan_and_handles_empty():
    with pytest.raises(ValueError):
        hungarian([[0.0, np.nan]])
    a = hungarian(np.zeros((4, 0)))
    assert a.pairs == [] and a.unmatched == [0, 1, 2, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_hungarian_unmatched_complement(n, m, seed):
    a = hungarian(np.random.default_rng(seed).normal(size=(n, m)))
    assert sorted(a.queries + a.unmatched) == list(range(n))


# ---------------------------------------------------------------- matching cost
def naive_cost(boxes, logits, mask, gt, spans, wa=1.0, w1=5.0, wg=2.0):
    N, K = len(boxes), len(spans)
    out = np.zeros((N, K))
    L = int(mask.sum())
    for i in range(N):
        row = [logits[i, j] for j in range(L)] + [logits[i, -1]]
        mx = max(row)
        den = sum(math.exp(v - mx) for v in row)
        for k in range(K):
            a, b = spans[k]
            p = sum(math.exp(logits[i, j] - mx) / den for j in range(a, b)) / (b - a)
            l1 = sum(abs(boxes[i][c] - gt[k][c]) for c in range(4))
            g = float(giou(cxcywh_to_xyxy(boxes[i]), cxcywh_to_xyxy(gt[k])))
            out[i, k] = -wa * p + w1 * l1 + wg * (1 - g)
    return out


def _instance(rng, N=6, M=10, L=8, K=3):
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (N, 2)), rng.uniform(0.05, 0.3, (N, 2))])
    gt = np.column_stack([rng.uniform(0.3, 0.7, (K, 2)), rng.uniform(0.05, 0.3, (K, 2))])
    logits = rng.normal(size=(N, M + 1)) * 3
    mask = np.arange(M) < L
    starts = sorted(rng.choice(L - 1, K, replace=False))
    spans = [(int(s), int(s) + 1 + int(rng.integers(0, 2))) for s in starts]
    spans = [(a, min(b, L)) for a, b in spans]
    return boxes, logits, mask, gt, spans


def test_matching_cost_matches_naive_loop():
    rng = np.random.default_rng(9)
    for _ in range(30):
        args = _instance(rng)
        assert np.max(np.abs(matching_cost(*args) - naive_cost(*args))) < 1e-10


def test_matching_cost_empty():
    c = matching_cost(np.full((8, 4), 0.5), np.zeros((8, 5)), np.ones(4, bool), np.zeros((0, 4)), [])
    assert c.shape == (8, 0)
    assert hungarian(c).unmatched == list(range(8))


def test_perfect_query_has_minimal_cost():
    rng = np.random.default_rng(10)
    boxes, logits, mask, gt, spans = _instance(rng)
    boxes[2] = gt[1]
    logits[2] = -50.0
    logits[2, spans[1][0]:spans[1][1]] = 50.0
    c = matching_cost(boxes, logits, mask, gt, spans)
    assert np.argmin(c[:, 1]) == 2
    assert np.sum(c[:, 1] == c[:, 1].min()) == 1


def test_span_probability_rows_normalized():
    p = span_probability(np.zeros((2, 5)), np.array([True, True, False, False]), [(0, 2)])
    assert np.allclose(p, 1 / 3)


# ---------------------------------------------------------------- contrastive loss
def oracle_align(S, pos, L):
    """Term-by-term loss over the first L (real) tokens."""
    N = S.shape[0]
    l_o = 0.0
    for i in range(N):
        T = [j for j in range(L) if pos[i, j]]
        if not T:
            continue
        lse = math.log(sum(math.exp(S[i, k]) for k in range(L)))
        l_o += sum(-(S[i, j] - lse) for j in T) / len(T)
    l_t = 0.0
    for j in range(L):
        O = [i for i in range(N) if pos[i, j]]
        if not O:
            continue
        lse = math.log(sum(math.exp(S[k, j]) for k in range(N)))
        l_t += sum(-(S[i, j] - lse) for i in O) / len(O)
    return l_o, l_t


def _random_assignment(rng, N, K):
    qs = rng.choice(N, min(N, K), replace=False)
    return Assignment(sorted((int(q), k) for k, q in enumerate(qs)), [])


def test_align_loss_matches_oracle_100():
    rng = np.random.default_rng(11)
    for _ in range(100):
        N, M, d = 3, 5, 4
        L = int(rng.integers(2, M + 1))
        K = int(rng.integers(1, 4))
        spans = []
        for _ in range(K):
            a = int(rng.integers(0, L))
            spans.append((a, int(rng.integers(a + 1, L + 1))))
        asg = _random_assignment(rng, N, K)
        t, o = rng.normal(size=(M, d)), rng.normal(size=(N, d))
        mask = np.arange(M) < L
        l_o, l_t = contrastive_align_loss(Tensor(t), Tensor(o), asg, spans, 0.07, mask)
        S = o @ t.T / 0.07
        ro, rt = oracle_align(S, positive_matrix(N, M, asg, spans), L)
        assert abs(float(l_o.data) - ro) < 1e-9 and abs(float(l_t.data) - rt) < 1e-9


def test_uniform_logits_give_log_m():
    for M in (2, 5, 17, 32):
        l_o, _ = align_from_logits(Tensor(np.zeros((1, M))), np.eye(1, M))
        assert abs(float(l_o.data) - math.log(M)) <= 1e-12
    l_o, _ = contrastive_align_loss(Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3))),
                                    Assignment([(0, 0)]), [(0, 1)])
    assert abs(float(l_o.data) - math.log(2)) <= 1e-12


def test_transposition_symmetry_exact():
    rng = np.random.default_rng(12)
    for _ in range(50):
        N, M = rng.integers(2, 9, size=2)
        S = rng.normal(size=(N, M)) * 4
        pos = (rng.uniform(size=(N, M)) < 0.3).astype(float)
        l_o, l_t = align_from_logits(Tensor(S), pos)
        l_o2, l_t2 = align_from_logits(Tensor(S.T.copy()), pos.T.copy())
        assert float(l_o.data) == float(l_t2.data)
        assert float(l_t.data) == float(l_o2.data)


def test_saturated_positive_drives_loss_to_zero():
    S = np.full((1, 4), -1.0)
    prev = math.inf
    for big in (1.0, 5.0, 20.0, 60.0):
        S[0, 2] = big
        l_o, _ = align_from_logits(Tensor(S), np.array([[0, 0, 1, 0]], float))
        assert float(l_o.data) < prev
        prev = float(l_o.data)
    assert prev < 1e-20


def test_temperature_monotonicity():
    t = np.array([[1.0, 0.0], [0.0, 1.0], [0.3, 0.3]])
    o = np.array([[0.9, 0.1]])
    vals = [float(contrastive_align_loss(Tensor(t), Tensor(o), Assignment([(0, 0)]), [(0, 1)], tau)[0].data)
            for tau in (1.0, 0.5, 0.2, 0.07)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        contrastive_align_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((1, 2))), Assignment([(0, 0)]), [(0, 1)], 0.0)
    with pytest.raises(ValueError):
        LossConfig(tau=-1)


# ---------------------------------------------------------------- total loss
def _fake_output(rng, B=2, N=4, M=6, d=5, requires_grad=False):
    po = Tensor(rng.normal(size=(B, N, d)) * 0.3, requires_grad=requires_grad)
    pt = Tensor(rng.normal(size=(B, M, d)) * 0.3, requires_grad=requires_grad)
    boxes = Tensor(np.column_stack([rng.uniform(0.3, 0.7, (B * N, 2)),
                                    rng.uniform(0.1, 0.3, (B * N, 2))]).reshape(B, N, 4),
                   requires_grad=requires_grad)
    mask = np.ones((B, M), bool)
    mask[0, 4:] = False
    sim = ops.matmul(po, ops.swapaxes(pt, 1, 2)) * (1 / 0.07)
    noobj = Tensor(rng.normal(size=(B, N, 1)), requires_grad=requires_grad)
    logits = ops.concat([ops.masked_fill(sim, ~mask[:, None, :], -1e9), noobj], axis=-1)
    return CpgOutput(pt, po, boxes, logits, po, pt, mask), (po, pt, boxes, noobj)


def test_zero_annotations_total_zero():
    out, _ = _fake_output(np.random.default_rng(13))
    lb = total_loss(out, [Targets(np.zeros((0, 4)), []), Targets(np.zeros((0, 4)), [])])
    assert lb.as_floats() == {k: 0.0 for k in lb.as_floats()}
    assert all(a.pairs == [] for a in lb.assignments)


def test_total_composition_and_nonnegativity():
    rng = np.random.default_rng(14)
    out, _ = _fake_output(rng)
    tg = [Targets([[0.5, 0.5, 0.2, 0.2]], [(1, 3)]),
          Targets([[0.4, 0.6, 0.1, 0.2], [0.6, 0.4, 0.2, 0.1]], [(0, 1), (2, 5)])]
    cfg = LossConfig()
    f = total_loss(out, tg, cfg).as_floats()
    assert abs(f["align"] - (f["l_o"] + f["l_t"]) / 2) < 1e-12
    want = f["align"] + cfg.w_l1 * f["loc_l1"] + cfg.w_giou * f["loc_giou"] + cfg.w_noobj * f["noobj"]
    assert abs(f["total"] - want) < 1e-12
    assert min(f["l_o"], f["l_t"], f["loc_l1"], f["noobj"]) >= 0
    assert 0 <= f["loc_giou"] <= 2


def test_total_matches_per_image_oracle():
    rng = np.random.default_rng(15)
    out, _ = _fake_output(rng)
    tg = [Targets([[0.5, 0.5, 0.2, 0.2]], [(1, 3)]),
          Targets([[0.4, 0.6, 0.1, 0.2], [0.6, 0.4, 0.2, 0.1]], [(0, 1), (2, 5)])]
    lb = total_loss(out, tg)
    exp_lo = exp_l1 = exp_g = 0.0
    for b, (a, t) in enumerate(zip(lb.assignments, tg)):
        L = int(out.token_mask[b].sum())
        S = out.obj_proj.data[b] @ out.tok_proj.data[b].T / 0.07
        exp_lo += oracle_align(S, positive_matrix(4, 6, a, t.spans), L)[0] / 2
        pb = out.boxes.data[b]
        exp_l1 += np.mean([np.abs(pb[q] - t.boxes[k]).sum() for q, k in a.pairs]) / 2
        exp_g += np.mean([1 - giou(cxcywh_to_xyxy(pb[q]), cxcywh_to_xyxy(t.boxes[k])) for q, k in a.pairs]) / 2
    f = lb.as_floats()
    assert abs(f["l_o"] - exp_lo) < 1e-9
    assert abs(f["loc_l1"] - exp_l1) < 1e-12
    assert abs(f["loc_giou"] - exp_g) < 1e-7


def test_perfect_prediction_total_near_zero():
    N, M = 3, 4
    boxes = np.array([[[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]]])
    po = np.zeros((1, N, 3))
    pt = np.zeros((1, M, 3))
    po[0, 0, 0] = po[0, 1, 1] = 1.0
    pt[0, 0, 0] = pt[0, 2, 1] = 1.0
    pt[0, 1, 2] = pt[0, 3, 2] = -1.0
    po *= 10.0
    S = po[0] @ pt[0].T / 0.07
    logits = np.full((1, N, M + 1), -200.0)
    logits[0, :, :M] = S
    logits[0, 2, M] = 200.0
    mask = np.ones((1, M), bool)
    o = CpgOutput(Tensor(pt), Tensor(po), Tensor(boxes), Tensor(logits), Tensor(po), Tensor(pt), mask)
    tg = [Targets(boxes[0, :2], [(0, 1), (2, 3)])]
    f = total_loss(o, tg).as_floats()
    assert f["loc_l1"] == 0 and abs(f["loc_giou"]) < 1e-9
    assert f["total"] < 1e-6


def test_total_loss_gradcheck():
    rng = np.random.default_rng(16)
    tg = [Targets([[0.5, 0.5, 0.2, 0.2]], [(1, 3)]),
          Targets([[0.4, 0.6, 0.1, 0.2], [0.6, 0.4, 0.2, 0.1]], [(0, 1), (2, 5)])]
    out, leaves = _fake_output(rng, requires_grad=True)
    asg = total_loss(out, tg).assignments

    def f():
        return total_loss(_rebuild(leaves), tg, assignments=asg).total

    assert gradcheck(f, list(leaves), eps=1e-6) < 1e-6


def _rebuild(leaves):
    po, pt, boxes, noobj = leaves
    mask = np.ones((2, 6), bool)
    mask[0, 4:] = False
    sim = ops.matmul(po, ops.swapaxes(pt, 1, 2)) * (1 / 0.07)
    logits = ops.concat([ops.masked_fill(sim, ~mask[:, None, :], -1e9), noobj], axis=-1)
    return CpgOutput(pt, po, boxes, logits, po, pt, mask)
