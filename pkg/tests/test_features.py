import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpg.catalog import GeneratorConfig, generate_catalog
from cpg.features import (
    BrandEntity, ObjectRep, build_cpg_features, distance_matrix, extract_reps, extract_reps_batch,
    feature_columns, pairwise_distances, read_feature_table, stat_block, summarize, write_feature_table,
)
from cpg.model import CpgModel, ModelConfig
from cpg.text import default_vocab


def naive_pooled(q, reps, metric):
    out = []
    for a in q:
        for rep in reps:
            for b in rep:
                if metric == "euclidean":
                    out.append(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))
                else:
                    na, nb = np.sqrt(sum(x * x for x in a)), np.sqrt(sum(y * y for y in b))
                    out.append(1.0 if na == 0 or nb == 0 else 1.0 - sum(x * y for x, y in zip(a, b)) / (na * nb))
    return np.array(out)


def test_self_and_orthogonal_distances():
    v = np.array([[0.3, -1.2, 2.0]])
    assert distance_matrix(v, v, "euclidean")[0, 0] == 0.0
    assert distance_matrix(v, v, "cosine")[0, 0] == pytest.approx(0.0, abs=1e-15)
    e = np.eye(2)
    assert distance_matrix(e[:1], e[1:], "cosine")[0, 0] == 1.0


def test_zero_vector_cosine_is_one():
    assert distance_matrix(np.zeros((1, 3)), np.ones((1, 3)), "cosine")[0, 0] == 1.0


def test_unknown_metric():
    with pytest.raises(ValueError):
        distance_matrix(np.ones((1, 2)), np.ones((1, 2)), "manhattan")


def test_pooled_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=(int(rng.integers(1, 4)), 5))
        reps = [rng.normal(size=(int(rng.integers(1, 4)), 5)) for _ in range(int(rng.integers(1, 4)))]
        for metric in ("euclidean", "cosine"):
            got = pairwise_distances(q, reps, metric)
            assert got.shape == (len(q) * sum(len(r) for r in reps),)
            assert np.max(np.abs(got - naive_pooled(q, reps, metric))) < 1e-12


def test_three_by_two_count():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(3, 4))
    got = pairwise_distances(q, [rng.normal(size=(2, 4))], "euclidean")
    assert got.size == 6


def test_summarize_hand_values():
    assert summarize([5.0]) == (5.0, 5.0, 5.0, 0.0)
    assert summarize([1.0, 3.0]) == (1.0, 3.0, 2.0, 1.0)
    assert summarize([]) == (0.0, 0.0, 0.0, 0.0)
    assert summarize([4.0, 1.0, 2.0, 3.0])[2] == 2.5


def test_summary_permutation_invariance_bit_identical():
    rng = np.random.default_rng(2)
    d = rng.exponential(size=37)
    ref = summarize(d)
    for _ in range(1000):
        assert summarize(rng.permutation(d)) == ref


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=30))
def test_summary_ordering(xs):
    lo, hi, med, var = summarize(xs)
    assert lo <= med <= hi and var >= 0


def random_reps(rng, k, d=6):
    return [rng.normal(size=(int(rng.integers(1, 4)), d)) for _ in range(k)]


def test_stat_block_invariant_to_rep_order():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(3, 6))
    reps = random_reps(rng, 4)
    ref = stat_block(q, reps)
    for _ in range(1000):
        order = rng.permutation(len(reps))
        shuffled = [reps[i][rng.permutation(len(reps[i]))] for i in order]
        assert stat_block(q[rng.permutation(3)], shuffled) == ref


@pytest.mark.parametrize("pooling", ["pooled", "per_rep"])
def test_positive_rescaling(pooling):
    rng = np.random.default_rng(4)
    q = rng.normal(size=(2, 6))
    reps = random_reps(rng, 3)
    a = np.array(stat_block(q, reps, pooling=pooling))
    for c in (0.01, 3.7, 250.0):
        b = np.array(stat_block(q * c, [r * c for r in reps], pooling=pooling))
        assert np.max(np.abs(b[4:8] - a[4:8])) < 1e-12          # cosine block
        np.testing.assert_allclose(b[0:3], c * a[0:3], rtol=1e-12)   # euclidean min/max/median
        np.testing.assert_allclose(b[3], c * c * a[3], rtol=1e-10)   # variance


def test_emptiness_flags_exact():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(2, 6))
    reps = random_reps(rng, 2)
    assert stat_block(q, reps)[-2:] == [0.0, 0.0]
    assert stat_block([], reps) == [0.0] * 8 + [1.0, 0.0]
    assert stat_block(q, []) == [0.0] * 8 + [0.0, 1.0]
    assert stat_block(q, [np.zeros((0, 6))]) == [0.0] * 8 + [0.0, 1.0]
    assert stat_block([], []) == [0.0] * 8 + [1.0, 1.0]


def test_object_rep_rejects_low_confidence():
    with pytest.raises(ValueError):
        ObjectRep(np.zeros(3), 0.5, (0.5, 0.5, 0.1, 0.1), 0)
    ObjectRep(np.zeros(3), 0.500001, (0.5, 0.5, 0.1, 0.1), 0)


def _rep(v, rid):
    return ObjectRep(np.asarray(v, float), 0.9, (0.5, 0.5, 0.1, 0.1), rid)


class _Rec:
    def __init__(self, rid):
        self.record_id = rid


def test_build_cpg_features_excludes_self_and_flags():
    brand = BrandEntity("nova", 1, [_Rec(10), _Rec(11)])
    reps = {10: [_rep([1, 0], 10)], 11: []}
    row = build_cpg_features(reps[10], brand, reps, exclude_record=10)
    assert row.brand_empty and not row.product_empty
    row = build_cpg_features(reps[10], brand, reps)
    assert not row.brand_empty and row.values[0] == 0.0
    assert build_cpg_features([], brand, reps).product_empty
    assert BrandEntity("x", 2).representatives == []
    assert build_cpg_features(reps[10], BrandEntity("x", 2), reps).brand_empty
    assert list(row.as_dict()) == feature_columns()
    assert len(row.values) == 10


@pytest.fixture(scope="module")
def extraction():
    g = GeneratorConfig(n_records=6, seed=1)
    _, recs = generate_catalog(g)
    v = default_vocab()
    m = CpgModel(ModelConfig(vocab_size=len(v), seed=2))
    m.noobj_head.bias.data[:] = -5.0     # make every query confident
    return m, recs, v, g.lexicon.pos_map()


def test_extracted_reps_pass_threshold_and_are_deterministic(extraction):
    m, recs, v, lex = extraction
    a = extract_reps_batch(m, recs, v, lex)
    b = extract_reps_batch(m, recs, v, lex, batch_size=2)
    assert sum(len(x) for x in a.values()) > 0
    for rid in a:
        assert all(r.confidence > 0.5 for r in a[rid])
        assert [r.vector.tolist() for r in a[rid]] == [r.vector.tolist() for r in b[rid]]
    single = extract_reps(m, recs[0], v, lex)
    np.testing.assert_allclose([r.vector for r in single], [r.vector for r in a[recs[0].record_id]], atol=1e-12)


def test_row_recomputed_from_independent_extraction(extraction):
    m, recs, v, lex = extraction
    reps1 = extract_reps_batch(m, recs, v, lex)
    reps2 = {r.record_id: extract_reps(m, r, v, lex) for r in recs}
    brand = BrandEntity("b", 0, recs[1:4])
    a = build_cpg_features(reps1[recs[0].record_id], brand, reps1).values
    b = build_cpg_features(reps2[recs[0].record_id], brand, reps2).values
    assert np.max(np.abs(np.subtract(a, b))) < 1e-12


def test_untrained_model_yields_few_reps(extraction):
    _, recs, v, lex = extraction
    m = CpgModel(ModelConfig(vocab_size=len(v), seed=2))
    n = sum(len(x) for x in extract_reps_batch(m, recs, v, lex).values())
    assert n <= len(recs) * m.cfg.n_queries * 0.1


def test_feature_table_round_trip(tmp_path):
    cols = feature_columns()
    rows = [list(np.arange(10) / 7.0), [0.0] * 10]
    keys = [{"record_id": 1, "brand_id": 2}, {"record_id": 3, "brand_id": 4}]
    write_feature_table(tmp_path / "f.csv", cols, rows, keys)
    assert (tmp_path / "f.csv").read_text().startswith("# columns: cpg_euclidean_min,")
    header, body = read_feature_table(tmp_path / "f.csv")
    assert header == ["record_id", "brand_id"] + cols
    assert [float(x) for x in body[0][2:]] == rows[0]
