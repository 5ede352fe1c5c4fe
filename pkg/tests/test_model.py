import numpy as np
import pytest

from cpg.engine import Tensor, no_grad
from cpg.engine.gradcheck import gradcheck
from cpg.losses import LossConfig, Targets, total_loss
from cpg.model import CpgModel, ModelConfig, encode_tokens, predict, query_confidence
from cpg.text import Vocab

TINY = dict(vocab_size=20, d_model=16, n_heads=2, n_queries=4, max_tokens=10, image_size=32,
            conv_channels=(6, 8), conv_strides=(4, 2), pos_dim=4, text_layers=1,
            cross_encoder_layers=1, decoder_layers=1)


def tiny(**kw):
    return CpgModel(ModelConfig(**{**TINY, **kw}))


def batch(B=2, M=10, S=32, n_real=(6, 4), seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(2, 20, size=(B, M))
    mask = np.zeros((B, M), bool)
    for b, n in enumerate(n_real[:B]):
        mask[b, :n] = True
    ids[~mask] = 0
    images = rng.integers(0, 256, size=(B, S, S, 3)).astype(np.uint8)
    return ids, mask, images


def test_output_shapes_and_ranges():
    m = CpgModel(ModelConfig())
    ids, mask, imgs = batch(3, 32, 64, (5, 9, 32))
    with no_grad():
        o = m.forward_batch(ids, mask, imgs)
    assert o.object_reps.shape == (3, 8, 32)
    assert o.boxes.shape == (3, 8, 4)
    assert o.alignment_logits.shape == (3, 8, 33)
    assert o.token_features.shape == (3, 32, 32)
    assert np.all((o.boxes.data > 0) & (o.boxes.data < 1))
    assert np.all(np.isfinite(o.alignment_logits.data))


def test_grid_size():
    assert ModelConfig().grid == 8
    assert ModelConfig(**TINY).grid == 4


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(align_tokens="both")
    with pytest.raises(ValueError):
        ModelConfig(image_pos="sum")


@pytest.mark.parametrize("kw", [{}, {"align_tokens": "word"}, {"image_pos": "attention"}])
def test_pad_columns_masked_and_pad_ids_ignored(kw):
    m = tiny(**kw)
    ids, mask, imgs = batch()
    with no_grad():
        a = m.forward_batch(ids, mask, imgs)
        ids2 = ids.copy()
        ids2[~mask] = 7
        b = m.forward_batch(ids2, mask, imgs)
    assert np.all(a.alignment_logits.data[1, :, 4:10] <= -1e8)
    real = np.concatenate([mask, np.ones((2, 1), bool)], axis=1)[:, None, :].repeat(4, 1)
    np.testing.assert_allclose(a.alignment_logits.data[real], b.alignment_logits.data[real], atol=1e-12)
    np.testing.assert_allclose(a.boxes.data, b.boxes.data, atol=1e-12)


@pytest.mark.parametrize("mode", ["text", "cross"])
def test_cross_attention_is_live(mode):
    m = tiny(align_tokens=mode)
    ids, mask, imgs = batch()
    with no_grad():
        a = m.forward_batch(ids, mask, imgs).alignment_logits.data
        b = m.forward_batch(ids, mask, np.zeros_like(imgs)).alignment_logits.data
    assert not np.allclose(a, b)


def test_attention_positions_stay_out_of_values():
    m = tiny(image_pos="attention")
    img = np.full((1, 32, 32, 3), 90, np.uint8)
    with no_grad():
        f = m.encode_image(img).data[0]
        pos = m.memory_pos(10).data[0]
    # on a flat image every cell away from the top/left padding sees the same window
    inner = f.reshape(4, 4, -1)[1:, 1:].reshape(9, -1)
    np.testing.assert_allclose(inner, np.broadcast_to(inner[0], inner.shape), atol=1e-12)
    assert pos.shape == (10 + 16, 16)
    assert np.all(pos[:10] == 0) and len({tuple(r) for r in pos[10:]}) == 16
    assert tiny().memory_pos(10) is None


def test_word_mode_scores_identical_words_identically():
    m = tiny(align_tokens="word")
    ids, mask, imgs = batch()
    ids[0, 1] = ids[0, 4]
    with no_grad():
        z = m.forward_batch(ids, mask, imgs).alignment_logits.data
    np.testing.assert_array_equal(z[0, :, 1], z[0, :, 4])


def test_batch_rows_independent():
    m = tiny()
    ids, mask, imgs = batch()
    with no_grad():
        both = m.forward_batch(ids, mask, imgs)
        one = m.forward(ids[1], mask[1], imgs[1])
    np.testing.assert_allclose(both.object_reps.data[1], one.object_reps.data[0], atol=1e-10)


def test_query_permutation_equivariance():
    m = tiny()
    ids, mask, imgs = batch()
    perm = np.array([2, 0, 3, 1])
    with no_grad():
        a = m.forward_batch(ids, mask, imgs)
        m.query_embed.data = m.query_embed.data[perm].copy()
        b = m.forward_batch(ids, mask, imgs)
    np.testing.assert_allclose(b.object_reps.data, a.object_reps.data[:, perm], atol=1e-10)
    np.testing.assert_allclose(b.boxes.data, a.boxes.data[:, perm], atol=1e-10)
    np.testing.assert_allclose(b.alignment_logits.data, a.alignment_logits.data[:, perm], atol=1e-8)


def test_distinct_queries_give_distinct_reps():
    m = tiny()
    ids, mask, imgs = batch()
    with no_grad():
        r = m.forward_batch(ids, mask, imgs).object_reps.data[0]
    d = np.linalg.norm(r[:, None] - r[None], axis=-1)
    assert d[~np.eye(4, dtype=bool)].min() > 1e-3


def test_seed_determinism():
    ids, mask, imgs = batch()
    with no_grad():
        a = tiny(seed=3).forward_batch(ids, mask, imgs).alignment_logits.data
        b = tiny(seed=3).forward_batch(ids, mask, imgs).alignment_logits.data
        c = tiny(seed=4).forward_batch(ids, mask, imgs).alignment_logits.data
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_conv_locality():
    m = tiny()
    img = np.full((1, 32, 32, 3), 128, np.uint8)
    img2 = img.copy()
    img2[0, 1, 1] = 255
    with no_grad():
        d = np.abs(m.conv_features(img).data - m.conv_features(img2).data).sum(-1)[0]
    # first stage is 4x4 patches, second a 3x3 window: only cells within one of (0, 0) react
    assert d[:2, :2].max() > 0
    d[:2, :2] = 0
    assert d.max() == 0


def test_conv_translation_equivariance():
    m = tiny()
    rng = np.random.default_rng(1)
    img = np.full((1, 32, 32, 3), 100, np.uint8)
    img[0, 8:16, 8:16] = rng.integers(0, 256, (8, 8, 3))
    shifted = np.roll(img, 8, axis=2)    # total stride 8 -> one cell
    with no_grad():
        a = m.conv_features(img).data[0]
        b = m.conv_features(shifted).data[0]
    np.testing.assert_allclose(b[:, 2], a[:, 1], atol=1e-12)


def test_positional_grid_factorizes():
    m = tiny()
    g, p = 4, 4
    pos = m.positional_grid().data.reshape(g, g, 2 * p)
    for r in range(g):
        for c in range(g):
            np.testing.assert_array_equal(pos[r, c, :p], m.row_embed.data[r])
            np.testing.assert_array_equal(pos[r, c, p:], m.col_embed.data[c])
    assert len({tuple(v) for v in pos.reshape(-1, 2 * p)}) == g * g


def test_query_confidence_matches_softmax():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 3, (5, 4, 7))
    e = np.exp(z)
    np.testing.assert_allclose(query_confidence(z), 1 - e[..., -1] / e.sum(-1), atol=1e-14)
    big = np.array([[1000.0, 0.0, 1000.0]])
    np.testing.assert_allclose(query_confidence(big), [0.5])
    assert query_confidence(np.array([0.0, 0.0, 50.0])) < 1e-20


def test_untrained_model_is_mostly_no_object():
    m = CpgModel(ModelConfig())
    ids, mask, imgs = batch(4, 32, 64, (8, 8, 8, 8))
    with no_grad():
        conf = query_confidence(m.forward_batch(ids, mask, imgs).alignment_logits)
    assert (conf > 0.5).mean() < 0.1


def test_encode_tokens_pads_and_truncates():
    v = Vocab(["a", "b"])
    with pytest.warns(UserWarning):
        ids, mask, trunc = encode_tokens([["a"], ["a", "b", "a"]], v, 2)
    assert trunc == [1]
    assert mask.tolist() == [[True, False], [True, True]]
    assert ids[0, 1] == 0


def test_predict_matches_forward(tmp_path):
    m = tiny()
    ids, mask, imgs = batch()
    p = predict(m, ids, mask, imgs, batch_size=1)
    with no_grad():
        o = m.forward_batch(ids, mask, imgs)
    np.testing.assert_allclose(p["object_reps"], o.object_reps.data, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = tiny(seed=5)
    ids, mask, imgs = batch()
    m.save(tmp_path / "m.ckpt", {"note": "x"})
    m2, meta = CpgModel.load(tmp_path / "m.ckpt")
    assert meta["note"] == "x"
    with no_grad():
        a = m.forward_batch(ids, mask, imgs).alignment_logits.data
        b = m2.forward_batch(ids, mask, imgs).alignment_logits.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kw", [{}, {"align_tokens": "word", "image_pos": "attention"}])
def test_end_to_end_gradcheck(kw):
    m = tiny(**kw)
    ids, mask, imgs = batch()
    tg = [Targets([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], [(0, 2), (3, 5)]),
          Targets([[0.5, 0.5, 0.4, 0.4]], [(1, 3)])]
    with no_grad():
        out0 = m.forward_batch(ids, mask, imgs)
    from cpg.losses import match_batch
    assign = match_batch(out0, tg, LossConfig())     # frozen so the loss is smooth

    def f():
        return total_loss(m.forward_batch(ids, mask, imgs), tg, LossConfig(), assign).total

    rng = np.random.default_rng(0)
    params = m.parameters()
    picked = [params[i] for i in rng.choice(len(params), 10, replace=False)]
    assert gradcheck(f, picked, eps=1e-5, max_coords=3) < 1e-4


def test_forward_has_no_side_effects_on_inputs():
    m = tiny()
    ids, mask, imgs = batch()
    before = (ids.copy(), mask.copy(), imgs.copy())
    m.forward_batch(ids, mask, imgs)
    for a, b in zip(before, (ids, mask, imgs)):
        assert np.array_equal(a, b)


def test_tensor_input_not_required():
    assert isinstance(tiny().forward(*[x[0] for x in batch()]).boxes, Tensor)
