import numpy as np
import pytest

from agotlab.autodiff import Tape, Tensor, cosine_similarity, finite_difference_check
from agotlab.encoders import (
    PROMPT_PHRASE,
    ImageEncoderParams,
    TextEncoderParams,
    Vocabulary,
    embed_tokens,
    encode_image,
    encode_text_from_embeddings,
    tokenize,
)
from agotlab.errors import DegenerateInputError, DimensionError, EmptyInputError, VocabularyError


@pytest.fixture
def vocab():
    return Vocabulary.from_texts(["a photo of a cat", "a picture of the dog"])


@pytest.fixture
def text_params():
    return TextEncoderParams.init(np.random.default_rng(0), 12, 6, 5)


# ---------------------------------------------------------------- vocabulary and tokenize


def test_vocabulary_reserved_ids_distinct_and_dense(vocab):
    ids = [vocab.pad_id, vocab.unk_id, vocab.class_id]
    assert len(set(ids)) == 3
    assert sorted(vocab.index.values()) == list(range(len(vocab)))


def test_vocabulary_roundtrip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocabulary.load(path)
    assert again.tokens == vocab.tokens
    # line number is the id
    assert path.read_text().splitlines().index("cat") == vocab.id_of("cat")


def test_tokenize_phrase_gives_four_known_ids_and_padding(vocab):
    ids = tokenize(PROMPT_PHRASE, vocab, max_len=8)
    assert len(ids) == 8
    assert all(i not in (vocab.pad_id, vocab.unk_id) for i in ids[:4])
    assert ids[4:] == [vocab.pad_id] * 4


def test_tokenize_empty_caption_raises(vocab):
    with pytest.raises(EmptyInputError):
        tokenize("", vocab)
    with pytest.raises(EmptyInputError):
        tokenize("   ", vocab)


def test_tokenize_caps_at_max_len(vocab):
    caption = " ".join(["cat"] * 16)
    assert len(tokenize(caption, vocab, max_len=8)) == 8


def test_tokenize_unknown_and_case(vocab):
    ids = tokenize("A ZEBRA", vocab, max_len=3)
    assert ids == [vocab.id_of("a"), vocab.unk_id, vocab.pad_id]


def test_tokenize_is_deterministic(vocab):
    assert tokenize("a photo of a dog", vocab) == tokenize("a photo of a dog", vocab)


# ---------------------------------------------------------------- embed_tokens


def test_embed_pad_rows_identical(vocab, text_params):
    out = embed_tokens([vocab.pad_id, vocab.pad_id], text_params).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], text_params.embedding.data[vocab.pad_id])


def test_embed_rows_match_table(text_params):
    ids = np.arange(12)
    np.testing.assert_array_equal(embed_tokens(ids, text_params).data, text_params.embedding.data)
    np.testing.assert_array_equal(embed_tokens([3, 1], text_params).data, embed_tokens([3, 1], text_params).data)


def test_embed_is_constant(text_params):
    assert not embed_tokens([0, 1], text_params).requires_grad


def test_embed_out_of_range(text_params):
    with pytest.raises(VocabularyError):
        embed_tokens([12], text_params)
    with pytest.raises(VocabularyError):
        embed_tokens([-1], text_params)


# ---------------------------------------------------------------- text encoder


def test_text_single_token_is_projected_value(text_params):
    x = np.random.default_rng(1).normal(size=(1, 6))
    out = encode_text_from_embeddings(Tensor(x), text_params).data
    v = text_params.wv.data @ x[0]
    y = text_params.wo.data @ v
    np.testing.assert_allclose(out, y / np.linalg.norm(y), rtol=0, atol=1e-12)


def test_text_output_unit_norm(text_params):
    rng = np.random.default_rng(2)
    for _ in range(50):
        out = encode_text_from_embeddings(Tensor(rng.normal(size=(4, 6))), text_params).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9


def test_text_batched_matches_single(text_params):
    seq = np.random.default_rng(3).normal(size=(3, 4, 6))
    batched = encode_text_from_embeddings(Tensor(seq), text_params).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], encode_text_from_embeddings(Tensor(seq[i]), text_params).data,
                                   rtol=0, atol=1e-14)


def test_text_uniform_embeddings_order_invariant(text_params):
    row = np.random.default_rng(4).normal(size=6)
    seq = np.tile(row, (5, 1))
    a = encode_text_from_embeddings(Tensor(seq), text_params).data
    b = encode_text_from_embeddings(Tensor(seq[::-1].copy()), text_params).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_text_has_no_positional_signal(text_params):
    seq = np.random.default_rng(5).normal(size=(4, 6))
    a = encode_text_from_embeddings(Tensor(seq), text_params).data
    b = encode_text_from_embeddings(Tensor(seq[[1, 0, 2, 3]]), text_params).data
    # self-attention is permutation-equivariant and mean-pooling is symmetric, so
    # without positional embeddings any reordering leaves the output unchanged
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_text_errors(text_params):
    with pytest.raises(EmptyInputError):
        encode_text_from_embeddings(Tensor(np.zeros((0, 6))), text_params)
    with pytest.raises(DimensionError):
        encode_text_from_embeddings(Tensor(np.zeros((3, 5))), text_params)


def test_text_gradient_reaches_sequence_only(text_params):
    seq = Tensor(np.random.default_rng(6).normal(size=(3, 6)), requires_grad=True)
    fixed = Tensor(np.random.default_rng(7).normal(size=5))

    def f(x):
        return cosine_similarity(encode_text_from_embeddings(x, text_params), fixed)

    rep = finite_difference_check(f, seq, tol=1e-5)
    assert rep.passed, rep
    assert all(t.grad is None for t in text_params.tensors().values())


# ---------------------------------------------------------------- image encoder


def test_image_zero_feature_is_degenerate():
    p = ImageEncoderParams.init(np.random.default_rng(0), 4, 8, 3)
    with pytest.raises(DegenerateInputError):
        encode_image(Tensor(np.zeros(4)), p)


def test_image_unit_norm_and_deterministic():
    p = ImageEncoderParams.init(np.random.default_rng(0), 4, 8, 3)
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(100, 4))
    out = encode_image(Tensor(feats), p).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(out, encode_image(Tensor(feats), p).data)
    np.testing.assert_allclose(out[7], encode_image(Tensor(feats[7]), p).data, rtol=0, atol=1e-14)


def test_image_relu_then_linear_by_hand():
    p = ImageEncoderParams.init(np.random.default_rng(3), 4, 8, 3)
    x = np.random.default_rng(4).normal(size=4)
    h = np.maximum(p.w1.data @ x + p.b1.data, 0.0)
    y = p.w2.data @ h + p.b2.data
    np.testing.assert_allclose(encode_image(Tensor(x), p).data, y / np.linalg.norm(y), rtol=0, atol=1e-12)


def test_image_dimension_mismatch():
    p = ImageEncoderParams.init(np.random.default_rng(0), 4, 8, 3)
    with pytest.raises(DimensionError):
        encode_image(Tensor(np.ones(5)), p)


def test_encoder_parameters_are_frozen(text_params):
    p = ImageEncoderParams.init(np.random.default_rng(0), 4, 8, 3)
    for t in list(p.tensors().values()) + list(text_params.tensors().values()):
        assert not t.requires_grad
    x = Tensor(np.random.default_rng(1).normal(size=4))
    with Tape() as tape:
        out = encode_image(x, p)
    assert len(tape.nodes) == 0 and not out.requires_grad
