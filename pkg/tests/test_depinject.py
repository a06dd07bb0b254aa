"""Dependency-injection tests: alignment, side transformer, concatenation."""

import numpy as np
import pytest

from redbert.depinject import (DepEmbeddingTable, InjectedModel,
                               SideTransformer, dep_classify, dep_lookup,
                               dep_tag, inject, load_dep_embeddings,
                               read_dep_embedding_file, save_dep_embeddings,
                               side_transform)
from redbert.encoder import ModelConfig, cls_rows, init_random, make_batch
from redbert.errors import ConfigError, DataError, ShapeError
from redbert.objectives import ClassifierHead, TaggerHead, classify
from redbert.optim import Adam
from redbert.tensor import Tensor, tensor_mean
from redbert.tokenizer import Vocab, encode_pair

from helpers import TINY_VOCAB, check_grads_against_fd

VOCAB = Vocab(list(TINY_VOCAB))
DIM = 8


@pytest.fixture
def emb_path(tmp_path):
    tokens = ["milk", "cart", "run", "total"]
    rng = np.random.default_rng(0)
    matrix = np.round(rng.normal(size=(4, DIM)), 4)
    path = tmp_path / "dep.vec"
    save_dep_embeddings(path, tokens, matrix)
    return path, tokens, matrix


def make_table(emb_path, **kw):
    path, _, _ = emb_path
    return load_dep_embeddings(path, VOCAB, dep_dim=DIM, seed=3, **kw)


# ---- embedding file format -------------------------------------------------

def test_file_round_trip(emb_path):
    path, tokens, matrix = emb_path
    vectors, dim = read_dep_embedding_file(path)
    assert dim == DIM
    assert set(vectors) == set(tokens)
    for tok, row in zip(tokens, matrix):
        np.testing.assert_array_equal(vectors[tok],
                                      row.astype(np.float32))


def test_malformed_header(tmp_path):
    path = tmp_path / "bad.vec"
    path.write_text("onlyonefield\nmilk 1.0\n")
    with pytest.raises(DataError, match="header"):
        read_dep_embedding_file(path)


def test_wrong_value_count(tmp_path):
    path = tmp_path / "bad.vec"
    path.write_text("1 3\nmilk 1.0 2.0\n")
    with pytest.raises(DataError, match="expected 3"):
        read_dep_embedding_file(path)


def test_vector_count_mismatch(tmp_path):
    path = tmp_path / "bad.vec"
    path.write_text("2 2\nmilk 1.0 2.0\n")
    with pytest.raises(DataError, match="promises 2"):
        read_dep_embedding_file(path)


def test_dim_mismatch_rejected(emb_path):
    path, _, _ = emb_path
    with pytest.raises(ConfigError, match="dimension"):
        load_dep_embeddings(path, VOCAB, dep_dim=DIM + 1)


# ---- vocabulary alignment --------------------------------------------------

def test_file_tokens_keep_their_vectors(emb_path):
    path, tokens, _ = emb_path
    table = make_table(emb_path)
    vectors, _ = read_dep_embedding_file(path)
    for tok in tokens:
        row = table.dw.data[VOCAB.id(tok)]
        np.testing.assert_array_equal(row, vectors[tok])
        assert table.from_file[VOCAB.id(tok)]


def test_missing_tokens_initialized(emb_path):
    table = make_table(emb_path)
    oov = VOCAB.id("##ning")  # continuation pieces never appear in the file
    assert not table.from_file[oov]
    row = table.dw.data[oov]
    assert np.abs(row).max() <= 0.04 + 1e-7  # truncated at 2 sigma
    assert np.abs(row).max() > 0


def test_alignment_deterministic(emb_path):
    a = make_table(emb_path)
    b = make_table(emb_path)
    np.testing.assert_array_equal(a.dw.data, b.dw.data)


def test_pad_row_zero_even_if_file_has_pad(tmp_path):
    path = tmp_path / "dep.vec"
    save_dep_embeddings(path, ["[PAD]", "milk"],
                        np.ones((2, DIM)))
    table = load_dep_embeddings(path, VOCAB, dep_dim=DIM)
    assert not table.dw.data[VOCAB.pad_id].any()


# ---- lookup ----------------------------------------------------------------

def test_lookup_shape(emb_path):
    table = make_table(emb_path)
    ids = np.zeros((2, 128), dtype=np.int64)
    assert dep_lookup(ids, table).shape == (2, 128, DIM)


def test_lookup_pad_rows_zero(emb_path):
    table = make_table(emb_path)
    d = dep_lookup(np.array([[VOCAB.pad_id, VOCAB.id("milk")]]), table)
    assert not d.data[0, 0].any()
    assert d.data[0, 1].any()


def test_lookup_out_of_range(emb_path):
    table = make_table(emb_path)
    with pytest.raises(DataError, match="out of range"):
        dep_lookup(np.array([[len(VOCAB)]]), table)


def test_pad_row_gets_no_gradient(emb_path):
    table = make_table(emb_path)
    ids = np.array([[VOCAB.pad_id, VOCAB.id("milk"), VOCAB.id("cart")]])
    tensor_mean(dep_lookup(ids, table)).backward()
    grad = table.dw.grad
    assert grad is not None
    assert not grad[VOCAB.pad_id].any()
    assert grad[VOCAB.id("milk")].any()


def test_pad_row_fixed_under_adam(emb_path):
    table = make_table(emb_path)
    before = table.dw.data[VOCAB.pad_id].copy()
    opt = Adam(list(table.params.values()), learning_rate=1e-2)
    ids = np.array([[VOCAB.pad_id, VOCAB.id("milk")]])
    for _ in range(3):
        opt.zero_grad()
        tensor_mean(dep_lookup(ids, table)).backward()
        opt.step()
    np.testing.assert_array_equal(table.dw.data[VOCAB.pad_id], before)
    assert (table.dw.data[VOCAB.id("milk")] !=
            make_table(emb_path).dw.data[VOCAB.id("milk")]).any()


def test_frozen_table_has_no_params(emb_path):
    table = make_table(emb_path, trainable=False)
    assert table.params == {}
    assert not table.dw.requires_grad


# ---- side transformer ------------------------------------------------------

def make_side(**kw):
    base = dict(dep_dim=DIM, max_len=16, num_heads=4, dropout=0.0, seed=5)
    base.update(kw)
    return SideTransformer(**base)


def test_side_output_shape(emb_path):
    table = make_table(emb_path)
    st = make_side()
    ids = np.array([[2, 5, 7, 0]])
    mask = np.array([[1, 1, 1, 0]])
    t = side_transform(dep_lookup(ids, table), st, mask)
    assert t.shape == (1, 4, DIM)


def test_side_head_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        SideTransformer(dep_dim=10, max_len=8, num_heads=4)


def test_side_mask_shape_check(emb_path):
    table = make_table(emb_path)
    st = make_side()
    d = dep_lookup(np.array([[2, 5]]), table)
    with pytest.raises(ShapeError, match="mask"):
        side_transform(d, st, np.ones((1, 3)))


def test_side_feature_dim_check(emb_path):
    st = make_side()
    with pytest.raises(ShapeError, match="feature dim"):
        side_transform(Tensor(np.zeros((1, 2, DIM + 2))), st,
                       np.ones((1, 2)))


def test_side_overlong_sequence(emb_path):
    table = make_table(emb_path)
    st = make_side(max_len=4)
    ids = np.zeros((1, 5), dtype=np.int64)
    with pytest.raises(DataError, match="max_len"):
        side_transform(dep_lookup(ids, table), st, np.ones((1, 5)))


def test_side_pad_extension_invariance(emb_path):
    table = make_table(emb_path)
    st = make_side()
    real = [VOCAB.id("milk"), VOCAB.id("cart"), VOCAB.id("run")]

    def run(pad_to):
        ids = np.array([real + [VOCAB.pad_id] * (pad_to - len(real))])
        mask = np.array([[1] * len(real) + [0] * (pad_to - len(real))])
        return side_transform(dep_lookup(ids, table), st, mask).data

    short, longer = run(5), run(12)
    assert np.abs(short[0, :3] - longer[0, :3]).max() < 1e-5


def test_gradient_reaches_table_through_side(emb_path):
    table = make_table(emb_path)
    st = make_side()
    ids = np.array([[VOCAB.id("milk"), VOCAB.id("cart")]])
    t = side_transform(dep_lookup(ids, table), st, np.ones((1, 2)))
    tensor_mean(t).backward()
    assert table.dw.grad is not None
    assert table.dw.grad[VOCAB.id("milk")].any()
    for name, p in st.params.items():
        assert p.grad is not None, name


def test_side_gradients_match_finite_differences(emb_path):
    table = make_table(emb_path)
    table.dw = Tensor(table.dw.data.astype(np.float64), requires_grad=True)
    st = make_side()
    st.params = {n: Tensor(p.data.astype(np.float64), requires_grad=True)
                 for n, p in st.params.items()}
    ids = np.array([[VOCAB.id("milk"), VOCAB.id("run"), VOCAB.pad_id]])
    mask = np.array([[1, 1, 0]])
    proj = np.random.default_rng(2).normal(size=(1, 3, DIM))

    def loss():
        t = side_transform(dep_lookup(ids, table), st, mask)
        return tensor_mean(t * proj)

    leaves = [table.dw] + list(st.params.values())
    assert check_grads_against_fd(loss, leaves) < 1e-4


# ---- injection -------------------------------------------------------------

def test_inject_dimension_arithmetic():
    t = Tensor(np.zeros((1, 3, 300)))
    h = Tensor(np.ones((1, 3, 64)))
    c = inject(t, h)
    assert c.shape == (1, 3, 364)
    assert 768 + 300 == 1068  # full-size concatenated width


def test_inject_zero_side_occupies_leading_features():
    t = Tensor(np.zeros((1, 3, 300)))
    h = Tensor(np.ones((1, 3, 64)))
    c = inject(t, h)
    assert not c.data[..., :300].any()
    assert (c.data[..., 300:] == 1).all()


def test_inject_length_mismatch():
    with pytest.raises(ShapeError):
        inject(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 4, 4))))


# ---- heads over C ----------------------------------------------------------

def test_dep_classify_zero_head_ln_k():
    import math
    head = ClassifierHead(input_dim=12, num_classes=4, zero_init=True)
    c_cls = Tensor(np.random.default_rng(0).normal(size=(3, 12)))
    loss, probs = dep_classify(c_cls, head, [0, 1, 2])
    assert abs(loss.item() - math.log(4)) < 1e-6


def test_dep_heads_check_width():
    head = ClassifierHead(input_dim=12, num_classes=4)
    with pytest.raises(ShapeError, match="input_dim"):
        dep_classify(Tensor(np.zeros((2, 10))), head)
    thead = TaggerHead(input_dim=12, num_tags=3)
    from redbert.encoder import EncoderOutput
    out = EncoderOutput(h=Tensor(np.zeros((1, 4, 10))),
                        attention_mask=np.ones((1, 4), dtype=np.int64))
    with pytest.raises(ShapeError, match="input_dim"):
        dep_tag(out, thead, np.zeros((1, 4), dtype=np.int64))


def test_zeroed_side_reduces_to_plain_head():
    # C = [0 ; H] means only the trailing block of the wide matrix acts;
    # predictions must match a plain head carrying that sub-matrix.
    rng = np.random.default_rng(7)
    hidden, dep, k = 6, 4, 3
    wide = ClassifierHead(input_dim=dep + hidden, num_classes=k, seed=9)
    h = Tensor(rng.normal(size=(5, hidden)))
    c = inject(Tensor(np.zeros((5, 1, dep))),
               Tensor(h.data[:, None, :]))
    c_cls = Tensor(c.data[:, 0, :])
    _, wide_probs = dep_classify(c_cls, wide, None)

    plain = ClassifierHead(input_dim=hidden, num_classes=k, zero_init=True)
    plain.params["weight"].data[:] = wide.params["weight"].data[dep:]
    plain.params["bias"].data[:] = wide.params["bias"].data
    _, plain_probs = classify(h, plain)
    np.testing.assert_array_equal(wide_probs, plain_probs)


# ---- composite model -------------------------------------------------------

def make_injected(emb_path, num_layers=1):
    cfg = ModelConfig(vocab_size=len(VOCAB), num_layers=num_layers,
                      hidden_size=16, num_heads=4, max_len=16, dropout=0.0,
                      dep_dim=DIM)
    enc = init_random(cfg, seed=1)
    return InjectedModel(enc, make_table(emb_path), make_side())


def test_injected_forward_shape(emb_path):
    model = make_injected(emb_path)
    batch = make_batch([encode_pair("add milk to my cart", None, VOCAB,
                                    max_len=16)])
    out = model.forward(batch)
    assert out.h.shape == (1, 16, 16 + DIM)
    assert model.out_dim == 16 + DIM


def test_injected_vocab_mismatch(emb_path):
    cfg = ModelConfig(vocab_size=len(VOCAB) + 1, num_layers=1,
                      hidden_size=16, num_heads=4, max_len=16, dropout=0.0)
    with pytest.raises(ConfigError, match="vocab"):
        InjectedModel(init_random(cfg, seed=0), make_table(emb_path),
                      make_side())


def test_injected_gradient_reaches_both_branches(emb_path):
    model = make_injected(emb_path)
    batch = make_batch([encode_pair("running shoes", None, VOCAB,
                                    max_len=16)])
    out = model.forward(batch)
    tensor_mean(cls_rows(out)).backward()
    assert model.table.dw.grad is not None
    assert model.encoder.params["embeddings.token"].grad is not None
    assert model.side.params["block.ff.w1.weight"].grad is not None


def test_injected_more_params_than_plain(emb_path):
    from redbert.encoder import count_parameters
    model = make_injected(emb_path)
    plain = count_parameters(model.encoder)
    assert count_parameters(*model.modules()) > plain
