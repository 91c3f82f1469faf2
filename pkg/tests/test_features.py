"""Schema, batching, manifest IO, and the zero-row embedding convention."""

from __future__ import annotations

import numpy as np
import pytest

from dpan.features import (
    CHANNEL_IDS,
    AttributeSchema,
    FeatureSpace,
    Sample,
    read_manifest,
    split_sequence,
    write_manifest,
)
from dpan.numerics import Adagrad, backward, no_grad, reduce_mean, reduce_sum


def tiny_space(dim=4, user_dim=3, ctx_dim=3, seed=0):
    schema = AttributeSchema(names=("item", "brand"), dim=dim)
    sizes = {"item": 10, "brand": 6, "user": 5, "channel": 3, "time_bucket": 4}
    return FeatureSpace(schema, sizes, np.random.default_rng(seed),
                        user_dim=user_dim, ctx_dim=ctx_dim)


def make_sample(**overrides):
    base = dict(user=1, channel="SRP", time_bucket=2, trigger=(3, 2),
                target=(4, 1), seq=((5, 3), (6, 2)), label=1)
    base.update(overrides)
    return Sample(**base)


def test_schema_defaults():
    schema = AttributeSchema()
    assert schema.names == ("item", "brand", "category", "price", "title")
    assert schema.k == 5
    assert schema.dim == 16


def test_schema_validation():
    with pytest.raises(ValueError):
        AttributeSchema(names=())
    with pytest.raises(ValueError):
        AttributeSchema(names=("a", "a"))
    with pytest.raises(ValueError):
        AttributeSchema(names=("a",), dim=0)


def test_manifest_round_trip(tmp_path):
    sizes = {"item": 101, "brand": 21, "user": 51, "channel": 3, "time_bucket": 5}
    path = tmp_path / "vocab.tsv"
    write_manifest(path, sizes)
    assert read_manifest(path) == sizes
    text = path.read_text()
    assert "item\t101" in text.splitlines()


def test_manifest_rejects_malformed_lines(tmp_path):
    path = tmp_path / "vocab.tsv"
    path.write_text("item\t10\nbroken line\n")
    with pytest.raises(ValueError, match=":2"):
        read_manifest(path)


def test_split_sequence_transpose_example():
    columns, mask = split_sequence([[3, 5], [4, 6]], t=2, k=2)
    np.testing.assert_array_equal(columns[0], [3, 4])
    np.testing.assert_array_equal(columns[1], [5, 6])
    assert mask.all()


def test_split_sequence_empty_is_fully_masked():
    columns, mask = split_sequence([], t=3, k=2)
    assert not mask.any()
    np.testing.assert_array_equal(columns, np.zeros((2, 3)))


def test_split_sequence_keeps_most_recent_rows():
    columns, mask = split_sequence([[1, 1], [2, 2], [3, 3]], t=2, k=2)
    np.testing.assert_array_equal(columns[0], [2, 3])
    assert mask.all()


def test_encode_shapes_and_padding():
    space = tiny_space()
    batch = space.encode([make_sample(), make_sample(seq=())], t=4)
    assert batch.seq.shape == (2, 4, 2)
    np.testing.assert_array_equal(batch.mask, [[1, 1, 0, 0], [0, 0, 0, 0]])
    np.testing.assert_array_equal(batch.seq[0, 0], [5, 3])
    np.testing.assert_array_equal(batch.seq[0, 2], [0, 0])
    assert batch.channel[0] == CHANNEL_IDS["SRP"]
    assert batch.size == 2
    with pytest.raises(ValueError):
        space.encode([], t=4)


def test_oov_ids_fold_to_zero_and_count():
    space = tiny_space()
    sample = make_sample(trigger=(99, 2), target=(4, 17), user=12, channel="ADS")
    batch = space.encode([sample], t=2)
    assert batch.trigger[0, 0] == 0
    assert batch.target[0, 1] == 0
    assert batch.user[0] == 0
    assert batch.channel[0] == 0
    assert space.oov_count == 3  # trigger item, target brand, user id

    with no_grad():
        vecs = space.embed_item(batch.trigger)
    np.testing.assert_array_equal(vecs[0].data[0], np.zeros(4))
    assert np.any(vecs[1].data[0] != 0)


def test_all_zero_ids_give_zero_vectors():
    space = tiny_space()
    with no_grad():
        vecs = space.embed_item(np.zeros((3, 2), dtype=np.int64))
    for v in vecs:
        np.testing.assert_array_equal(v.data, np.zeros((3, 4)))


def test_same_ids_give_identical_vectors():
    space = tiny_space()
    ids = np.array([[3, 2], [3, 2]])
    with no_grad():
        vecs = space.embed_item(ids)
    for v in vecs:
        np.testing.assert_array_equal(v.data[0], v.data[1])


def test_split_then_lookup_matches_per_row_embedding():
    space = tiny_space()
    sample = make_sample()
    batch = space.encode([sample], t=3)
    with no_grad():
        seq_embs = space.embed_sequence(batch.seq)
        row_embs = space.embed_item(batch.seq[0])  # rows of the one sample
    for k in range(2):
        np.testing.assert_array_equal(seq_embs[k].data[0], row_embs[k].data)


def test_context_and_user_shapes():
    space = tiny_space()
    batch = space.encode([make_sample()], t=2)
    with no_grad():
        e_u = space.embed_user(batch.user)
        e_c = space.embed_context(batch.channel, batch.time_bucket)
    assert e_u.shape == (1, 3)
    assert e_c.shape == (1, 6)


def test_same_channel_shares_rows():
    space = tiny_space()
    batch = space.encode([make_sample(), make_sample(time_bucket=1)], t=2)
    with no_grad():
        e_c = space.embed_context(batch.channel, batch.time_bucket)
    np.testing.assert_array_equal(e_c.data[0, :3], e_c.data[1, :3])
    assert np.any(e_c.data[0, 3:] != e_c.data[1, 3:])


def test_zero_row_never_receives_gradient():
    space = tiny_space()
    ids = np.array([[0, 2], [3, 0]])
    vecs = space.embed_item(ids)
    loss = reduce_mean(reduce_sum(sum(vecs[1:], vecs[0]), axis=1), axis=0)
    backward(loss)
    for name in ("item", "brand"):
        table = space.attr_tables[name].table
        np.testing.assert_array_equal(table.grad[0], np.zeros(4))


def test_training_step_leaves_untouched_rows_bitwise_unchanged():
    space = tiny_space()
    table = space.attr_tables["item"].table
    before = table.data.copy()
    opt = Adagrad({"item": table}, lr=0.01)
    vec = space.embed_item(np.array([[7, 1]]))[0]
    backward(reduce_mean(reduce_sum(vec, axis=1), axis=0))
    opt.step()
    assert np.any(table.data[7] != before[7])
    np.testing.assert_array_equal(table.data[8], before[8])
    np.testing.assert_array_equal(table.data[0], before[0])
