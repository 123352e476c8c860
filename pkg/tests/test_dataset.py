import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unihash.dataset import (
    Dataset,
    build_eval_protocols,
    generate_synthetic,
    load_features,
    split_seen_unseen,
    write_features,
)
from unihash.errors import ConfigError, FormatError, ProtocolError


def test_zero_noise_samples_sit_on_their_centers():
    ds = generate_synthetic(2, 2, 1, 0.0, seed=3)
    assert len(ds) == 2
    np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0, atol=1e-6)
    assert abs(ds.features[0] @ ds.features[1]) < 1e-6


def test_generation_is_deterministic():
    a = generate_synthetic(5, 8, 10, 0.2, seed=7)
    b = generate_synthetic(5, 8, 10, 0.2, seed=7)
    assert a == b
    assert a.features.tobytes() == b.features.tobytes()
    assert generate_synthetic(5, 8, 10, 0.2, seed=8) != a


def test_generated_counts():
    ds = generate_synthetic(8, 32, 250, 0.3, seed=1)
    assert len(ds) == 2000
    assert (ds.labels.sum(axis=1) == 1).all()
    np.testing.assert_array_equal(ds.labels.sum(axis=0), [250] * 8)
    assert not ds.is_multilabel


@pytest.mark.parametrize("args", [(1, 4, 2, 0.1), (3, 1, 2, 0.1), (3, 4, 0, 0.1), (3, 4, 2, -1.0)])
def test_generation_rejects_bad_ranges(args):
    with pytest.raises(ConfigError):
        generate_synthetic(*args, seed=0)


def test_text_file_two_rows(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("2 3 2 0\n5;1,0;0.5,1.5,-2\n9;0,1;1e-3,0,3\n")
    ds = load_features(p)
    assert len(ds) == 2
    assert list(ds.ids) == [5, 9]
    np.testing.assert_array_equal(ds.features[1], [1e-3, 0, 3])


def test_text_row_width_mismatch_names_line(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("2 3 2 0\n0;1,0;0.5,1.5,-2\n1;0,1;1.0,2.0\n")
    with pytest.raises(FormatError, match="line 3"):
        load_features(p)


@pytest.mark.parametrize("body", ["", "1 2 2 0\n0;1,0;nan,1\n", "1 2 2 0\n0;2,0;1,1\n", "1 2 2 0\n0;0,0;1,1\n"])
def test_bad_files_rejected(tmp_path, body):
    p = tmp_path / "f.txt"
    p.write_text(body)
    with pytest.raises(FormatError):
        load_features(p)


def test_binary_truncation_rejected(tmp_path):
    ds = generate_synthetic(3, 4, 2, 0.1, seed=0)
    p = tmp_path / "d.uhf"
    write_features(ds, p, binary=True)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_features(p)


@pytest.mark.parametrize("binary", [True, False])
def test_write_load_roundtrip(tmp_path, binary):
    ds = generate_synthetic(4, 6, 5, 0.4, seed=2, extra_label_prob=0.3)
    p = tmp_path / "d.bin"
    write_features(ds, p, binary=binary)
    assert load_features(p) == ds


def _multilabel_dataset():
    # class 0..3; sample 4 mixes a seen and an unseen label whatever the split
    labels = np.array([
        [1, 0, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 1, 0, 0],
        [1, 1, 1, 1],
        [0, 0, 1, 0], [0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 1],
    ])
    feats = np.arange(labels.size * 2, dtype=float).reshape(len(labels), -1)[:, :3]
    return Dataset(np.arange(len(labels)), feats, labels, is_multilabel=True)


@pytest.mark.parametrize("C,ratio,n_seen", [(10, 0.8, 8), (20, 0.85, 17), (8, 0.8, 6)])
def test_seen_counts(C, ratio, n_seen):
    ds = generate_synthetic(C, 4, 3, 0.1, seed=0)
    sp = split_seen_unseen(ds, ratio, seed=0)
    assert len(sp.seen_classes) == n_seen
    assert len(sp.unseen_classes) == C - n_seen


def test_mixed_sample_only_in_db_all():
    ds = _multilabel_dataset()
    sp = split_seen_unseen(ds, 0.5, seed=1, query_frac=0.5, val_frac=0.0)
    groups = [sp.train, sp.query_seen, sp.query_unseen, sp.db_seen, sp.db_unseen, sp.val_query]
    assert all(4 not in g for g in groups)
    assert 4 in sp.db_all


@pytest.mark.parametrize("ratio", [0.0, 1.5, 0.99, 0.01])
def test_bad_ratio(ratio):
    ds = generate_synthetic(4, 4, 3, 0.1, seed=0)
    with pytest.raises(ConfigError):
        split_seen_unseen(ds, ratio, seed=0)


def test_full_seen_split_marks_unseen_absent():
    ds = generate_synthetic(4, 4, 10, 0.1, seed=0)
    prot = build_eval_protocols(split_seen_unseen(ds, 1.0, seed=0))
    assert prot["unseen@unseen"] is None and prot["unseen@all"] is None
    assert prot["seen@seen"] is not None and prot["seen@all"] is not None


def test_unseen_database_is_pure():
    ds = generate_synthetic(10, 4, 10, 0.1, seed=0)
    sp = split_seen_unseen(ds, 0.8, seed=0)
    prot = build_eval_protocols(sp)
    _, y = ds.take(prot["unseen@unseen"].database)
    assert set(np.flatnonzero(y.any(axis=0))) <= sp.unseen_classes


def test_empty_query_group_is_protocol_error():
    ds = generate_synthetic(4, 4, 1, 0.1, seed=0)
    sp = split_seen_unseen(ds, 0.75, seed=0, query_frac=0.2)
    with pytest.raises(ProtocolError):
        build_eval_protocols(sp)


@st.composite
def multilabel_datasets(draw):
    C = draw(st.integers(2, 6))
    n = draw(st.integers(4, 30))
    rows = draw(st.lists(st.lists(st.booleans(), min_size=C, max_size=C).filter(any),
                         min_size=n, max_size=n))
    labels = np.array(rows, dtype=np.uint8)
    feats = np.zeros((n, 2))
    return Dataset(np.arange(n) * 3, feats, labels, is_multilabel=True)


@settings(max_examples=60, deadline=None)
@given(multilabel_datasets(), st.floats(0.3, 1.0), st.integers(0, 2**32 - 1))
def test_split_invariants(ds, ratio, seed):
    try:
        sp = split_seen_unseen(ds, ratio, seed)
    except ConfigError:
        return
    C = ds.num_classes
    assert not (sp.seen_classes & sp.unseen_classes)
    assert sp.seen_classes | sp.unseen_classes == set(range(C))

    def labels_of(ids):
        return [set(np.flatnonzero(ds.take([i])[1][0])) for i in ids]

    for ls in labels_of(sp.train + sp.db_seen + sp.query_seen + sp.val_query):
        assert ls <= sp.seen_classes
    for ls in labels_of(sp.db_unseen + sp.query_unseen):
        assert ls <= sp.unseen_classes
    assert set(sp.db_seen) | set(sp.db_unseen) <= set(sp.db_all)
    assert len(sp.db_all) >= len(sp.db_seen)
    assert not set(sp.query_seen) & set(sp.db_all)
    assert not set(sp.query_unseen) & set(sp.db_all)
    assert not set(sp.val_query) & set(sp.train)
    # pure function of its inputs
    again = split_seen_unseen(ds, ratio, seed)
    assert again.train == sp.train and again.db_all == sp.db_all and again.query_seen == sp.query_seen
