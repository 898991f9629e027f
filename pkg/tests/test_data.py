import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffrec.data import (InteractionMatrix, RawInteraction, dataset_from_records, ingest,
                          inject_random_noise, parse_random_regime, prepare, read_bundle,
                          split_sizes, write_bundle)
from diffrec.errors import ConfigError, DataError


def write(tmp_path, text, name="r.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_split_sizes_nine():
    assert split_sizes(9, (0.7, 0.1, 0.2)) == [6, 1, 2]
    assert split_sizes(10, (0.7, 0.1, 0.2)) == [7, 1, 2]
    with pytest.raises(ConfigError):
        split_sizes(10, (0.5, 0.1, 0.2))


@given(st.integers(0, 10_000))
def test_split_sizes_sum(n):
    s = split_sizes(n, (0.7, 0.1, 0.2))
    assert sum(s) == n
    assert all(abs(k - r * n) < 1 for k, r in zip(s, (0.7, 0.1, 0.2)))


def test_ingest_header_dedup_and_malformed(tmp_path):
    p = write(tmp_path, "user\titem\trating\tts\n1\ta\t5\t10\n1\ta\t3\t20\nbad line\n2\tb\t4\t5\n2\tb\t2\t5\n")
    ds = ingest(p)
    assert ds.duplicates == 2
    assert [ln for ln, _ in ds.malformed] == [4]
    by = {(r.user, r.item): r for r in ds.records}
    assert by[("1", "a")].rating == 3  # later timestamp wins
    assert by[("2", "b")].rating == 2  # equal timestamp, later line wins


def test_ingest_dat_format(tmp_path):
    ds = ingest(write(tmp_path, "1::10::5::100\n2::10::4::101\n", "r.dat"), "dat")
    assert len(ds.records) == 2 and ds.has_timestamps


def test_ingest_bad_header(tmp_path):
    with pytest.raises(DataError):
        ingest(write(tmp_path, "user\titem\n1\t2\t5\t3\n"))


def test_ingest_missing_file(tmp_path):
    with pytest.raises(DataError):
        ingest(tmp_path / "nope.tsv")


def test_unrated_and_positive_filter():
    assert RawInteraction("u", "i", None, 1, 1).positive
    assert RawInteraction("u", "i", 4.0, 1, 1).positive
    assert not RawInteraction("u", "i", 3.5, 1, 1).positive


def _ds(rows):
    return dataset_from_records([RawInteraction(str(u), str(i), float(r), t, k)
                                 for k, (u, i, r, t) in enumerate(rows, 1)])


def test_clean_split_is_global_chronological():
    rows = [(u, i, 5, 100 * u + i) for u in range(1, 4) for i in range(1, 5)]
    rows.append((1, 9, 2, 1))  # dropped, rating < 4
    b = prepare(_ds(rows), "clean")
    assert (b.train.nnz, b.val.nnz, b.test.nnz) == (9, 1, 2)  # 8.4, 1.2, 2.4: tie goes to train
    assert b.train.timestamps.max() <= b.val.timestamps.min() <= b.test.timestamps.min()
    assert "9" not in b.items
    assert b.manifest["split"] == "global-chronological"


def test_regimes_share_clean_vocabulary(small_dataset):
    clean = prepare(small_dataset, "clean")
    nat = prepare(small_dataset, "natural", seed=1)
    assert nat.items[:clean.n_items] == clean.items
    assert nat.users[:clean.n_users] == clean.users
    assert nat.test.pairs() == clean.test.pairs()
    assert nat.train.nnz == clean.train.nnz and nat.val.nnz == clean.val.nnz
    assert nat.train.pairs() != clean.train.pairs()


def test_random_noise_injection(small_bundle):
    b = inject_random_noise(small_bundle, 0.3, seed=2)
    deg0 = small_bundle.train.degree()
    want = np.floor(0.3 * deg0 + 0.5).astype(int)
    np.testing.assert_array_equal(b.train.degree() - deg0, want)
    assert b.manifest["injected"] == want.sum() == len(b.injected)
    assert b.manifest["noise_p"] == 0.3 and b.regime == "random(0.3)"
    seen = small_bundle.train.pairs() | small_bundle.val.pairs() | small_bundle.test.pairs()
    assert not (set(b.injected) & seen)
    assert b.test.pairs() == small_bundle.test.pairs()
    for u, i in b.injected[:20]:
        items, ts = b.train.sequence(u)
        assert ts[list(items).index(i)] == small_bundle.train.sequence(u)[1].max()


def test_random_noise_zero_is_noop(small_bundle):
    assert inject_random_noise(small_bundle, 0.0).train.pairs() == small_bundle.train.pairs()


def test_regime_parsing():
    assert parse_random_regime("random(0.25)") == 0.25
    assert parse_random_regime("clean") is None
    with pytest.raises(ConfigError):
        parse_random_regime("random(x)")
    with pytest.raises(ConfigError):
        prepare(_ds([(1, 1, 5, 1)]), "weird")


def test_missing_timestamps():
    rows = [RawInteraction("1", str(i), 5.0, None, i) for i in range(1, 11)]
    ds = dataset_from_records(rows)
    b = prepare(ds, "clean")
    assert b.manifest["timestamps"] == "line-order"
    assert [b.items[i] for i in b.test.row(0)] == ["9", "10"]  # last lines go to test
    with pytest.raises(ConfigError):
        prepare(ds, "temporal")


def test_bundle_roundtrip_byte_identical(small_dataset, tmp_path):
    b = prepare(small_dataset, "random(0.2)", seed=4)
    write_bundle(b, tmp_path / "a")
    write_bundle(prepare(small_dataset, "random(0.2)", seed=4), tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = read_bundle(tmp_path / "a")
    assert back.train.pairs() == b.train.pairs() and back.injected == b.injected
    assert back.items == b.items and back.regime == b.regime


def test_matrix_rejects_duplicates():
    with pytest.raises(DataError):
        InteractionMatrix.from_arrays(2, 2, [0, 0], [1, 1])


def test_merge_keeps_chronology():
    a = InteractionMatrix.from_arrays(1, 3, [0], [0], None, [5])
    b = InteractionMatrix.from_arrays(1, 3, [0, 0], [1, 2], None, [1, 5])
    m = a.merge(b)
    assert m.sequence(0)[0].tolist() == [1, 0, 2]
