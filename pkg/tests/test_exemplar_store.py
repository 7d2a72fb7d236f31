"""Tests for exemplar stores: generation, splits, EXB1 files and class structure."""
import numpy as np
import pytest
from scipy import stats

from src.models.config import SyntheticSpec
from src.models.episode import ExemplarRef
from src.modules.exemplar_store import (
    KIND_RASTER,
    KIND_VECTOR,
    SPLIT_VALIDATION,
    ClassRecord,
    ExemplarStore,
    apply_sample_budget,
    budget_counts,
    class_sampler,
    gen_synthetic_store,
    import_pgm_dir,
    instance_relabel,
    load_store,
    read_pgm,
    restrict_base_classes,
    save_store,
    split_holdout,
    write_pgm,
)
from src.utils.errors import FormatError, SpecError, SplitError
from src.utils.rng import RngStream


def test_gaussian_store_is_deterministic(small_spec, raw_store):
    again = gen_synthetic_store(small_spec)
    assert again.digest() == raw_store.digest()
    assert raw_store.kind == KIND_VECTOR
    assert raw_store.shape == (8,)
    assert raw_store.n_base == 40 and raw_store.n_novel == 0
    other = gen_synthetic_store(small_spec.model_copy(update={"seed": 4}))
    assert other.digest() != raw_store.digest()


def test_distinct_seeds_give_distinct_prototypes():
    # without noise every exemplar is its class prototype
    protos = np.concatenate([
        np.stack([r.exemplars[0] for r in gen_synthetic_store(
            SyntheticSpec(n_classes=3, n_exemplars=1, vector_dim=8, noise=0.0, seed=seed)).classes])
        for seed in range(100)
    ])
    assert protos.shape == (300, 8)
    assert len(np.unique(protos, axis=0)) == 300
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0, rtol=1e-5)


def test_gaussian_classes_cluster_around_prototypes(raw_store):
    """Within-class spread is far below the distance between class means."""
    means = np.stack([r.exemplars.mean(axis=0) for r in raw_store.classes])
    spread = np.mean([r.exemplars.std(axis=0).mean() for r in raw_store.classes])
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(len(means), 1)]
    assert spread < 0.2
    assert np.median(gaps) > 1.0


def test_glyph_store_rasters():
    spec = SyntheticSpec(n_classes=4, n_exemplars=3, kind="procedural-glyph", raster_size=(16, 16), seed=1)
    store = gen_synthetic_store(spec)
    assert store.kind == KIND_RASTER
    assert store.shape == (16, 16)
    ex = store.record(0).exemplars
    assert ex.dtype == np.uint8
    assert ex.max() > 0
    # strokes jitter per exemplar
    assert not np.array_equal(ex[0], ex[1])


def test_generation_rejects_bad_specs():
    with pytest.raises(SpecError):
        gen_synthetic_store(SyntheticSpec(n_classes=1))
    with pytest.raises(SpecError):
        gen_synthetic_store(SyntheticSpec(n_classes=3, n_exemplars=0))
    with pytest.raises(SpecError):
        gen_synthetic_store(SyntheticSpec(n_classes=3, noise=-1.0))


def test_split_holdout(store):
    """8 novel classes, and every base class keeps 6 train and 2 validation exemplars."""
    assert store.n_novel == 8
    assert store.n_base == 32
    assert np.all(store.train_counts() == 6)
    assert np.all(store.validation_counts() == 2)
    for cid in store.novel_class_ids:
        assert store.record(cid).novel
    labels = [store.label_of(c) for c in store.base_class_ids]
    assert labels == list(range(32))
    assert store.class_of_label(5) == store.base_class_ids[5]


def test_split_is_deterministic(raw_store, store):
    again = split_holdout(raw_store, n_novel=8, per_class_split=(6, 2), seed=42)
    assert again.digest() == store.digest()
    other = split_holdout(raw_store, n_novel=8, per_class_split=(6, 2), seed=43)
    assert other.novel_class_ids != store.novel_class_ids


def test_split_errors(raw_store):
    with pytest.raises(SplitError):
        split_holdout(raw_store, n_novel=40)
    with pytest.raises(SplitError):
        split_holdout(raw_store, n_novel=2, per_class_split=(7, 2))
    with pytest.raises(SplitError):
        split_holdout(raw_store, n_novel=2, per_class_split=(0, 2))


def test_store_file_round_trip(store, tmp_path):
    path = save_store(store, tmp_path / "store.exb1")
    loaded = load_store(path)
    assert loaded.digest() == store.digest()
    assert loaded.novel_class_ids == store.novel_class_ids
    ref = ExemplarRef(store.base_class_ids[3], 1)
    np.testing.assert_array_equal(loaded.exemplar(ref), store.exemplar(ref))
    assert not (tmp_path / "store.exb1.tmp").exists()


def test_store_file_errors(store, tmp_path):
    data = store.to_bytes()
    bad_magic = tmp_path / "magic.exb1"
    bad_magic.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError) as err:
        load_store(bad_magic)
    assert err.value.offset == 0

    truncated = tmp_path / "short.exb1"
    truncated.write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_store(truncated)

    trailing = tmp_path / "long.exb1"
    trailing.write_bytes(data + b"\x00")
    with pytest.raises(FormatError):
        load_store(trailing)

    bad_kind = tmp_path / "kind.exb1"
    bad_kind.write_bytes(data[:4] + b"\x07" + data[5:])
    with pytest.raises(FormatError) as err:
        load_store(bad_kind)
    assert err.value.offset == 4


def test_store_rejects_inconsistent_records():
    good = ClassRecord(0, np.zeros((2, 3), np.float32), np.zeros(2, np.uint8))
    with pytest.raises(SpecError):
        ExemplarStore(KIND_VECTOR, (3,), [good, ClassRecord(0, np.zeros((1, 3), np.float32), np.zeros(1, np.uint8))])
    with pytest.raises(SpecError):
        ExemplarStore(KIND_VECTOR, (4,), [good])
    with pytest.raises(SpecError):
        ExemplarStore("audio", (3,), [good])


def test_store_is_read_only(store):
    with pytest.raises(ValueError):
        store.record(store.base_class_ids[0]).exemplars[0, 0] = 1.0


def test_restrict_base_classes(store):
    small = restrict_base_classes(store, 10)
    assert small.n_base == 10
    assert small.n_novel == store.n_novel
    assert small.base_class_ids == store.base_class_ids[:10]
    with pytest.raises(SplitError):
        restrict_base_classes(store, 33)


def test_class_sampler(store):
    uniform = class_sampler(store)
    np.testing.assert_allclose(uniform, 1 / 32)
    skewed = class_sampler(store, 1.0)
    assert skewed.sum() == pytest.approx(1.0)
    assert skewed[0] == pytest.approx(2 * skewed[1])
    assert np.all(np.diff(skewed) < 0)


def test_class_sampler_frequencies(store):
    """1e5 draws from the coefficient-1.0 table match it under a chi-square test."""
    table = class_sampler(store, 1.0)
    ids = np.array(store.base_class_ids)
    draws = RngStream(17, 3).choice(ids, size=100_000, p=table)
    observed = np.array([(draws == c).sum() for c in ids])
    assert observed.sum() == 100_000
    assert stats.chisquare(observed, 100_000 * table).pvalue >= 0.01


def test_instance_relabel(store):
    """Every train exemplar becomes its own class; validation exemplars are dropped."""
    relabelled = instance_relabel(store)
    assert relabelled.n_base == 32 * 6
    assert relabelled.n_novel == 8
    assert all(len(relabelled.record(c)) == 1 for c in relabelled.base_class_ids)
    assert min(relabelled.base_class_ids) > max(store.base_class_ids + store.novel_class_ids)
    assert np.all(relabelled.validation_counts() == 0)


def test_budget_counts_sum_and_caps():
    available = np.full(10, 6)
    for coefficient in (0.0, 0.5, 1.0, 2.0):
        counts = budget_counts(available, 30, coefficient)
        assert counts.sum() == 30
        assert np.all(counts <= available)
        assert np.all(np.diff(counts) <= 0)
    assert budget_counts(available, 30, 0.0).tolist() == [3] * 10
    with pytest.raises(SplitError):
        budget_counts(available, 61, 1.0)


def test_budget_counts_zipf_head():
    counts = budget_counts(np.full(4, 100), 100, 1.0)
    # p = [12, 6, 4, 3] / 25
    assert counts.tolist() == [48, 24, 16, 12]


def test_apply_sample_budget(store):
    budgeted = apply_sample_budget(store, 40, 1.0)
    assert int(budgeted.train_counts().sum()) == 40
    assert budgeted.n_novel == store.n_novel
    assert np.all(budgeted.validation_counts() == 2)


def test_pgm_round_trip(tmp_path):
    img = (np.arange(12 * 10) % 256).astype(np.uint8).reshape(12, 10)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_with_comment_and_maxval(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n15\n" + bytes([0, 15]))
    assert read_pgm(path).tolist() == [[0, 255]]
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 1\n255\n0 1")
    with pytest.raises(FormatError):
        read_pgm(bad)


def test_import_pgm_dir(tmp_path):
    for name in ("beta", "alpha"):
        (tmp_path / name).mkdir()
        for i in range(3):
            write_pgm(tmp_path / name / f"{i}.pgm", np.full((5, 4), i * 10 + len(name), np.uint8))
    store = import_pgm_dir(tmp_path)
    assert store.kind == KIND_RASTER and store.shape == (5, 4)
    assert store.base_class_ids == (0, 1)
    # class ids follow sorted directory names
    assert store.record(0).exemplars[0, 0, 0] == len("alpha")
    split = split_holdout(store, n_novel=0, per_class_split=(2, 1), seed=0)
    assert np.all(split.validation_counts() == 1)
    assert split.record(0).split.tolist().count(SPLIT_VALIDATION) == 1


def test_import_pgm_dir_rejects_mixed_shapes(tmp_path):
    (tmp_path / "a").mkdir()
    write_pgm(tmp_path / "a" / "0.pgm", np.zeros((5, 4), np.uint8))
    write_pgm(tmp_path / "a" / "1.pgm", np.zeros((4, 4), np.uint8))
    with pytest.raises(FormatError):
        import_pgm_dir(tmp_path)
