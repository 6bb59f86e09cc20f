import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedx.data import (
    AugmentPolicy,
    Dataset,
    DatasetError,
    PartitionSpec,
    augment_batch,
    augment_view,
    dirichlet_partition,
    epoch_batches,
    load_dataset,
    make_synthetic_images,
    read_csv,
    read_fxds,
    sample_batches,
    write_csv,
    write_fxds,
)

from conftest import random_dataset


def balanced(count=10_000, classes=10) -> Dataset:
    labels = np.arange(count) % classes
    return Dataset(np.zeros((count, 1, 1, 1), dtype=np.float32), labels, classes)


# -- Dataset ---------------------------------------------------------------------


@pytest.mark.parametrize("kwargs,match", [
    ({"labels": [0, 1, 2]}, "labels for"),
    ({"labels": [0, 1, 5, 0]}, "labels must lie"),
    ({"samples": np.full((4, 1, 2, 2), 1.5)}, "pixel"),
])
def test_dataset_validation(kwargs, match):
    base = {"samples": np.zeros((4, 1, 2, 2)), "labels": [0, 1, 2, 0], "class_count": 3}
    with pytest.raises(DatasetError, match=match):
        Dataset(**(base | kwargs))


def test_synthetic_images_are_valid_and_seeded():
    a = make_synthetic_images(50, seed=4)
    b = make_synthetic_images(50, seed=4)
    assert a.samples.shape == (50, 3, 8, 8)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.labels, b.labels)
    assert 0 <= a.samples.min() and a.samples.max() <= 1
    assert not np.array_equal(a.samples, make_synthetic_images(50, seed=5).samples)


# -- file formats ----------------------------------------------------------------


def test_fxds_round_trip(tmp_path):
    ds = random_dataset()
    write_fxds(ds, tmp_path / "d.fxds")
    back = load_dataset(tmp_path / "d.fxds")
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.class_count == ds.class_count


def test_fxds_layout(tmp_path):
    ds = random_dataset(count=3, shape=(1, 2, 2))
    write_fxds(ds, tmp_path / "d.fxds")
    blob = (tmp_path / "d.fxds").read_bytes()
    assert struct.unpack_from("<4s6I", blob) == (b"FXDS", 1, 3, 1, 2, 2, 5)
    assert len(blob) == 28 + 3 * 4 * 4 + 3
    assert list(blob[-3:]) == ds.labels.tolist()


def test_fxds_truncated_payload_reports_size(tmp_path):
    write_fxds(random_dataset(), tmp_path / "d.fxds")
    blob = (tmp_path / "d.fxds").read_bytes()
    (tmp_path / "t.fxds").write_bytes(blob[:-7])
    with pytest.raises(DatasetError, match="header implies"):
        read_fxds(tmp_path / "t.fxds")


@pytest.mark.parametrize("patch,match", [((0, b"XXDS"), "magic"), ((4, b"\x02"), "version")])
def test_fxds_bad_header(tmp_path, patch, match):
    write_fxds(random_dataset(), tmp_path / "d.fxds")
    blob = bytearray((tmp_path / "d.fxds").read_bytes())
    at, raw = patch
    blob[at:at + len(raw)] = raw
    (tmp_path / "b.fxds").write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match=match):
        read_fxds(tmp_path / "b.fxds")


def test_fxds_label_out_of_range(tmp_path):
    write_fxds(random_dataset(), tmp_path / "d.fxds")
    blob = bytearray((tmp_path / "d.fxds").read_bytes())
    blob[-1] = 9
    (tmp_path / "b.fxds").write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="labels"):
        read_fxds(tmp_path / "b.fxds")


def test_csv_round_trip(tmp_path):
    ds = random_dataset()
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv", shape=(2, 3, 3), class_count=5)
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "label," + ",".join(f"p{i}" for i in range(18))


def test_csv_row_width_mismatch(tmp_path):
    (tmp_path / "d.csv").write_text("label,p0,p1\n0,0.1,0.2\n1,0.3\n")
    with pytest.raises(DatasetError, match=":3"):
        read_csv(tmp_path / "d.csv")


def test_csv_shape_mismatch(tmp_path):
    (tmp_path / "d.csv").write_text("label,p0,p1\n0,0.1,0.2\n")
    with pytest.raises(DatasetError):
        read_csv(tmp_path / "d.csv", shape=(1, 1, 3))


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/data.fxds")


# -- partitioning ----------------------------------------------------------------


def test_single_client_owns_everything():
    ds = balanced(100)
    spec = dirichlet_partition(ds, 1, 0.5, 0)
    assert np.array_equal(spec.client_indices[0], np.arange(100))
    assert (spec.proportions == 1).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 50), st.integers(0, 10_000))
def test_partition_covers_and_is_disjoint(clients, beta, seed):
    ds = balanced(600, 6)
    spec = dirichlet_partition(ds, clients, beta, seed)
    joined = np.concatenate(spec.client_indices)
    assert len(joined) == 600 and np.array_equal(np.sort(joined), np.arange(600))
    np.testing.assert_allclose(spec.proportions.sum(axis=1), 1.0, atol=1e-6)
    assert sum(spec.sizes()) == 600
    assert spec.clients == clients


def test_partition_deterministic():
    ds = balanced(1000)
    a, b = dirichlet_partition(ds, 5, 0.3, 9), dirichlet_partition(ds, 5, 0.3, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a.client_indices, b.client_indices))


def test_partition_min_size_enforced():
    spec = dirichlet_partition(balanced(2000), 10, 0.1, 0, min_size=64)
    assert min(spec.sizes()) >= 64


def test_partition_too_small_dataset():
    with pytest.raises(ValueError):
        dirichlet_partition(balanced(5, 5), 10, 0.5, 0)


def test_partition_rejects_bad_beta():
    with pytest.raises(ValueError):
        dirichlet_partition(balanced(100), 2, 0.0, 0)


def test_largest_remainder_preserves_class_totals():
    ds = Dataset(np.zeros((37, 1, 1, 1)), np.array([0] * 20 + [1] * 17), 2)
    spec = dirichlet_partition(ds, 3, 1.0, 2)
    hist = spec.class_histograms(ds.labels, 2)
    assert hist.sum(axis=0).tolist() == [20, 17]
    exact = spec.proportions.T * np.array([20, 17])
    assert (np.abs(hist - exact) < 1).all()


def test_partition_spec_file_round_trip(tmp_path):
    spec = dirichlet_partition(balanced(500), 4, 0.5, 1)
    spec.save(tmp_path / "p.json")
    back = PartitionSpec.load(tmp_path / "p.json")
    assert all(np.array_equal(x, y) for x, y in zip(spec.client_indices, back.client_indices))
    assert back.proportions.tobytes() == spec.proportions.tobytes()
    assert (back.beta, back.seed) == (spec.beta, spec.seed)


def test_weights_sum_to_one():
    spec = dirichlet_partition(balanced(999), 7, 0.5, 3)
    assert sum(spec.weights()) == pytest.approx(1.0, abs=1e-12)


# -- augmentation ----------------------------------------------------------------


def test_identity_policy_is_identity():
    x = np.random.default_rng(0).random((3, 3, 8, 8), dtype=np.float32)
    out = augment_batch(x, AugmentPolicy.identity(), np.random.default_rng(1))
    assert np.array_equal(out, x)


def test_augment_deterministic():
    x = np.random.default_rng(0).random((3, 8, 8), dtype=np.float32)
    a = augment_view(x, AugmentPolicy(), np.random.default_rng(5))
    b = augment_view(x, AugmentPolicy(), np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_changes_images_on_average():
    x = np.random.default_rng(0).random((3, 8, 8), dtype=np.float32)
    rng = np.random.default_rng(0)
    change = np.mean([np.abs(augment_view(x, AugmentPolicy(), rng) - x).mean() for _ in range(100)])
    assert change > 0


def test_flip_only():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4) / 16
    policy = AugmentPolicy(padding=0, flip_prob=1.0, scale_range=(1, 1), shift_range=(0, 0))
    assert np.array_equal(augment_batch(x, policy, np.random.default_rng(0)), x[..., ::-1])


def test_crop_stays_within_padded_image():
    x = np.random.default_rng(0).random((20, 1, 6, 6), dtype=np.float32)
    policy = AugmentPolicy(padding=2, flip_prob=0.0, scale_range=(1, 1), shift_range=(0, 0))
    out = augment_batch(x, policy, np.random.default_rng(3))
    for src, dst in zip(x, out):
        padded = np.pad(src[0], 2, mode="reflect")
        assert any(np.array_equal(padded[i:i + 6, j:j + 6], dst[0])
                   for i in range(5) for j in range(5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 4), st.floats(0, 1), st.floats(0.1, 3),
       st.floats(-1, 1))
def test_augment_output_in_unit_range(seed, pad, flip, scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.random((4, 2, 5, 5), dtype=np.float32)
    policy = AugmentPolicy(pad, flip, (min(scale, 1.0), max(scale, 1.0)),
                           (min(shift, 0.0), max(shift, 0.0)))
    out = augment_batch(x, policy, rng)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert out.min() >= 0 and out.max() <= 1


# -- batches ---------------------------------------------------------------------


def test_epoch_visits_every_sample_once():
    images = np.random.default_rng(0).random((40, 1, 2, 2), dtype=np.float32)
    batches = list(epoch_batches(images, 8, np.random.default_rng(1), AugmentPolicy()))
    assert len(batches) == 5
    seen = np.concatenate([b.index for b in batches])
    assert np.array_equal(np.sort(seen), np.arange(40))
    for b in batches:
        assert len(b) == 8 and b.x_ref.shape == b.x.shape
        assert len(set(b.ref_index.tolist())) == 8
        assert np.array_equal(b.x_ref, images[b.ref_index])


def test_no_augmentation_gives_aligned_identical_views():
    images = np.random.default_rng(0).random((16, 1, 2, 2), dtype=np.float32)
    for b in epoch_batches(images, 4, np.random.default_rng(1), None):
        assert np.array_equal(b.x, b.x_aug)
        assert np.array_equal(b.x, images[b.index])


def test_raw_first_view_when_not_augmenting_both():
    images = np.random.default_rng(0).random((16, 1, 4, 4), dtype=np.float32)
    for b in epoch_batches(images, 4, np.random.default_rng(1), AugmentPolicy(),
                           augment_both=False):
        assert np.array_equal(b.x, images[b.index])


def test_batch_sequence_deterministic():
    images = np.random.default_rng(0).random((30, 1, 3, 3), dtype=np.float32)
    runs = [list(sample_batches(images, 6, np.random.default_rng(2), AugmentPolicy(), epochs=2))
            for _ in range(2)]
    assert len(runs[0]) == 10
    for a, b in zip(*runs):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.x_aug, b.x_aug)
        assert np.array_equal(a.ref_index, b.ref_index)


def test_client_too_small_for_a_batch():
    with pytest.raises(ValueError):
        next(epoch_batches(np.zeros((3, 1, 1, 1)), 4, np.random.default_rng(0)))
