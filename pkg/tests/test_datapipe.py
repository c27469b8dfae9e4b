import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipgd import datapipe as dp
from ipgd.costs import AggregateCost, LogisticCost
from ipgd.errors import ConfigError, IngestError
from ipgd.numkit import SeededRng

from conftest import DATA_DIR, needs_mnist, write_cifar, write_idx


def synthetic_mnist(n=40, seed=0):
    r = np.random.default_rng(seed)
    images = r.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    labels = r.choice([1, 5, 7], n).astype(np.uint8)
    return images, labels


def write_mnist_dir(root, images, labels, compress=True, split="train"):
    root.mkdir(parents=True, exist_ok=True)
    img, lab = dp.MNIST_FILES[split]
    suffix = ".gz" if compress else ""
    write_idx(root / (img + suffix), images, 0x803, compress)
    write_idx(root / (lab + suffix), labels, 0x801, compress)


@pytest.mark.parametrize("compress", [True, False])
def test_idx_round_trip(tmp_path, compress):
    images, labels = synthetic_mnist(2)
    write_mnist_dir(tmp_path, images, labels, compress)
    raw = dp.load_mnist(tmp_path)
    assert raw.images.shape == (2, 1, 28, 28)
    assert np.array_equal(raw.images[:, 0], images)
    assert np.array_equal(raw.labels, labels)


def test_idx_bad_magic(tmp_path):
    images, labels = synthetic_mnist(2)
    write_mnist_dir(tmp_path, images, labels)
    blob = write_idx(tmp_path / "x", labels, 0x801)
    with pytest.raises(IngestError, match="offset 0"):
        dp.parse_idx(blob, 0x803)


def test_idx_truncated_reports_offset(tmp_path):
    images, _ = synthetic_mnist(2)
    blob = write_idx(tmp_path / "x", images, 0x803)
    with pytest.raises(IngestError, match=f"offset {len(blob) - 5}"):
        dp.parse_idx(blob[:-5], 0x803)
    with pytest.raises(IngestError):
        dp.parse_idx(blob[:6], 0x803)


def test_idx_count_mismatch(tmp_path):
    images, labels = synthetic_mnist(3)
    write_mnist_dir(tmp_path, images, labels[:2])
    with pytest.raises(IngestError):
        dp.load_mnist(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(IngestError):
        dp.load_mnist(tmp_path)


def test_cifar_round_trip(tmp_path):
    r = np.random.default_rng(1)
    imgs = r.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)
    labs = np.array([0, 1, 2, 9, 1])
    write_cifar(tmp_path / "batch.bin", imgs, labs)
    assert (tmp_path / "batch.bin").stat().st_size == 5 * 3073
    raw = dp.load_cifar10(tmp_path / "batch.bin")
    assert np.array_equal(raw.images, imgs)
    assert np.array_equal(raw.labels, labs)


def test_cifar_partial_record(tmp_path):
    imgs = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    write_cifar(tmp_path / "b.bin", imgs, [0, 1])
    data = (tmp_path / "b.bin").read_bytes()[:-10]
    with pytest.raises(IngestError, match="offset 3073"):
        dp.parse_cifar_batch(data)


def test_cifar_bad_label(tmp_path):
    write_cifar(tmp_path / "b.bin", np.zeros((2, 3, 32, 32), np.uint8), [0, 12])
    with pytest.raises(IngestError, match="offset 3073"):
        dp.parse_cifar_batch((tmp_path / "b.bin").read_bytes())


def test_cifar_split_directory(tmp_path):
    r = np.random.default_rng(2)
    for name in dp.CIFAR_FILES["train"]:
        write_cifar(tmp_path / name, r.integers(0, 256, (4, 3, 32, 32), dtype=np.uint8), r.integers(0, 10, 4))
    assert dp.load_cifar10(tmp_path).n == 20


# ---------------------------------------------------------------- features

def test_intensity_symmetry_examples():
    assert dp.intensity_symmetry(np.zeros((4, 4))) == (0.0, 0.0)
    sym = np.array([[10, 200, 200, 10], [0, 5, 5, 0]])
    assert dp.intensity_symmetry(sym)[1] == 0.0
    inten, s = dp.intensity_symmetry(np.array([[0, 255], [0, 0]]))
    assert inten == 0.25 and s == -0.5


def test_both_axes_symmetry():
    img = np.array([[0, 255], [0, 0]])
    assert dp.intensity_symmetry(img, both_axes=True)[1] == -0.5
    img = np.array([[255, 255], [0, 0]])  # left-right symmetric, not up-down
    assert dp.intensity_symmetry(img)[1] == 0.0
    assert dp.intensity_symmetry(img, both_axes=True)[1] == -0.5


def test_raw_features_match_per_image(rng):
    imgs = rng.integers(0, 256, (6, 3, 5, 5), dtype=np.uint8)
    F = dp.raw_features(dp.RawImageSet(imgs, np.zeros(6)))
    for k in range(6):
        for c in range(3):
            i, s = dp.intensity_symmetry(imgs[k, c])
            assert F[k, 2 * c] == pytest.approx(i, abs=1e-15)
            assert F[k, 2 * c + 1] == pytest.approx(s, abs=1e-15)


def standardized_ok(A):
    Z = A[:, :-1]
    return (
        np.all(np.abs(Z.mean(axis=0)) < 1e-10)
        and np.all(np.abs(Z.std(axis=0) - 1) < 1e-10)
        and np.array_equal(A[:, -1], np.ones(A.shape[0]))
    )


def test_mnist_design_width_and_columns(rng):
    imgs = rng.integers(0, 256, (50, 1, 28, 28), dtype=np.uint8)
    sel = dp.RawImageSet(imgs, rng.choice([-1, 1], 50))
    D = dp.build_design_mnist(sel)
    assert D.shape == (50, 6)
    assert standardized_ok(D.A)
    # undo standardization and compare column 4 to a1 * a2
    mean = np.array([m for m, _ in D.column_stats])
    std = np.array([s for _, s in D.column_stats])
    X = D.A[:, :-1] * std + mean
    F = dp.raw_features(sel)
    assert np.allclose(X[:, 3], F[:, 0] * F[:, 1], rtol=1e-10, atol=1e-14)
    assert np.allclose(X[:, 2], F[:, 0] ** 2, rtol=1e-10, atol=1e-14)


def test_cifar_design_width_and_squares(rng):
    imgs = rng.integers(0, 256, (40, 3, 32, 32), dtype=np.uint8)
    D = dp.build_design_cifar(dp.RawImageSet(imgs, rng.choice([-1, 1], 40)))
    assert D.shape == (40, 13)
    assert standardized_ok(D.A)
    mean = np.array([m for m, _ in D.column_stats])
    std = np.array([s for _, s in D.column_stats])
    X = D.A[:, :-1] * std + mean
    assert np.allclose(X[:, 6:], X[:, :6] ** 2, rtol=1e-9, atol=1e-14)


def test_zero_variance_column_named():
    imgs = np.zeros((4, 1, 3, 3), dtype=np.uint8)
    with pytest.raises(ConfigError, match="column 0"):
        dp.build_design_mnist(dp.RawImageSet(imgs, np.ones(4)))


def test_channel_checks(rng):
    one = dp.RawImageSet(rng.integers(0, 256, (4, 1, 3, 3), dtype=np.uint8), np.ones(4))
    with pytest.raises(ConfigError):
        dp.build_design_cifar(one)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 60))
def test_standardize_invariants(seed, n):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, 4)) * r.uniform(1e-3, 1e3, 4) + r.uniform(-1e3, 1e3, 4)
    A, stats = dp.standardize(X)
    assert standardized_ok(A)
    B, _ = dp.standardize(X, stats)
    assert np.allclose(A, B, rtol=0, atol=1e-12)


def test_test_split_uses_train_stats(rng):
    tr = dp.RawImageSet(rng.integers(0, 256, (30, 1, 8, 8), dtype=np.uint8), rng.choice([-1, 1], 30))
    te = dp.RawImageSet(rng.integers(0, 256, (10, 1, 8, 8), dtype=np.uint8), rng.choice([-1, 1], 10))
    D = dp.build_design_mnist(tr)
    T = dp.apply_column_stats(te, D)
    assert T.column_stats == D.column_stats
    mean = np.array([m for m, _ in D.column_stats])
    std = np.array([s for _, s in D.column_stats])
    assert np.allclose(T.A[:, :-1], (dp.mnist_poly(dp.raw_features(te)) - mean) / std)


# ---------------------------------------------------------------- selection and partition

def test_select_binary(tmp_path):
    images, labels = synthetic_mnist(60)
    raw = dp.RawImageSet(images[:, None], labels.astype(np.int64))
    pool = int(np.sum((labels == 1) | (labels == 5)))
    a = dp.select_binary(raw, 1, 5, pool, SeededRng(3))
    b = dp.select_binary(raw, 1, 5, pool, SeededRng(3))
    assert a.n == pool and set(np.unique(a.labels)) <= {-1, 1}
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.sum(a.labels == 1) == np.sum(labels == 1)
    with pytest.raises(ConfigError):
        dp.select_binary(raw, 1, 5, pool + 1, SeededRng(3))


def test_partition_blocks(rng):
    D = dp.DesignMatrix(rng.standard_normal((12, 3)), rng.choice([-1.0, 1.0], 12), [])
    one = dp.partition(D, 1)
    assert len(one) == 1 and np.array_equal(one[0][0], D.A)
    parts = dp.partition(D, 4)
    assert all(p[0].shape == (3, 3) for p in parts)
    assert np.array_equal(np.vstack([p[0] for p in parts]), D.A)
    assert np.array_equal(np.concatenate([p[1] for p in parts]), D.b)
    with pytest.raises(ConfigError):
        dp.partition(D, 5)


def test_partitioned_logistic_matches_whole(rng):
    D = dp.DesignMatrix(rng.standard_normal((40, 6)), rng.choice([-1.0, 1.0], 40), [])
    whole = LogisticCost(D.A, D.b)
    agg = AggregateCost([LogisticCost(A, b) for A, b in dp.partition(D, 10)])
    for _ in range(20):
        x = rng.standard_normal(6)
        assert agg.value(x) == pytest.approx(whole.value(x), rel=1e-10)


def test_cache_round_trip(tmp_path, rng):
    D = dp.DesignMatrix(rng.standard_normal((7, 3)), rng.choice([-1.0, 1.0], 7), [(0.1, 2.0), (0.0, 1.0)])
    side = dp.save_design(D, tmp_path / "c" / "design", seed=4)
    assert side.exists()
    raw = (tmp_path / "c" / "design.bin").read_bytes()
    assert len(raw) == 8 * (7 * 3 + 7)
    assert np.array_equal(np.frombuffer(raw[:24], "<f8"), D.A[0])
    E = dp.load_design(tmp_path / "c" / "design")
    assert np.array_equal(E.A, D.A) and np.array_equal(E.b, D.b)
    (tmp_path / "c" / "design.bin").write_bytes(raw[:-8])
    with pytest.raises(IngestError):
        dp.load_design(tmp_path / "c" / "design")


def test_pipeline_on_synthetic_files(tmp_path):
    images, labels = synthetic_mnist(80, seed=5)
    write_mnist_dir(tmp_path, images, labels)
    write_mnist_dir(tmp_path, images[:20], labels[:20], split="test")
    n = int(np.sum((labels == 1) | (labels == 5)))
    D1 = dp.mnist_design(tmp_path, seed=2, n_target=n)
    D2 = dp.mnist_design(tmp_path, seed=2, n_target=n)
    assert D1.fingerprint() == D2.fingerprint()
    assert D1.shape == (n, 6)
    T = dp.mnist_design(tmp_path, split="test", train=D1)
    assert T.shape[1] == 6


def test_cifar_pipeline_on_synthetic_files(tmp_path):
    r = np.random.default_rng(3)
    for name in dp.CIFAR_FILES["train"]:
        write_cifar(tmp_path / name, r.integers(0, 256, (20, 3, 32, 32), dtype=np.uint8), r.integers(0, 3, 20))
    n = 30
    D1 = dp.cifar_design(tmp_path, seed=1, n_target=n)
    D2 = dp.cifar_design(tmp_path, seed=1, n_target=n)
    assert D1.shape == (n, 13) and D1.fingerprint() == D2.fingerprint()
    assert standardized_ok(D1.A)


@needs_mnist
def test_real_mnist_header():
    raw = dp.load_mnist(DATA_DIR / "mnist")
    assert raw.images.shape == (60_000, 1, 28, 28)
    assert raw.images.max() <= 255
    test = dp.load_mnist(DATA_DIR / "mnist", "test")
    assert test.n == 10_000
