import numpy as np
import pytest
from PIL import Image

from artda import data as D


@pytest.fixture(scope="module")
def domains():
    return D.generate_synthetic(D.DatasetSpec())


def test_synthetic_deterministic(domains):
    again = D.generate_synthetic(D.DatasetSpec())
    for name in domains:
        assert domains[name].images.tobytes() == again[name].images.tobytes()
        assert np.array_equal(domains[name].labels, again[name].labels)


def test_synthetic_balanced_and_in_range(domains):
    for dom in domains.values():
        counts = np.bincount(dom.labels)
        assert len(counts) == 7 and np.all(counts == len(dom) // 7)
        assert dom.images.min() >= 0 and dom.images.max() <= 1
        assert dom.images.shape[1:] == (3, 32, 32)


def test_domains_differ_in_style(domains):
    a, b = domains["A"].images, domains["B"].images
    # A is dark background with bright glyphs, B the reverse
    assert a.mean() < 0.3 < b.mean()
    c = domains["C"].images
    assert np.abs(c[:, 0] - c[:, 2]).mean() > 0.05  # colored
    d = domains["D"].images
    assert d.std(axis=(1, 2, 3)).mean() > 0.1  # noisy


def test_spec_validation():
    with pytest.raises(D.DataError):
        D.DatasetSpec(samples_per_class=10).validate()
    with pytest.raises(D.DataError):
        D.DatasetSpec(num_classes=1).validate()
    with pytest.raises(D.DataError):
        D.DatasetSpec(sources=("A", "B"), target="B").validate()
    with pytest.raises(D.DataError):
        D.DatasetSpec(sources=()).validate()


def test_prepare_task_tags():
    task = D.prepare_task(D.DatasetSpec())
    assert not task.source_train.has_target
    assert np.all(task.target.domain_tags == D.TARGET)
    assert set(np.unique(task.source_train.domain_tags)) == {0, 1, 2}
    assert task.input_shape == (3, 32, 32) and task.num_classes == 7


def write_tree(root, layout):
    for domain, classes in layout.items():
        for cls, n in classes.items():
            folder = root / domain / cls
            folder.mkdir(parents=True)
            for k in range(n):
                arr = np.full((6, 6, 3), 40 * k + 10, dtype=np.uint8)
                Image.fromarray(arr).save(folder / f"img{k}.png")


def test_load_directory_enumeration(tmp_path):
    write_tree(tmp_path, {"photo": {"dog": 1, "cat": 1}, "sketch": {"cat": 1, "dog": 1}})
    doms = D.load_directory(tmp_path, image_size=8)
    assert sum(len(d) for d in doms.values()) == 4
    assert doms["photo"].class_names == ("cat", "dog")
    assert sorted(doms["photo"].labels.tolist()) == [0, 1]
    assert doms["photo"].images.shape == (2, 3, 8, 8)


def test_load_directory_is_order_insensitive(tmp_path):
    write_tree(tmp_path / "a", {"x": {"c1": 3, "c2": 2}, "y": {"c1": 2, "c2": 2}})
    write_tree(tmp_path / "b", {"y": {"c2": 2, "c1": 2}, "x": {"c2": 2, "c1": 3}})
    one, two = D.load_directory(tmp_path / "a"), D.load_directory(tmp_path / "b")
    for name in one:
        assert one[name].images.tobytes() == two[name].images.tobytes()
        assert np.array_equal(one[name].labels, two[name].labels)


def test_load_directory_errors(tmp_path):
    write_tree(tmp_path, {"only": {"one": 1}})
    with pytest.raises(D.DataError, match="at least 2"):
        D.load_directory(tmp_path)
    bad = tmp_path / "other"
    (bad / "a").mkdir(parents=True)
    (bad / "b").mkdir()
    (bad / "a" / "broken.png").write_bytes(b"not a png")
    (tmp_path / "only" / "two").mkdir()
    with pytest.raises(D.DataError, match="broken.png"):
        D.load_directory(tmp_path)


def test_batcher_sizes_and_partition():
    ds = D.ImageBatch(np.arange(10).reshape(10, 1, 1, 1).astype(float), np.zeros(10, int), np.zeros(10, int))
    sizes = [len(b) for b in D.batcher(ds, 3, seed=0)]
    assert sizes == [3, 3, 3, 1]
    seen = np.concatenate([b.images.ravel() for b in D.batcher(ds, 3, seed=0)])
    assert sorted(seen.tolist()) == list(range(10))
    again = np.concatenate([b.images.ravel() for b in D.batcher(ds, 3, seed=0)])
    assert np.array_equal(seen, again)


def test_paired_batches_cycle_smaller_set():
    src = D.ImageBatch(np.zeros((10, 1, 1, 1)), np.zeros(10, int), np.zeros(10, int))
    tgt = D.ImageBatch(np.arange(4).reshape(4, 1, 1, 1).astype(float), np.arange(4), np.full(4, D.TARGET))
    pairs = list(D.paired_batches(src, tgt, 3, seed=1))
    assert [len(s) for s, _ in pairs] == [3, 3, 3, 1]
    assert all(len(s) == len(t) for s, t in pairs)
    assert all(t.labels is None for _, t in pairs)
    flat = np.concatenate([t.images.ravel() for _, t in pairs])
    assert set(flat[:4].tolist()) == {0, 1, 2, 3}


@pytest.mark.parametrize("kind", D.CORRUPTIONS)
def test_corruption_severity_monotone(kind, domains):
    imgs = np.concatenate([d.images[:25] for d in domains.values()]).astype(np.float64)
    dist = []
    for sev in range(1, 6):
        out = D.corrupt_images(imgs, kind, sev, np.random.default_rng(0))
        assert out.min() >= 0 and out.max() <= 1
        dist.append(np.linalg.norm((out - imgs).reshape(len(imgs), -1), axis=1).mean())
    assert all(b >= a for a, b in zip(dist, dist[1:])), dist


def test_corruption_examples():
    const = np.full((3, 8, 8), 0.4)
    np.testing.assert_allclose(D.corrupt(const, "box-blur", 5, np.random.default_rng(0)), const)
    img = np.random.default_rng(1).uniform(0, 1, (3, 8, 8))
    a = D.corrupt(img, "gaussian-noise", 3, np.random.default_rng(7))
    b = D.corrupt(img, "gaussian-noise", 3, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError, match="valid kinds"):
        D.corrupt(img, "fog", 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        D.corrupt(img, "contrast", 6, np.random.default_rng(0))
