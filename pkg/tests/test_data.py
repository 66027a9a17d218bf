import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafvit.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    decode_image,
    decode_ppm,
    denormalize,
    encode_ppm,
    load_image,
    make_batches,
    make_toy_dataset,
    normalize,
    read_labels,
    resize_bilinear,
    scan_dataset,
    val_count,
    write_labels,
)
from leafvit.errors import DecodeError, IngestionError
from leafvit.tensor import Tensor, make_rng


def write_class(root, name, n, pixels=None):
    d = root / name
    d.mkdir(parents=True)
    for i in range(n):
        img = pixels if pixels is not None else np.full((2, 2, 3), i % 256, np.uint8)
        (d / f"img_{i:04d}.ppm").write_bytes(encode_ppm(img))
    return d


# ---------------------------------------------------------------------------
# scanning and splitting
# ---------------------------------------------------------------------------
def test_brown_spot_split(tmp_path):
    write_class(tmp_path, "Brown Spot", 523)
    counts = scan_dataset(tmp_path, seed=0).counts()
    assert counts["Brown Spot"] == {"train": 418, "val": 105}


def test_small_class_split(tmp_path):
    write_class(tmp_path, "c", 5)
    assert scan_dataset(tmp_path).counts()["c"] == {"train": 4, "val": 1}


@settings(max_examples=200)
@given(st.integers(1, 5000))
def test_val_count_rule(n):
    k = val_count(n)
    if n >= 2:
        assert 1 <= k <= n - 1
    if n >= 3:
        assert k == int(np.floor(0.2 * n + 0.5))


def test_split_is_a_partition(tmp_path):
    for name, n in (("a", 7), ("b", 12), ("c", 2)):
        write_class(tmp_path, name, n)
    index = scan_dataset(tmp_path, seed=4)
    train, val = index.split("train"), index.split("val")
    assert not {r.path for r in train} & {r.path for r in val}
    assert len(train) + len(val) == 21
    for cid, n in enumerate((7, 12, 2)):
        assert sum(r.class_id == cid for r in val) == val_count(n)
        assert sum(r.class_id == cid for r in train) == n - val_count(n)


def test_scan_is_deterministic_and_seeded(tmp_path):
    write_class(tmp_path, "a", 30)
    a, b = scan_dataset(tmp_path, 1), scan_dataset(tmp_path, 1)
    assert a.records == b.records
    assert a.records != scan_dataset(tmp_path, 2).records


def test_labels_sorted_bytewise(tmp_path):
    for name in ("healthy", "Brown Spot", "Leaf_Blast", "bacterial"):
        write_class(tmp_path, name, 2)
    assert scan_dataset(tmp_path).labels == ["Brown Spot", "Leaf_Blast", "bacterial", "healthy"]


def test_scan_errors(tmp_path):
    with pytest.raises(IngestionError, match="no class"):
        scan_dataset(tmp_path)
    write_class(tmp_path, "full", 3)
    (tmp_path / "hollow").mkdir()
    (tmp_path / "hollow" / "notes.txt").write_text("x")
    with pytest.raises(IngestionError, match="hollow"):
        scan_dataset(tmp_path)


def test_label_file_roundtrip(tmp_path):
    labels = ["Brown Spot", "Hispa (disease)", "néck blast"]
    write_labels(labels, tmp_path / "labels.txt")
    assert read_labels(tmp_path / "labels.txt") == labels
    assert (tmp_path / "labels.txt").read_bytes().decode("utf-8").splitlines() == labels


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------
def test_decode_single_red_pixel(tmp_path):
    (tmp_path / "p.ppm").write_bytes(b"P6\n1 1\n255\n\xff\x00\x00")
    assert decode_image(tmp_path / "p.ppm").data.tolist() == [[[1.0]], [[0.0]], [[0.0]]]


def test_decode_gradient_fixture(tmp_path):
    raw = b"P6 2 2 255\n" + bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255])
    (tmp_path / "g.ppm").write_bytes(raw)
    x = decode_image(tmp_path / "g.ppm").data
    assert x.shape == (3, 2, 2)
    np.testing.assert_allclose(x[:, 0, 0], [0.0, 0.2, 0.4], atol=1e-7)
    np.testing.assert_allclose(x[:, 0, 1], [0.6, 0.8, 1.0], atol=1e-7)
    np.testing.assert_allclose(x[:, 1, 0], [1.0, 0.0, 0.0], atol=1e-7)
    np.testing.assert_allclose(x[:, 1, 1], [0.0, 0.0, 1.0], atol=1e-7)


def test_decode_header_with_comments():
    raw = b"P6\n# made by hand\n1 # width done\n1\n255\n\x01\x02\x03"
    assert decode_ppm(raw).tolist() == [[[1, 2, 3]]]


@pytest.mark.parametrize(
    "raw, match, offset",
    [
        (b"P3\n1 1\n255\n", "magic", 0),
        (b"P6\n1 1\n65535\n\x00\x00", "maxval", None),
        (b"P6\n2 2\n255\n\x00\x00\x00", "truncated pixel", None),
        (b"P6\n1", "truncated header", None),
        (b"P6\nx 1\n255\n", "width", 3),
    ],
)
def test_decode_errors(raw, match, offset):
    with pytest.raises(DecodeError, match=match) as info:
        decode_ppm(raw)
    if offset is not None:
        assert info.value.offset == offset


def test_encode_decode_roundtrip():
    pixels = make_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert np.array_equal(decode_ppm(encode_ppm(pixels)), pixels)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------
def test_resize_same_size_is_identity():
    x = Tensor(make_rng(1).random((3, 224, 224)))
    np.testing.assert_allclose(resize_bilinear(x).data, x.data, atol=1e-6)


def test_resize_constant_stays_constant():
    out = resize_bilinear(Tensor(np.full((3, 13, 29), 0.37, np.float32)))
    assert np.all(out.data == np.float32(0.37))


def test_resize_half_pixel_average():
    x = Tensor(np.tile(np.array([[0, 1], [1, 0]], np.float32), (3, 1, 1)))
    assert resize_bilinear(x, (1, 1)).data.ravel().tolist() == [0.5, 0.5, 0.5]


def test_resize_upsample_hand_values():
    x = Tensor(np.array([[[0.0, 1.0]]], np.float32))
    # half-pixel centers: sources -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(resize_bilinear(x, (1, 4)).data.ravel(), [0, 0.25, 0.75, 1], atol=1e-7)


def test_normalize_values():
    mu = Tensor(np.broadcast_to(IMAGENET_MEAN[:, None, None], (3, 2, 2)))
    assert np.allclose(normalize(mu).data, 0, atol=1e-7)
    ones = normalize(Tensor(np.ones((3, 1, 1)))).data.ravel()
    np.testing.assert_allclose(ones, [2.2489, 2.4286, 2.6400], atol=1e-4)
    x = Tensor(make_rng(0).random((3, 4, 4)))
    np.testing.assert_allclose(denormalize(normalize(x)).data, x.data, atol=1e-6)
    assert np.allclose((1 - IMAGENET_MEAN) / IMAGENET_STD, ones)


def test_load_image_is_deterministic(tmp_path):
    pixels = make_rng(3).integers(0, 256, (30, 40, 3), dtype=np.uint8)
    (tmp_path / "a.ppm").write_bytes(encode_ppm(pixels))
    a, b = load_image(tmp_path / "a.ppm"), load_image(tmp_path / "a.ppm")
    assert a.shape == (3, 224, 224) and np.array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------
@pytest.fixture
def hundred_train(tmp_path):
    write_class(tmp_path, "only", 125)
    index = scan_dataset(tmp_path)
    assert len(index.split("train")) == 100
    return index


def test_batch_partition(hundred_train):
    sizes = [len(b.class_ids) for b in make_batches(hundred_train, "train", 32, size=4)]
    assert sizes == [32, 32, 32, 4]


def test_train_order_keyed_by_epoch(hundred_train):
    def order(epoch):
        return [p for b in make_batches(hundred_train, "train", 32, seed=0, epoch=epoch, size=4) for p in b.paths]

    assert order(1) == order(1)
    assert order(1) != order(2)
    assert sorted(order(1)) == sorted(order(2))


def test_val_stream_is_fixed(hundred_train):
    a = [b.pixels.data for b in make_batches(hundred_train, "val", 8, seed=0, epoch=1, size=4)]
    b = [b.pixels.data for b in make_batches(hundred_train, "val", 8, seed=9, epoch=5, size=4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_unreadable_file_names_path(tmp_path):
    write_class(tmp_path, "a", 4)
    bad = tmp_path / "a" / "img_0000.ppm"
    bad.write_bytes(b"P6\n9 9\n255\n\x00")
    index = scan_dataset(tmp_path)
    split = next(r.split for r in index.records if r.path == bad)
    with pytest.raises(IngestionError, match="img_0000.ppm"):
        list(make_batches(index, split, 2, size=4))


def test_toy_dataset_is_reproducible(tmp_path):
    def digest(root):
        return hashlib.sha256(b"".join(p.read_bytes() for p in sorted(root.rglob("*.ppm")))).hexdigest()

    a = make_toy_dataset(tmp_path / "a", per_class=4, size=32, seed=0)
    b = make_toy_dataset(tmp_path / "b", per_class=4, size=32, seed=0)
    assert digest(a) == digest(b)
    assert sorted(p.name for p in a.iterdir()) == ["blue", "green", "red"]
