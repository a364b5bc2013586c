import io

import numpy as np
import pytest
from PIL import Image

from maiq.dataset import (
    CATEGORIES,
    IMAGE_H,
    IMAGE_W,
    CategoryRegistry,
    SyntheticSpec,
    decode_image,
    decode_ppm,
    default_palette,
    encode_ppm,
    generate_synthetic,
    normalize_name,
    scan_corpus,
)
from maiq.errors import CorruptImage, EmptyCorpus, IoFailure, UnknownCategoryFolder, UnsupportedFormat


def test_thirty_categories():
    assert len(CATEGORIES) == 30 and len(CategoryRegistry()) == 30


@pytest.mark.parametrize("raw,key", [("Food & Drink", "food and drink"), ("  QR   code ", "qr code")])
def test_normalize(raw, key):
    assert normalize_name(raw) == key


def test_registry_lookup():
    reg = CategoryRegistry()
    assert reg.index(CATEGORIES[0]) == 0
    assert reg.index(CATEGORIES[29].upper()) == 29
    with pytest.raises(UnknownCategoryFolder):
        reg.index("bluesky")


def test_registry_requires_thirty_unique():
    with pytest.raises(ValueError):
        CategoryRegistry(CATEGORIES[:29])
    with pytest.raises(ValueError):
        CategoryRegistry(list(CATEGORIES[:29]) + [CATEGORIES[0].lower()])


def test_palette_distinct():
    p = default_palette()
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    assert p.shape == (30, 3) and d[~np.eye(30, dtype=bool)].min() >= 64


def test_ppm_round_trip(rng):
    px = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(px)), px)
    commented = b"P6\n# c\n7 5\n255\n" + px.tobytes()
    np.testing.assert_array_equal(decode_ppm(commented), px)


def test_ppm_errors():
    with pytest.raises(CorruptImage):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(UnsupportedFormat):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


def test_decode_full_size_ppm(tmp_path):
    px = np.full((IMAGE_H, IMAGE_W, 3), 77, np.uint8)
    (tmp_path / "a.ppm").write_bytes(encode_ppm(px))
    t = decode_image(tmp_path / "a.ppm")
    assert t.shape == (1, IMAGE_H, IMAGE_W, 3)
    assert np.all(t.data == 77.0)


def test_decode_png_and_resize(tmp_path):
    buf = io.BytesIO()
    Image.fromarray(np.full((192, 288, 3), 200, np.uint8)).save(buf, format="PNG")
    (tmp_path / "a.png").write_bytes(buf.getvalue())
    t = decode_image(tmp_path / "a.png")
    assert t.shape == (1, IMAGE_H, IMAGE_W, 3) and np.all(t.data == 200.0)


def test_decode_rejects_grayscale_png(tmp_path):
    buf = io.BytesIO()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(buf, format="PNG")
    (tmp_path / "g.png").write_bytes(buf.getvalue())
    with pytest.raises(UnsupportedFormat):
        decode_image(tmp_path / "g.png")


def test_decode_errors(tmp_path):
    (tmp_path / "x.jpg").write_bytes(b"\xff\xd8\xff")
    with pytest.raises(UnsupportedFormat):
        decode_image(tmp_path / "x.jpg")
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n" + bytes(20))
    with pytest.raises(CorruptImage):
        decode_image(tmp_path / "bad.png")
    with pytest.raises(IoFailure):
        decode_image(tmp_path / "missing.ppm")


def test_synthetic_counts_and_order(small_corpus):
    assert len(small_corpus) == 60
    assert small_corpus.counts == [2] * 30
    rel = [p.relative_to(small_corpus.root).as_posix() for p, _ in small_corpus.items]
    assert rel == sorted(rel)


def test_synthetic_colors(small_corpus):
    item = next(iter(small_corpus))
    mean = item.pixels.data.reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(mean, default_palette()[item.label], atol=0.5)


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic(SyntheticSpec(per_class=1, seed=5), tmp_path / "a")
    b = generate_synthetic(SyntheticSpec(per_class=1, seed=5), tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_unknown_folder(tmp_path):
    generate_synthetic(SyntheticSpec(per_class=1), tmp_path)
    (tmp_path / "bluesky").mkdir()
    (tmp_path / "bluesky" / "x.ppm").write_bytes(encode_ppm(np.zeros((2, 2, 3))))
    with pytest.raises(UnknownCategoryFolder):
        scan_corpus(tmp_path)


def test_empty_corpus(tmp_path):
    with pytest.raises(EmptyCorpus):
        scan_corpus(tmp_path)
    with pytest.raises(EmptyCorpus):
        scan_corpus(tmp_path / "nope")


def test_labels_override(tmp_path):
    names = [f"class {i}" for i in range(30)]
    (tmp_path / "labels.txt").write_text("\n".join(names) + "\n")
    (tmp_path / "Class 7").mkdir()
    (tmp_path / "Class 7" / "a.ppm").write_bytes(encode_ppm(np.zeros((2, 2, 3))))
    ds = scan_corpus(tmp_path)
    assert ds.labels.tolist() == [7] and ds.registry.names == names
