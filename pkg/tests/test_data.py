import hashlib

import numpy as np
import pytest
from PIL import Image

from cascadesod.data import (
    AugmentParams,
    Sample,
    SynthSpec,
    apply_augment,
    augment,
    draw_augment,
    generate_synthetic,
    iterate_batches,
    load_folder,
    load_root,
    render_synthetic,
    round_to_stride,
)
from cascadesod.labelgen import decompose_detail


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def synthetic_sample(index=0, seed=0, canvas=96):
    img, mask = render_synthetic(SynthSpec(seed=seed, canvas=canvas), index)
    return Sample(img.astype(np.float32) / 255, mask, str(index))


def test_generate_is_byte_identical(tmp_path):
    spec = SynthSpec(n_images=12, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate_synthetic(SynthSpec(n_images=12, seed=8), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_generate_counts_and_binary_nonempty_masks(tmp_path):
    generate_synthetic(SynthSpec(n_images=40, seed=3), tmp_path)
    images = sorted((tmp_path / "images").glob("*.png"))
    masks = sorted((tmp_path / "masks").glob("*.png"))
    assert len(images) == len(masks) == 40
    assert (tmp_path / "spec.json").exists()
    for m in masks:
        arr = np.asarray(Image.open(m))
        assert set(np.unique(arr)) <= {0, 255} and arr.max() == 255
    with Image.open(images[0]) as im:
        assert im.size == (96, 96) and im.mode == "RGB"


def test_generate_includes_multi_object_and_border_cases():
    from scipy import ndimage

    spec = SynthSpec(n_images=50)
    multi = border = 0
    for i in range(spec.n_images):
        _, m = render_synthetic(spec, i)
        multi += ndimage.label(m)[1] > 1
        border += bool(m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())
    assert multi >= 5 and border >= 5


def test_generate_rejects_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(SynthSpec(n_images=1), blocker / "corpus")


def test_round_to_stride():
    assert [round_to_stride(96 * s) for s in (0.75, 1.0, 1.25)] == [64, 96, 128]
    assert round_to_stride(352 * 0.75) == 256 and round_to_stride(10) == 64


def test_flip_twice_is_identity():
    s = synthetic_sample(1)
    p = AugmentParams(flip=True, crop=(0, 0, 96, 96), size=(96, 96))
    twice = apply_augment(apply_augment(s, p), p)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.gt, s.gt)
    assert np.array_equal(twice.detail, s.detail)


def test_identity_draw_leaves_sample_unchanged():
    s = synthetic_sample(2)
    out = apply_augment(s, AugmentParams(flip=False, crop=(0, 0, 96, 96), size=(96, 96)))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.gt, s.gt)
    assert np.array_equal(out.detail, s.detail)


@pytest.mark.parametrize("seed", range(8))
def test_detail_label_recomputed_after_augmentation(seed):
    s = synthetic_sample(seed)
    rng = np.random.default_rng(seed)
    out = augment(s, rng, base_size=96)
    if not out.gt.any():
        pytest.skip("crop removed the object")
    assert np.array_equal(out.detail, decompose_detail(out.gt).astype(np.float32))
    assert out.image.shape[:2] == out.gt.shape == out.detail.shape
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert set(np.unique(out.gt)) <= {0, 1}


def test_draw_augment_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = draw_augment(rng, (96, 96), 96)
        top, left, h, w = p.crop
        assert 0.8 * 96 * 96 - 200 <= h * w <= 96 * 96
        assert top + h <= 96 and left + w <= 96
        assert p.size[0] in (64, 96, 128) and p.size[0] == p.size[1]


def _write_pair(root, stem, mask, size=(20, 16)):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((*size, 3), 128, np.uint8)).save(root / "images" / f"{stem}.png")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(root / "masks" / f"{stem}.png")


def test_load_folder_empty_dirs(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(ValueError, match="no samples"):
        load_root(tmp_path)


def test_load_folder_length_and_threshold(tmp_path):
    mask = np.zeros((20, 16), np.uint8)
    mask[5:10, 4:9] = 255
    mask[0, 0] = 127  # below the 128 threshold
    mask[0, 1] = 128
    for i in range(10):
        _write_pair(tmp_path, f"{i:02d}", mask)
    ds = load_root(tmp_path)
    assert len(ds) == 10
    gt = ds[0].gt
    assert gt.dtype == np.uint8 and set(np.unique(gt)) == {0, 1}
    assert gt[0, 0] == 0 and gt[0, 1] == 1 and gt[5:10, 4:9].all()


def test_load_folder_reports_unmatched_and_corrupt(tmp_path):
    mask = np.zeros((20, 16), np.uint8)
    mask[4:8, 4:8] = 255
    for i in range(3):
        _write_pair(tmp_path, str(i), mask)
    Image.fromarray(np.zeros((20, 16, 3), np.uint8)).save(tmp_path / "images" / "lonely.png")
    (tmp_path / "images" / "bad.png").write_bytes(b"not a png")
    Image.fromarray(mask).save(tmp_path / "masks" / "bad.png")
    ds = load_folder(tmp_path / "images", tmp_path / "masks", base_size=32)
    assert len(ds) == 3 and ds.unmatched == ["lonely"] and ds.skipped == 1
    assert ds[0].image.shape == (32, 32, 3) and ds[0].gt.shape == (32, 32)


def test_iterate_batches_deterministic_and_resumable(tmp_path):
    generate_synthetic(SynthSpec(n_images=10, seed=2), tmp_path)
    ds = load_root(tmp_path, 96)
    a = list(iterate_batches(ds, 4, seed=1, epoch=3, base_size=96))
    b = list(iterate_batches(ds, 4, seed=1, epoch=3, base_size=96))
    tail = list(iterate_batches(ds, 4, seed=1, epoch=3, base_size=96, start=1))
    assert [x.ids for x in a] == [x.ids for x in b]
    assert all(x.images.equal(y.images) and x.details.equal(y.details) for x, y in zip(a, b))
    assert [x.index for x in tail] == [1, 2]
    assert all(x.images.equal(y.images) for x, y in zip(a[1:], tail))
    assert sorted(i for x in a for i in x.ids) == sorted(s.id for s in (ds[i] for i in range(10)))
    for x in a:
        assert x.images.shape[-1] in (64, 96, 128)
        assert x.images.shape[-2:] == x.gts.shape[-2:] == x.details.shape[-2:]
