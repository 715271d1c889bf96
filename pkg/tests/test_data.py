import filecmp

import numpy as np
import pytest

from semaim import ordergen as og
from semaim.data import (
    SHAPES,
    SyntheticSpec,
    batches,
    bilinear_resize,
    blob_mask,
    generate_blob_dataset,
    load_manifest,
    oracle_teacher_features,
    random_resize_crop,
    render_blob_image,
)
from semaim.errors import ContractError
from semaim.imageio import heatmap, read_pgm, read_ppm, write_pgm, write_ppm


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    return generate_blob_dataset(SyntheticSpec(count=12, seed=5), root)


class TestSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(blob_radius=(0.5, 3)),
            dict(blob_radius=(3, 20)),
            dict(blob_intensity=(0.25, 0.9)),
            dict(num_classes=5),
            dict(count=0),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            SyntheticSpec(**kwargs)


class TestGeneration:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = SyntheticSpec(count=6, seed=1)
        generate_blob_dataset(spec, tmp_path / "a")
        generate_blob_dataset(spec, tmp_path / "b")
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for name in (tmp_path / "a" / "images").iterdir():
            assert name.read_bytes() == (tmp_path / "b" / "images" / name.name).read_bytes()

    def test_centers_in_bounds_and_labels(self, dataset):
        for i, r in enumerate(dataset.records):
            assert 0 <= r.center[0] < 32 and 0 <= r.center[1] < 32
            assert r.label == i % 4

    def test_blob_brighter_than_background(self):
        spec = SyntheticSpec(count=20, seed=3)
        for index in range(spec.count):
            image, label, center = render_blob_image(spec, index)
            radius = np.random.default_rng([spec.seed, index]).uniform(*spec.blob_radius)
            mask = blob_mask(SHAPES[label], spec.image_size, center, radius)
            gray = image.mean(axis=2)
            assert gray[mask].mean() - gray[~mask].mean() > 3 * spec.background_noise_std

    def test_manifest_round_trip(self, dataset):
        loaded = load_manifest(dataset.root / "train.manifest")
        assert loaded.records == dataset.records and loaded.split == "train"
        assert loaded.load_images().shape == (12, 32, 32, 3)
        with pytest.raises(KeyError):
            loaded.find("nope")

    def test_manifest_missing_file(self, dataset, tmp_path):
        text = (dataset.root / "train.manifest").read_text()
        (tmp_path / "m.manifest").write_text(text)
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "m.manifest")


class TestOracleTeacher:
    def test_uniform_rows_identical(self):
        f = oracle_teacher_features(np.full((16, 16, 3), 0.3), 4)
        np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-15)

    def test_bright_patch_max_norm(self):
        img = np.full((16, 16, 3), 0.2)
        img[4:8, 8:12] = 0.9
        norms = np.linalg.norm(oracle_teacher_features(img, 4), axis=1)
        assert np.argmax(norms) == 6 and np.sort(norms)[-2] < norms[6]

    def test_center_recovered(self):
        spec = SyntheticSpec(count=40, seed=9)
        for index in range(spec.count):
            image, _, (cy, cx) = render_blob_image(spec, index)
            f = oracle_teacher_features(image, 8)
            center = og.find_center(og.mean_filter_3x3(og.similarity_map(f.mean(0), f, (4, 4))))
            assert abs(center[0] - cy // 8) <= 1 and abs(center[1] - cx // 8) <= 1

    def test_target_dim_too_small(self):
        with pytest.raises(ContractError):
            oracle_teacher_features(np.zeros((8, 8, 3)), 4, target_dim=4)


class TestAugment:
    def test_full_scale_is_identity(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        out = random_resize_crop(img, np.random.default_rng(1), scale=(1.0, 1.0), ratio=(1.0, 1.0))
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_shape_and_reproducible(self):
        img = np.random.default_rng(0).random((16, 24, 3))
        a = random_resize_crop(img, np.random.default_rng(7))
        b = random_resize_crop(img, np.random.default_rng(7))
        assert a.shape == img.shape and np.array_equal(a, b)

    def test_bad_scale(self):
        with pytest.raises(ContractError):
            random_resize_crop(np.zeros((4, 4, 1)), np.random.default_rng(0), scale=(0.0, 1.0))

    def test_bilinear_constant_and_linear_ramp(self):
        np.testing.assert_allclose(bilinear_resize(np.full((3, 5, 1), 0.7), (6, 10)), 0.7)
        ramp = np.arange(4, dtype=float)[None, :, None].repeat(2, axis=0)
        up = bilinear_resize(ramp, (2, 8))[0, :, 0]
        # half-pixel centres: interior samples sit at (j + 0.5) / 2 - 0.5
        np.testing.assert_allclose(up[1:-1], (np.arange(1, 7) + 0.5) / 2 - 0.5)


class TestBatches:
    def test_epoch_visits_each_once(self, dataset):
        ids = [i for b in batches(dataset, 5, np.random.default_rng(0)) for i in b.ids]
        assert sorted(ids) == sorted(dataset.ids())
        sizes = [len(b.ids) for b in batches(dataset, 5, np.random.default_rng(0))]
        assert sizes == [5, 5, 2]

    def test_two_epochs_shuffle(self, dataset):
        ids = [i for b in batches(dataset, 12, np.random.default_rng(0), epochs=2) for i in b.ids]
        assert sorted(ids[:12]) == sorted(ids[12:]) and ids[:12] != ids[12:]

    def test_seeded(self, dataset):
        a = [b.ids for b in batches(dataset, 4, np.random.default_rng(3), augment=True)]
        b = [b.ids for b in batches(dataset, 4, np.random.default_rng(3), augment=True)]
        assert a == b

    def test_labels_follow_ids(self, dataset):
        for b in batches(dataset, 4, np.random.default_rng(1)):
            assert [dataset.find(i).label for i in b.ids] == b.labels.tolist()

    def test_bad_batch_size(self, dataset):
        with pytest.raises(ContractError):
            next(batches(dataset, 0, np.random.default_rng(0)))


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)
        assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")

    def test_pgm_round_trip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_pgm(tmp_path / "x.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_reader_skips_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x01\x02")
        assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]

    def test_heatmap_warm_is_max(self):
        rgb = heatmap(np.array([[0.0, 1.0]]))
        assert rgb[0, 1, 0] > rgb[0, 1, 2] and rgb[0, 0, 2] > rgb[0, 0, 0]
