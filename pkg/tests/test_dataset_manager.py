import json

import numpy as np
import pytest

from utils.data_synth import ScenePair
from utils.dataset_manager import (
    ANNOTATIONS,
    NORMALIZATION,
    DatasetManager,
    NormalizationStats,
    compute_normalization,
    denormalize,
    dequantize,
    load_normalization,
    normalize,
    quantize,
    read_dataset,
    read_split,
    rgb_path,
    save_normalization,
    thermal_path,
    write_dataset,
    write_split,
)
from utils.errors import DatasetError, ValidationError


@pytest.fixture
def written_split(tiny_dataset, tmp_path):
    split_dir = tmp_path / "train"
    write_split(tiny_dataset["train"][:5], split_dir)
    return split_dir


def rewrite_annotations(split_dir, edit):
    path = split_dir / ANNOTATIONS
    records = [json.loads(line) for line in path.read_text().splitlines()]
    path.write_text("".join(json.dumps(r) + "\n" for r in edit(records)))


class TestRoundTrip:
    def test_five_pairs(self, tiny_dataset, written_split):
        originals = tiny_dataset["train"][:5]
        loaded = read_split(written_split)
        assert [p.id for p in loaded] == [p.id for p in originals]
        for a, b in zip(loaded, originals):
            assert a.illumination == b.illumination
            np.testing.assert_allclose(a.points, b.points, atol=0)
            assert np.max(np.abs(a.rgb - b.rgb)) <= 1 / 255
            assert np.max(np.abs(a.thermal - b.thermal)) <= 1 / 255

    def test_quantized_images_exact(self, tiny_dataset, written_split):
        for a, b in zip(read_split(written_split), tiny_dataset["train"]):
            np.testing.assert_array_equal(a.rgb, dequantize(quantize(b.rgb)))

    def test_empty_split(self, tmp_path):
        write_split([], tmp_path / "val")
        assert read_split(tmp_path / "val") == []

    def test_empty_scene_keeps_no_points(self, tmp_path):
        pair = ScenePair("empty", np.full((3, 32, 32), 0.2), np.full((1, 32, 32), 0.4), np.zeros((0, 2)), "dark")
        write_split([pair], tmp_path / "test")
        (loaded,) = read_split(tmp_path / "test")
        assert loaded.points.shape == (0, 2)
        assert loaded.thermal_points is None

    def test_whole_dataset(self, tiny_dataset, tmp_path):
        loaded = read_dataset(write_dataset(tiny_dataset, tmp_path / "data"))
        assert {k: len(v) for k, v in loaded.items()} == {"train": 6, "val": 3, "test": 4}

    def test_rewrite_replaces_previous_split(self, tiny_dataset, written_split):
        assert write_split(tiny_dataset["train"][:2], written_split) == 2
        assert [p.id for p in read_split(written_split)] == ["train_0000", "train_0001"]
        assert not rgb_path(written_split, "train_0004").exists()
        assert not thermal_path(written_split, "train_0004").exists()

    def test_rewrite_refuses_foreign_files(self, tiny_dataset, written_split):
        (written_split / "notes.txt").write_text("keep me")
        with pytest.raises(DatasetError, match="refusing"):
            write_split(tiny_dataset["train"][:2], written_split)
        assert (written_split / "notes.txt").read_text() == "keep me"
        assert rgb_path(written_split, "train_0004").is_file()


class TestRejections:
    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            read_split(tmp_path / "nope")

    def test_missing_annotations(self, written_split):
        (written_split / ANNOTATIONS).unlink()
        with pytest.raises(DatasetError, match="annotation file not found"):
            read_split(written_split)

    def test_point_out_of_bounds_names_image(self, written_split):
        def push_out(records):
            records[2]["points"] = [[40.0, 3.0]]
            return records

        rewrite_annotations(written_split, push_out)
        with pytest.raises(DatasetError, match="train_0002: point out of bounds") as info:
            read_split(written_split)
        assert info.value.line == 3

    def test_missing_image_file(self, written_split):
        thermal_path(written_split, "train_0001").unlink()
        with pytest.raises(DatasetError, match="image file not found"):
            read_split(written_split)

    def test_file_without_record(self, written_split):
        (written_split / "stray.rgb.ppm").write_bytes(rgb_path(written_split, "train_0000").read_bytes())
        with pytest.raises(DatasetError, match="no annotation record"):
            read_split(written_split)

    def test_duplicate_id(self, written_split):
        rewrite_annotations(written_split, lambda records: records + records[:1])
        with pytest.raises(DatasetError, match="duplicate id train_0000"):
            read_split(written_split)

    @pytest.mark.parametrize(
        "line",
        [
            "{not json",
            json.dumps({"id": "train_0000", "points": []}),
            json.dumps({"id": "train_0000", "illumination": "dusk", "points": []}),
            json.dumps({"id": "train_0000", "illumination": "dark", "points": [[1.0]]}),
            json.dumps({"id": "", "illumination": "dark", "points": []}),
            json.dumps({"id": "train_0000", "illumination": "dark", "points": [[True, 1.0]]}),
        ],
    )
    def test_malformed_record(self, written_split, line):
        (written_split / ANNOTATIONS).write_text(line + "\n")
        with pytest.raises(DatasetError) as info:
            read_split(written_split)
        assert info.value.line == 1

    def test_wrong_image_mode(self, written_split):
        rgb_path(written_split, "train_0000").write_bytes(thermal_path(written_split, "train_0000").read_bytes())
        with pytest.raises(DatasetError, match="expected a RGB image"):
            read_split(written_split)

    def test_errors_are_validation_errors(self, tmp_path):
        with pytest.raises(ValidationError):
            read_split(tmp_path)


class TestNormalization:
    stats = NormalizationStats((0.5, 0.5, 0.5, 0.5), (0.1, 0.1, 0.1, 0.1))

    def test_mean_image_maps_to_zero(self):
        pair = ScenePair("p", np.full((3, 4, 4), 0.5), np.full((1, 4, 4), 0.5), np.zeros((0, 2)), "bright")
        rgb, thermal = normalize(pair, self.stats)
        np.testing.assert_array_equal(rgb, 0.0)
        np.testing.assert_array_equal(thermal, 0.0)

    def test_denormalize_inverts(self, rng):
        pair = ScenePair("p", rng.uniform(size=(3, 8, 8)), rng.uniform(size=(1, 8, 8)), np.zeros((0, 2)), "dark")
        rgb, thermal = denormalize(*normalize(pair, self.stats), self.stats)
        np.testing.assert_allclose(rgb, pair.rgb, atol=1e-12)
        np.testing.assert_allclose(thermal, pair.thermal, atol=1e-12)

    def test_stored_constants_match_recomputation(self, tiny_dataset, tmp_path):
        root = write_dataset(tiny_dataset, tmp_path / "data")
        stats = compute_normalization(tiny_dataset["train"])
        save_normalization(stats, root / NORMALIZATION)
        recomputed = compute_normalization(read_split(root / "train"))
        loaded = load_normalization(root / NORMALIZATION)
        np.testing.assert_allclose(loaded.mean, recomputed.mean, atol=1e-9)
        np.testing.assert_allclose(loaded.std, recomputed.std, atol=1e-9)

    def test_text_round_trip_exact(self, tmp_path):
        stats = NormalizationStats((0.1, 0.2, 0.3, 0.4), (1 / 3, 0.25, 0.5, 2 / 7))
        assert load_normalization(save_normalization(stats, tmp_path / NORMALIZATION)) == stats

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_normalization(tmp_path / NORMALIZATION)

    def test_missing_channel_rejected(self, tmp_path):
        path = tmp_path / NORMALIZATION
        path.write_text("r 0.5 0.1\ng 0.5 0.1\nb 0.5 0.1\n")
        with pytest.raises(DatasetError, match="missing channels"):
            load_normalization(path)

    def test_zero_std_rejected(self, tmp_path):
        path = tmp_path / NORMALIZATION
        path.write_text("r 0.5 0.1\ng 0.5 0.1\nb 0.5 0.1\nthermal 0.5 0\n")
        with pytest.raises(DatasetError, match="must be > 0"):
            load_normalization(path)

    def test_needs_training_images(self):
        with pytest.raises(ValidationError):
            compute_normalization([])


class TestDatasetManager:
    @pytest.fixture
    def manager(self, tiny_dataset, tmp_path):
        root = write_dataset(tiny_dataset, tmp_path / "data")
        save_normalization(compute_normalization(tiny_dataset["train"]), root / NORMALIZATION)
        return DatasetManager(root)

    def test_available_splits(self, manager):
        assert manager.available_splits() == ["train", "val", "test"]

    def test_statistics(self, manager, tiny_dataset):
        stats = manager.get_statistics()
        for split, pairs in tiny_dataset.items():
            assert stats[split]["images"] == len(pairs)
            assert stats[split]["bright"] + stats[split]["dark"] == len(pairs)
            assert stats[split]["total_count"] == sum(p.count for p in pairs)

    def test_scene_lookup(self, manager):
        assert manager.get_scene_by_id("val", "val_0001").id == "val_0001"
        assert manager.get_scene_by_id("val", "val_0099") is None

    def test_split_is_cached(self, manager):
        assert manager.get_split("test") is manager.get_split("test")

    def test_normalization(self, manager):
        assert len(manager.get_normalization().mean) == 4
