import numpy as np
import pytest

from conftest import DESK_REGIONS, make_synthetic

from pedattr.config import AttributeSpec, LossConfig, ModelConfig, TrainConfig
from pedattr.data_io import (MAGIC_EMBED, MAGIC_WEIGHTS, RegionAttribute,
                             SyntheticSpec, embed_cache, embed_dataset,
                             generate_synthetic, load_container, load_dataset,
                             load_dataset_vocab, load_embed_cache, recover_label,
                             region_mean, save_container, synthetic_spec_from_dict)
from pedattr.errors import CacheInvalidError, ConfigError, DataFormatError
from pedattr.pipeline import init_model, trainable_parameters
from pedattr.training import train


class TestContainer:
    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.vlmw"
        save_container(path, [], MAGIC_WEIGHTS)
        magic, entries = load_container(path)
        assert magic == MAGIC_WEIGHTS and entries == {}

    def test_single_tensor_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "one.vlme"
        arr = np.array([[1.0, 2.0], [3.0, 4.0]])
        save_container(path, [("x", arr)], MAGIC_EMBED)
        _, entries = load_container(path)
        assert np.array_equal(entries["x"], arr)

    def test_file_level_round_trip_is_lossless(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = [("a", rng.standard_normal((3, 4))),
                   ("b.c", rng.standard_normal(7)),
                   ("scalar3d", rng.standard_normal((2, 2, 2)))]
        first = tmp_path / "first.vlmw"
        save_container(first, entries, MAGIC_WEIGHTS)
        _, loaded = load_container(first)
        second = tmp_path / "second.vlmw"
        save_container(second, list(loaded.items()), MAGIC_WEIGHTS)
        assert first.read_bytes() == second.read_bytes()

    def test_truncated_payload_names_entry_and_offset(self, tmp_path):
        path = tmp_path / "trunc.vlme"
        save_container(path, [("image", np.ones((4, 4)))], MAGIC_EMBED)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(DataFormatError) as exc:
            load_container(path)
        message = str(exc.value)
        assert "image" in message and "byte offset" in message

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(DataFormatError) as exc:
            load_container(path)
        assert "magic" in str(exc.value)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.vlmw"
        save_container(path, [], MAGIC_WEIGHTS)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError) as exc:
            load_container(path)
        assert "version" in str(exc.value)

    def test_wrong_expected_magic(self, tmp_path):
        path = tmp_path / "w.vlmw"
        save_container(path, [], MAGIC_WEIGHTS)
        with pytest.raises(DataFormatError):
            load_container(path, MAGIC_EMBED)

    def test_duplicate_names_rejected(self, tmp_path):
        with pytest.raises(DataFormatError):
            save_container(tmp_path / "dup.vlmw",
                           [("x", np.ones(2)), ("x", np.ones(2))], MAGIC_WEIGHTS)


class TestSyntheticSpec:
    def test_overlapping_regions_rejected(self):
        attrs = (RegionAttribute("a", "a?", 2, (0, 0, 16, 16)),
                 RegionAttribute("b", "b?", 2, (8, 8, 16, 16)))
        spec = SyntheticSpec(4, 32, 8, seed=0, attributes=attrs)
        with pytest.raises(ConfigError) as exc:
            spec.validate()
        assert "region overlap" in str(exc.value)

    def test_out_of_bounds_rejected(self):
        attrs = (RegionAttribute("a", "a?", 2, (24, 24, 16, 16)),)
        with pytest.raises(ConfigError):
            SyntheticSpec(4, 32, 8, seed=0, attributes=attrs).validate()

    def test_unaligned_region_rejected(self):
        attrs = (RegionAttribute("a", "a?", 2, (4, 0, 16, 16)),)
        with pytest.raises(ConfigError):
            SyntheticSpec(4, 32, 8, seed=0, attributes=attrs).validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError) as exc:
            synthetic_spec_from_dict({"num_samples": 1, "image_hw": 32,
                                      "patch_size": 8, "seed": 0,
                                      "attributes": [], "bogus": 1})
        assert "bogus" in str(exc.value)


class TestGenerateSynthetic:
    def test_zero_samples(self, tmp_path):
        spec = SyntheticSpec(0, 32, 8, seed=1, attributes=DESK_REGIONS)
        dataset = generate_synthetic(spec, tmp_path / "empty")
        assert dataset.records == []
        assert len(dataset.specs) == 2
        assert (tmp_path / "empty" / "prompts.json").is_file()

    def test_degenerate_threshold_gives_all_positive(self, tmp_path):
        attrs = (RegionAttribute("always", "always on?", 2, (0, 0, 16, 16),
                                 threshold=-1.0),)
        spec = SyntheticSpec(10, 32, 8, seed=2, attributes=attrs)
        dataset = generate_synthetic(spec, tmp_path / "deg")
        assert all(r.labels["always"] == 1 for r in dataset.records)

    def test_regeneration_is_byte_identical(self, tmp_path):
        spec = SyntheticSpec(5, 32, 8, seed=3, attributes=DESK_REGIONS)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_labels_recoverable_from_images(self, tmp_path):
        attrs = DESK_REGIONS + (
            RegionAttribute("shade", "which shade is the stripe?", 3, (0, 24, 16, 8)),)
        spec = SyntheticSpec(20, 32, 8, seed=4, attributes=attrs)
        dataset = generate_synthetic(spec, tmp_path / "rec")
        for record in dataset.records:
            image = dataset.load_image(record)
            for attr in attrs:
                assert recover_label(image, attr) == record.labels[attr.name]

    def test_multiclass_bands(self):
        attr = RegionAttribute("shade", "shade?", 4, (0, 0, 8, 8))
        assert attr.label_for_mean(0.05) == 0
        assert attr.label_for_mean(0.30) == 1
        assert attr.label_for_mean(0.60) == 2
        assert attr.label_for_mean(0.95) == 3

    def test_region_mean_matches_fill(self, tmp_path):
        spec = SyntheticSpec(3, 32, 8, seed=5, attributes=DESK_REGIONS)
        dataset = generate_synthetic(spec, tmp_path / "fill")
        image = dataset.load_image(dataset.records[0])
        mean = region_mean(image, DESK_REGIONS[0].region)
        region = image[0:16, 0:16, :]
        assert np.allclose(region, region.flat[0])
        assert abs(mean - region.flat[0]) < 1e-12

    def test_dataset_loader_validates_labels(self, tmp_path):
        spec = SyntheticSpec(2, 32, 8, seed=6, attributes=DESK_REGIONS)
        generate_synthetic(spec, tmp_path / "ds")
        annotations = tmp_path / "ds" / "annotations.jsonl"
        lines = annotations.read_text().splitlines()
        lines[0] = lines[0].replace('"bright_top": 0', '"bright_top": 7') \
                           .replace('"bright_top": 1', '"bright_top": 7')
        annotations.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "ds")


class TestEmbedCache:
    def _pipeline(self, tmp_path, num_samples=3):
        _, dataset = make_synthetic(tmp_path, "data", num_samples, seed=7)
        cfg = ModelConfig(attributes=tuple(dataset.specs))
        model = init_model(cfg, 9)
        vocab = load_dataset_vocab(dataset)
        return dataset, cfg, model, vocab

    def test_cache_entry_counts(self, tmp_path):
        dataset, cfg, model, vocab = self._pipeline(tmp_path, num_samples=1)
        cache_path = tmp_path / "cache.vlme"
        embed_cache(dataset, model.encoders, cfg, vocab, cache_path)
        _, entries = load_container(cache_path, MAGIC_EMBED)
        f_img_entries = [n for n in entries if n.endswith(".f_img")]
        text_entries = [n for n in entries if n.startswith("text.")]
        cls_entries = [n for n in entries if n.endswith(".cls")]
        assert len(f_img_entries) == 1
        assert len(text_entries) == len(dataset.specs)
        assert len(cls_entries) == 1

    def test_cached_tensors_equal_direct_outputs(self, tmp_path):
        dataset, cfg, model, vocab = self._pipeline(tmp_path)
        cache_path = tmp_path / "cache.vlme"
        direct = embed_cache(dataset, model.encoders, cfg, vocab, cache_path)
        loaded = load_embed_cache(cache_path, dataset, cfg)
        for a, b in zip(direct.samples, loaded.samples):
            assert np.array_equal(a.f_img, b.f_img)
            assert np.array_equal(a.cls_embed, b.cls_embed)
            assert a.labels == b.labels
        for a, b in zip(direct.text_features, loaded.text_features):
            assert np.array_equal(a, b)

    def test_wrong_d_model_rejected(self, tmp_path):
        dataset, cfg, model, vocab = self._pipeline(tmp_path)
        cache_path = tmp_path / "cache.vlme"
        embed_cache(dataset, model.encoders, cfg, vocab, cache_path)
        wrong = ModelConfig(d_model=32, num_heads=4, attributes=tuple(dataset.specs))
        with pytest.raises(CacheInvalidError):
            load_embed_cache(cache_path, dataset, wrong)

    def test_cache_training_equals_direct_training(self, tmp_path):
        dataset, cfg, model, vocab = self._pipeline(tmp_path, num_samples=6)
        cache_path = tmp_path / "cache.vlme"
        direct = embed_cache(dataset, model.encoders, cfg, vocab, cache_path)
        cached = load_embed_cache(cache_path, dataset, cfg)
        train_cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3)
        model_a = init_model(cfg, 9)
        model_b = init_model(cfg, 9)
        train(model_a, direct, train_cfg, LossConfig(), seed=2)
        train(model_b, cached, train_cfg, LossConfig(), seed=2)
        params_a = trainable_parameters(model_a)
        params_b = trainable_parameters(model_b)
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name]), name
