"""Synthetic generator and the bag file format."""

import numpy as np
import pytest

from milbag.data import (PATCH_HW, Bag, DatasetSpec, Instance, generate_synthetic,
                         generate_synthetic_with_motifs, mean_pixel_scores,
                         read_bag, read_dataset, write_bag, write_dataset)
from milbag.errors import ConfigError, ContractError, FormatError
from milbag.folds import stratified_folds
from milbag.metrics import roc_auc


def small_spec(**kw):
    defaults = dict(n_positive=3, n_negative=5, slices_per_bag=1, seed=0)
    defaults.update(kw)
    return DatasetSpec(**defaults)


def random_bag(rng, k=4, bag_id="b0", label=0):
    instances = [
        Instance(pixels=rng.random((PATCH_HW, PATCH_HW)).astype(np.float32),
                 slice_index=i // 12, grid_position=i % 12)
        for i in range(k)
    ]
    return Bag(id=bag_id, label=label, instances=instances)


class TestGenerator:
    def test_counts_and_bag_size(self):
        bags = generate_synthetic(DatasetSpec(n_positive=10, n_negative=36,
                                              slices_per_bag=3, seed=1))
        assert len(bags) == 46
        assert all(b.k == 36 for b in bags)
        assert sum(b.label for b in bags) == 10

    def test_same_seed_bit_identical(self):
        spec = small_spec(seed=7)
        b1 = generate_synthetic(spec)
        b2 = generate_synthetic(spec)
        for x, y in zip(b1, b2):
            assert x.id == y.id and x.label == y.label
            for i, j in zip(x.instances, y.instances):
                assert np.array_equal(i.pixels, j.pixels)

    def test_different_seed_differs(self):
        b1 = generate_synthetic(small_spec(seed=1))
        b2 = generate_synthetic(small_spec(seed=2))
        assert not np.array_equal(b1[0].instances[0].pixels, b2[0].instances[0].pixels)

    def test_pixels_in_unit_interval(self):
        for bag in generate_synthetic(small_spec()):
            for inst in bag.instances:
                assert inst.pixels.min() >= 0.0 and inst.pixels.max() <= 1.0
                assert inst.pixels.dtype == np.float32

    def test_metadata_covers_grid(self):
        bags = generate_synthetic(small_spec(slices_per_bag=2))
        for bag in bags:
            assert [i.grid_position for i in bag.instances] == list(range(12)) * 2
            assert [i.slice_index for i in bag.instances] == [0] * 12 + [1] * 12

    def test_motif_mask_only_in_positives(self):
        spec = small_spec()
        bags, motifs = generate_synthetic_with_motifs(spec)
        import math
        expected = math.ceil(spec.key_fraction * spec.instances_per_bag)
        for bag in bags:
            if bag.label == 1:
                assert len(motifs[bag.id]) == expected
            else:
                assert motifs[bag.id] == []

    def test_motif_instances_are_brighter_locally(self):
        """The lesion blob must leave a visible high-intensity region."""
        spec = DatasetSpec(seed=3)
        bags, motifs = generate_synthetic_with_motifs(spec)
        pos = [b for b in bags if b.label == 1][0]
        lesioned = motifs[pos.id]
        clean = [i for i in range(pos.k) if i not in lesioned]

        def smooth_max(pixels):
            # 5x5 box mean suppresses the salt pixels, keeps the blob
            from numpy.lib.stride_tricks import sliding_window_view
            return sliding_window_view(pixels, (5, 5)).mean(axis=(2, 3)).max()

        lesion_scores = [smooth_max(pos.instances[i].pixels) for i in lesioned]
        clean_scores = [smooth_max(pos.instances[i].pixels) for i in clean]
        assert np.mean(lesion_scores) > np.mean(clean_scores)

    def test_mean_pixel_classifier_stays_weak(self):
        bags = generate_synthetic(DatasetSpec())
        auc = roc_auc([b.label for b in bags], mean_pixel_scores(bags))
        assert max(auc, 1.0 - auc) < 0.7

    def test_too_small_key_fraction_rejected(self):
        with pytest.raises(ConfigError):
            DatasetSpec(key_fraction=0.02, slices_per_bag=1)  # 0.02*12 < 1

    def test_imbalance_direction_enforced(self):
        with pytest.raises(ConfigError):
            DatasetSpec(n_positive=30, n_negative=10)


class TestBagFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        bag = random_bag(rng, k=5, bag_id="rt", label=1)
        path = tmp_path / "rt.milbag"
        write_bag(path, bag)
        loaded = read_bag(path)
        assert loaded.id == "rt" and loaded.label == 1 and loaded.k == 5
        for a, b in zip(bag.instances, loaded.instances):
            assert np.array_equal(a.pixels, b.pixels)
            assert a.slice_index == b.slice_index
            assert a.grid_position == b.grid_position
            assert a.metadata_valid == b.metadata_valid

    def test_wrong_magic_rejected_at_offset_zero(self, tmp_path):
        path = tmp_path / "bad.milbag"
        path.write_bytes(b"NOTABAG!" + b"\x00" * 64)
        with pytest.raises(FormatError) as err:
            read_bag(path)
        assert err.value.offset == 0

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "t.milbag"
        write_bag(path, random_bag(rng))
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(FormatError, match="truncated payload"):
            read_bag(path)

    def test_out_of_range_pixels_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        bag = random_bag(rng, k=2)
        path = tmp_path / "p.milbag"
        write_bag(path, bag)
        blob = bytearray(path.read_bytes())
        bad = np.array([7.5], dtype="<f4").tobytes()
        blob[-4:] = bad
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="outside"):
            read_bag(path)

    def test_corrupt_header_json_rejected(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "h.milbag"
        write_bag(path, random_bag(rng))
        blob = bytearray(path.read_bytes())
        blob[14] = 0xFF  # stomp inside the JSON header
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_bag(path)

    def test_wrong_patch_size_cannot_be_written(self, tmp_path):
        inst = Instance(pixels=np.zeros((10, 10), dtype=np.float32),
                        slice_index=0, grid_position=0)
        bag = Bag(id="x", label=0, instances=[inst])
        with pytest.raises(ContractError):
            write_bag(tmp_path / "x.milbag", bag)


class TestDatasetDirectory:
    def test_round_trip_and_fold_plan_hash(self, tmp_path):
        bags = generate_synthetic(small_spec(seed=11))
        write_dataset(tmp_path / "ds", bags)
        loaded = read_dataset(tmp_path / "ds")
        assert [b.id for b in loaded] == [b.id for b in bags]
        for a, b in zip(bags, loaded):
            for i, j in zip(a.instances, b.instances):
                assert np.array_equal(i.pixels, j.pixels)
        plan1 = stratified_folds(bags, 2, 2, seed=5)
        plan2 = stratified_folds(loaded, 2, 2, seed=5)
        assert plan1.plan_hash() == plan2.plan_hash()

    def test_missing_index_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "empty")


class TestTypes:
    def test_bag_needs_instances(self):
        with pytest.raises(ContractError):
            Bag(id="e", label=0, instances=[])

    def test_grid_position_validated(self):
        with pytest.raises(ContractError):
            Instance(pixels=np.zeros((2, 2), dtype=np.float32),
                     slice_index=0, grid_position=12)
