"""Virtual-bag augmentation: harvest rules, floor formulas, determinism."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milbag.augment import (HarvestEntry, InstanceStore, VirtualBag,
                            augmentation_schedule, dump_provenance_jsonl,
                            generate_virtual_bags, harvest)
from milbag.data import Bag, Instance
from milbag.errors import ConfigError, ContractError
from milbag.model import BagPrediction

PATCH = np.zeros((2, 2), dtype=np.float32)


def make_bag(k, label=1, bag_id="bag", virtual=False):
    instances = [Instance(pixels=PATCH, slice_index=i // 12, grid_position=i % 12)
                 for i in range(k)]
    return Bag(id=bag_id, label=label, instances=instances, is_virtual=virtual)


def prediction_with(attention, label=1):
    a = np.asarray(attention, dtype=np.float64)
    return BagPrediction(probability=0.9 if label else 0.1, label=label,
                         attention=a, bag_embedding=np.zeros(2))


def fresh_store(k_bar=217.0, alpha=0.025, gamma=0.2):
    return InstanceStore(k_bar=k_bar, alpha=alpha, gamma=gamma)


class TestHarvest:
    def test_published_bag_size_yields_5_keys_43_regulars(self):
        rng = np.random.default_rng(0)
        store = fresh_store()
        bag = make_bag(217)
        nk, nr = harvest(bag, prediction_with(rng.random(217)), store, epoch=26)
        assert nk == 5 and nr == 43           # floor(0.025*217), floor(0.2*217)
        assert len(store.key_list) == 5 and len(store.regular_list) == 43

    def test_negative_bag_leaves_store_unchanged(self):
        store = fresh_store()
        bag = make_bag(50, label=0)
        harvest(bag, prediction_with(np.ones(50) / 50, label=1), store, epoch=30)
        assert not store.key_list and not store.regular_list

    def test_wrongly_predicted_positive_is_skipped(self):
        store = fresh_store()
        bag = make_bag(50, label=1)
        harvest(bag, prediction_with(np.ones(50) / 50, label=0), store, epoch=30)
        assert not store.key_list and not store.regular_list

    def test_virtual_bag_is_never_harvested(self):
        store = fresh_store()
        bag = make_bag(50, label=1, virtual=True)
        harvest(bag, prediction_with(np.ones(50) / 50), store, epoch=30)
        assert not store.key_list

    def test_keys_are_highest_attention_regulars_lowest(self):
        store = fresh_store(k_bar=40, alpha=0.1, gamma=0.2)
        a = np.arange(40, dtype=np.float64) / 40
        bag = make_bag(40)
        harvest(bag, prediction_with(a), store, epoch=26)
        assert [e.instance_index for e in store.key_list] == [39, 38, 37, 36]
        assert [e.instance_index for e in store.regular_list] == list(range(8))

    def test_ties_break_toward_lower_instance_index(self):
        store = fresh_store(k_bar=10, alpha=0.3, gamma=0.5)
        bag = make_bag(10)
        harvest(bag, prediction_with(np.full(10, 0.1)), store, epoch=26)
        assert [e.instance_index for e in store.key_list] == [0, 1, 2]
        assert [e.instance_index for e in store.regular_list] == [0, 1, 2, 3, 4]

    def test_monotone_alpha_prefix(self):
        rng = np.random.default_rng(1)
        a = rng.random(60)
        bag = make_bag(60)
        sets = []
        for alpha in (0.05, 0.1, 0.3):
            store = fresh_store(k_bar=60, alpha=alpha, gamma=0.9)
            harvest(bag, prediction_with(a), store, epoch=26)
            sets.append({e.instance_index for e in store.key_list})
        assert sets[0] <= sets[1] <= sets[2]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=1, max_value=300),
           st.floats(min_value=0.01, max_value=0.4),
           st.floats(min_value=0.45, max_value=0.95),
           st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_floor_formulas_hold(self, k, alpha, gamma, seed):
        rng = np.random.default_rng(seed)
        store = fresh_store(k_bar=float(k), alpha=alpha, gamma=gamma)
        bag = make_bag(k)
        nk, nr = harvest(bag, prediction_with(rng.random(k)), store, epoch=26)
        assert nk == int(np.floor(alpha * k))
        assert nr == int(np.floor(gamma * k))


class TestStoreInvariants:
    def test_alpha_must_be_below_gamma(self):
        with pytest.raises(ConfigError):
            InstanceStore(k_bar=10, alpha=0.3, gamma=0.2)

    def test_clear_empties_both_lists(self):
        store = fresh_store(k_bar=20, alpha=0.1, gamma=0.2)
        bag = make_bag(20)
        harvest(bag, prediction_with(np.random.default_rng(0).random(20)), store, 26)
        store.clear()
        assert not store.key_list and not store.regular_list


class TestGenerate:
    def _filled_store(self, k_bar=217.0, alpha=0.025, n_source_bags=6, seed=0):
        rng = np.random.default_rng(seed)
        store = fresh_store(k_bar=k_bar, alpha=alpha)
        for b in range(n_source_bags):
            bag = make_bag(217, bag_id=f"src-{b}")
            harvest(bag, prediction_with(rng.random(217)), store, epoch=30)
        return store

    def test_published_composition_5_keys_211_regulars(self):
        store = self._filled_store()
        bags = generate_virtual_bags(store, count=4, rng_seed=0)
        assert len(bags) == 4
        for vb in bags:
            assert len(vb.instances) == 5 + 211 == 216
            assert vb.label == 1
            assert len(vb.provenance) == 216

    def test_empty_key_list_returns_empty(self):
        store = fresh_store()
        assert generate_virtual_bags(store, count=3, rng_seed=0) == []

    def test_insufficient_regulars_returns_empty(self):
        store = self._filled_store(n_source_bags=4)  # 172 regulars < 211
        assert generate_virtual_bags(store, count=2, rng_seed=0) == []

    def test_same_seed_identical_provenance(self):
        store = self._filled_store()
        b1 = generate_virtual_bags(store, count=3, rng_seed=42)
        b2 = generate_virtual_bags(store, count=3, rng_seed=42)
        assert [vb.provenance for vb in b1] == [vb.provenance for vb in b2]

    def test_different_seed_differs(self):
        store = self._filled_store()
        b1 = generate_virtual_bags(store, count=3, rng_seed=1)
        b2 = generate_virtual_bags(store, count=3, rng_seed=2)
        assert [vb.provenance for vb in b1] != [vb.provenance for vb in b2]

    def test_no_replacement_within_a_bag(self):
        store = self._filled_store()
        for vb in generate_virtual_bags(store, count=5, rng_seed=7):
            assert len(set(vb.provenance)) == len(vb.provenance)

    def test_key_purity_via_provenance(self):
        """Everything sampled traces back to a harvested real positive bag."""
        store = self._filled_store()
        source_ids = {e.bag_id for e in store.key_list} | {e.bag_id for e in store.regular_list}
        for vb in generate_virtual_bags(store, count=5, rng_seed=3):
            for bag_id, idx in vb.provenance:
                assert bag_id in source_ids
                assert 0 <= idx < 217

    def test_nonpositive_count_rejected(self):
        store = self._filled_store()
        with pytest.raises(ContractError):
            generate_virtual_bags(store, count=0, rng_seed=0)

    def test_to_bag_marks_virtual_and_invalidates_metadata(self):
        store = self._filled_store()
        vb = generate_virtual_bags(store, count=1, rng_seed=0)[0]
        bag = vb.to_bag("virtual-001")
        assert bag.is_virtual and bag.label == 1
        assert all(not inst.metadata_valid for inst in bag.instances)


class TestSchedule:
    class Cfg:
        epochs = 50
        aug_start_epoch = 26

    def test_epoch_25_is_off(self):
        assert augmentation_schedule(25, self.Cfg()) is False

    def test_epoch_26_is_on(self):
        assert augmentation_schedule(26, self.Cfg()) is True

    def test_last_epoch_is_on(self):
        assert augmentation_schedule(50, self.Cfg()) is True

    def test_epoch_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            augmentation_schedule(51, self.Cfg())
        with pytest.raises(ContractError):
            augmentation_schedule(0, self.Cfg())


class TestProvenanceDump:
    def test_jsonl_round_trip(self, tmp_path):
        store = fresh_store(k_bar=20, alpha=0.1, gamma=0.3)
        rng = np.random.default_rng(0)
        for b in range(4):  # 4 bags x 6 regulars covers the 18 needed per virtual bag
            harvest(make_bag(20, bag_id=f"src-{b}"), prediction_with(rng.random(20)), store, 26)
        vbags = generate_virtual_bags(store, count=2, rng_seed=0)
        path = tmp_path / "prov.jsonl"
        dump_provenance_jsonl(path, vbags)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(lines) == 2
        for i, line in enumerate(lines):
            assert line["virtual_index"] == i
            assert line["label"] == 1
            assert line["provenance"] == [[b, idx] for b, idx in vbags[i].provenance]
