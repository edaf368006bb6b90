"""Instance-level augmentation: harvest high/low-attention instances from
correctly predicted positive bags and reassemble them into virtual positive
bags for the next epoch.

Harvesting keeps the floor(alpha*K) instances with the highest attention
(key instances) and the floor(gamma*K) with the lowest (regular instances).
A virtual bag samples floor(alpha*K_bar) keys and floor((1-alpha)*K_bar)
regulars without replacement, where K_bar is the average bag size of the
training split. Both lists are cleared at the start of every epoch so the
harvest always reflects the current model's attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Bag, Instance
from .errors import ConfigError, ContractError
from .model import BagPrediction


@dataclass
class HarvestEntry:
    instance: Instance
    bag_id: str
    instance_index: int
    epoch: int


@dataclass
class InstanceStore:
    """The two harvested lists feeding virtual-bag generation."""

    k_bar: float
    alpha: float = 0.025
    gamma: float = 0.2
    key_list: list[HarvestEntry] = field(default_factory=list)
    regular_list: list[HarvestEntry] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.alpha < self.gamma < 1.0:
            raise ConfigError(
                f"need 0 < alpha < gamma < 1, got alpha={self.alpha}, gamma={self.gamma}")
        if self.k_bar <= 0:
            raise ConfigError(f"k_bar must be positive, got {self.k_bar}")

    def clear(self) -> None:
        self.key_list.clear()
        self.regular_list.clear()

    @property
    def keys_per_virtual_bag(self) -> int:
        return int(np.floor(self.alpha * self.k_bar))

    @property
    def regulars_per_virtual_bag(self) -> int:
        return int(np.floor((1.0 - self.alpha) * self.k_bar))


def harvest(bag: Bag, prediction: BagPrediction, store: InstanceStore,
            epoch: int) -> tuple[int, int]:
    """Harvest one bag if it is a real positive predicted positive.

    Returns (keys appended, regulars appended); (0, 0) when the bag does
    not qualify. Attention ties at either cutoff break toward the lower
    instance index.
    """
    if bag.is_virtual or bag.label != 1 or prediction.label != 1:
        return (0, 0)
    attention = np.asarray(prediction.attention, dtype=np.float64)
    k = len(bag.instances)
    if attention.shape != (k,):
        raise ContractError(
            f"prediction has {attention.shape} attention values for a bag of {k}")
    n_key = int(np.floor(store.alpha * k))
    n_regular = int(np.floor(store.gamma * k))
    descending = np.argsort(-attention, kind="stable")
    ascending = np.argsort(attention, kind="stable")
    for idx in descending[:n_key]:
        store.key_list.append(HarvestEntry(bag.instances[idx], bag.id, int(idx), epoch))
    for idx in ascending[:n_regular]:
        store.regular_list.append(HarvestEntry(bag.instances[idx], bag.id, int(idx), epoch))
    return (n_key, n_regular)


@dataclass
class VirtualBag:
    """A generated positive bag with full sampling provenance."""

    instances: list[Instance]
    provenance: list[tuple[str, int]]
    label: int = 1

    def to_bag(self, bag_id: str) -> Bag:
        return Bag(id=bag_id, label=1, instances=list(self.instances), is_virtual=True)


def generate_virtual_bags(store: InstanceStore, count: int,
                          rng_seed) -> list[VirtualBag]:
    """Sample `count` virtual bags; returns [] when the harvest is too small.

    Generation is a pure function of (store contents, count, rng_seed):
    the same seed always reproduces the same provenance.
    """
    if count <= 0:
        raise ContractError(f"virtual bag count must be positive, got {count}")
    n_key = store.keys_per_virtual_bag
    n_regular = store.regulars_per_virtual_bag
    if len(store.key_list) < max(n_key, 1) or len(store.regular_list) < n_regular:
        return []
    rng = np.random.default_rng(rng_seed)
    bags = []
    for _ in range(count):
        keys = rng.choice(len(store.key_list), size=n_key, replace=False)
        regulars = rng.choice(len(store.regular_list), size=n_regular, replace=False)
        entries = [store.key_list[i] for i in keys] + [store.regular_list[i] for i in regulars]
        instances = [replace(e.instance, metadata_valid=False) for e in entries]
        provenance = [(e.bag_id, e.instance_index) for e in entries]
        bags.append(VirtualBag(instances=instances, provenance=provenance))
    return bags


def augmentation_schedule(epoch: int, config) -> bool:
    """Whether virtual bags are generated at the end of this epoch.

    Bags generated in epoch k are consumed in epoch k+1, so the schedule
    turning on at `aug_start_epoch` means augmented training data first
    appears one epoch later.
    """
    total = config.epochs
    if not 1 <= epoch <= total:
        raise ContractError(f"epoch {epoch} outside 1..{total}")
    return epoch >= config.aug_start_epoch


def dump_provenance_jsonl(path, virtual_bags) -> None:
    """One JSON line per virtual bag listing (source bag, instance index)."""
    with open(path, "w") as fh:
        for i, vb in enumerate(virtual_bags):
            fh.write(json.dumps({
                "virtual_index": i,
                "label": vb.label,
                "provenance": [[bag_id, idx] for bag_id, idx in vb.provenance],
            }, sort_keys=True) + "\n")
