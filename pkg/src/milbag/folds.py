"""Label-stratified, repeated k-fold assignment of bags to test folds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class FoldPlan:
    """For each repeat, a partition of bag ids into test folds.

    `assignments[bag_id][r]` is the test fold of that bag in repeat r.
    Folds are stratified by label: per class, fold sizes differ by at most
    one bag. Folds that end up with no positive bag are listed in
    `warnings` (possible only when a class has fewer bags than folds).
    """

    n_folds: int
    n_repeats: int
    assignments: dict[str, list[int]]
    labels: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def test_ids(self, repeat: int, fold: int) -> list[str]:
        return [b for b, folds in self.assignments.items() if folds[repeat] == fold]

    def train_ids(self, repeat: int, fold: int) -> list[str]:
        return [b for b, folds in self.assignments.items() if folds[repeat] != fold]

    def to_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "n_repeats": self.n_repeats,
            "assignments": {k: list(v) for k, v in sorted(self.assignments.items())},
            "labels": {k: int(v) for k, v in sorted(self.labels.items())},
            "warnings": list(self.warnings),
        }

    def plan_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def stratified_folds(bags, n_folds: int, n_repeats: int, seed: int) -> FoldPlan:
    """Assign every bag to exactly one test fold per repeat, per-class balanced.

    `bags` is a sequence of Bag objects or (id, label) pairs. Within each
    repeat and class, bags are shuffled and dealt into folds whose sizes
    differ by at most one; the folds receiving the extra bag rotate randomly
    per class so overall fold sizes stay balanced too.
    """
    if n_folds < 2:
        raise ContractError(f"need at least 2 folds, got {n_folds}")
    if n_repeats < 1:
        raise ContractError(f"need at least 1 repeat, got {n_repeats}")
    items = [(b.id, b.label) if hasattr(b, "id") else (str(b[0]), int(b[1])) for b in bags]
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ContractError("bag ids must be unique")
    labels = dict(items)
    assignments: dict[str, list[int]] = {i: [] for i in ids}
    warnings: list[str] = []
    for r in range(n_repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        fold_of: dict[str, int] = {}
        for label in sorted(set(labels.values())):
            class_ids = [i for i in ids if labels[i] == label]
            order = rng.permutation(len(class_ids))
            base, extra = divmod(len(class_ids), n_folds)
            start = int(rng.integers(n_folds))
            sizes = [base + (1 if (f - start) % n_folds < extra else 0)
                     for f in range(n_folds)]
            cursor = 0
            for f, size in enumerate(sizes):
                for j in order[cursor:cursor + size]:
                    fold_of[class_ids[j]] = f
                cursor += size
        for bag_id in ids:
            assignments[bag_id].append(fold_of[bag_id])
        for f in range(n_folds):
            test = [i for i in ids if fold_of[i] == f]
            if not any(labels[i] == 1 for i in test):
                warnings.append(f"repeat {r} fold {f} has no positive bag")
    return FoldPlan(n_folds=n_folds, n_repeats=n_repeats, assignments=assignments,
                    labels=labels, warnings=warnings)
