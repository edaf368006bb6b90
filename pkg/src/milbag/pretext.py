"""Patch-location pretext tasks.

A slice is a 3 x 4 grid of patches (positions 0..11, row-major). Two tasks
provide annotation-free supervision for the shared feature extractor:

  - relative: given an anchor/neighbor pair from the same slice, predict
    which of the 8 compass positions the neighbor occupies. Only the two
    interior cells of the middle row -- grid positions 5 and 6 -- have a
    complete 8-neighborhood, so each slice yields exactly 16 pairs.
  - absolute: predict a patch's own grid position among the 12 cells.

Both heads are two fully connected layers on instance features; losses are
the per-slice sums of cross-entropies averaged over slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, SliceGeometryError
from .layers import LayerParams, fc_layer, forward_layer
from .tensor import Tensor

GRID_ROWS = 3
GRID_COLS = 4
N_POSITIONS = GRID_ROWS * GRID_COLS
N_RELATIVE_CLASSES = 8
PAIRS_PER_SLICE = 16

# interior cells of the middle row: the only positions with 8 neighbors
ANCHOR_POSITIONS = (5, 6)

# compass classes, clockwise from top-left
RELATIVE_CLASS_NAMES = ("top_left", "top", "top_right", "right",
                        "bottom_right", "bottom", "bottom_left", "left")
_DELTA_TO_CLASS = {
    (-1, -1): 0, (-1, 0): 1, (-1, 1): 2, (0, 1): 3,
    (1, 1): 4, (1, 0): 5, (1, -1): 6, (0, -1): 7,
}
_CLASS_TO_DELTA = {c: d for d, c in _DELTA_TO_CLASS.items()}


def position_to_rc(position: int) -> tuple[int, int]:
    if not 0 <= position < N_POSITIONS:
        raise SliceGeometryError(f"grid position {position} outside 0..{N_POSITIONS - 1}")
    return divmod(position, GRID_COLS)


def rc_to_position(row: int, col: int) -> int:
    if not (0 <= row < GRID_ROWS and 0 <= col < GRID_COLS):
        raise SliceGeometryError(f"grid cell ({row}, {col}) outside the 3x4 slice")
    return row * GRID_COLS + col


def relative_class_of(anchor_position: int, neighbor_position: int) -> int:
    ar, ac = position_to_rc(anchor_position)
    nr, nc = position_to_rc(neighbor_position)
    delta = (nr - ar, nc - ac)
    if delta not in _DELTA_TO_CLASS:
        raise SliceGeometryError(
            f"positions {anchor_position} and {neighbor_position} are not 8-adjacent")
    return _DELTA_TO_CLASS[delta]


@dataclass
class PatchPair:
    """An anchor/neighbor pair with its compass label.

    Indices address rows of the per-bag feature matrix (one row per
    instance), so pairs stay valid however the caller extracted features.
    """

    anchor_index: int
    neighbor_index: int
    anchor_position: int
    neighbor_position: int
    relative_class: int


def build_pairs(slice_items) -> list[PatchPair]:
    """All 16 anchor/neighbor pairs of one complete slice.

    `slice_items` is a sequence of (feature_row_index, grid_position)
    covering each of the 12 positions exactly once.
    """
    items = list(slice_items)
    by_position = {pos: idx for idx, pos in items}
    if len(items) != N_POSITIONS or sorted(by_position) != list(range(N_POSITIONS)):
        raise SliceGeometryError(
            f"slice must cover positions 0..{N_POSITIONS - 1} exactly once, "
            f"got positions {sorted(pos for _, pos in items)}")
    pairs = []
    for anchor_pos in ANCHOR_POSITIONS:
        ar, ac = position_to_rc(anchor_pos)
        for cls in range(N_RELATIVE_CLASSES):
            dr, dc = _CLASS_TO_DELTA[cls]
            neighbor_pos = rc_to_position(ar + dr, ac + dc)
            pairs.append(PatchPair(
                anchor_index=by_position[anchor_pos],
                neighbor_index=by_position[neighbor_pos],
                anchor_position=anchor_pos,
                neighbor_position=neighbor_pos,
                relative_class=cls,
            ))
    return pairs


def slices_from_bag(bag) -> list[list[tuple[int, int]]]:
    """Group a bag's instances into complete slices.

    Returns one (feature_row_index, grid_position) list per slice that
    covers the full grid with metadata-valid instances; incomplete slices
    and virtual-bag members are skipped.
    """
    groups: dict[int, list[tuple[int, int]]] = {}
    for idx, inst in enumerate(bag.instances):
        if not inst.metadata_valid:
            continue
        groups.setdefault(inst.slice_index, []).append((idx, inst.grid_position))
    slices = []
    for slice_index in sorted(groups):
        items = groups[slice_index]
        if len(items) == N_POSITIONS and sorted(p for _, p in items) == list(range(N_POSITIONS)):
            slices.append(sorted(items, key=lambda ip: ip[1]))
    return slices


# -- heads ----------------------------------------------------------------


@dataclass
class SslHead:
    """Two fully connected layers; ReLU between them."""

    fc1: LayerParams
    fc2: LayerParams

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.fc1.parameters() + self.fc2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return forward_layer(forward_layer(x, self.fc1), self.fc2)


def build_ssl_head(rng: np.random.Generator, name: str, in_dim: int, hidden: int,
                   out_dim: int, dtype=np.float32) -> SslHead:
    return SslHead(
        fc1=fc_layer(rng, f"{name}.fc1", in_dim, hidden, activation="relu", dtype=dtype),
        fc2=fc_layer(rng, f"{name}.fc2", hidden, out_dim, activation=None, dtype=dtype),
    )


# -- losses -----------------------------------------------------------------


def _cross_entropy_sum(logits: Tensor, classes: np.ndarray) -> Tensor:
    log_probs = T.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(classes)), classes] = 1.0
    return T.scale(T.tsum(T.mul(log_probs, onehot)), -1.0)


def relative_loss(pairs_per_slice, features: Tensor, head: SslHead) -> Tensor:
    """Mean over slices of the 16-pair cross-entropy sum."""
    slices = list(pairs_per_slice)
    if not slices:
        raise ContractError("relative_loss needs at least one slice of pairs")
    anchors, neighbors, classes = [], [], []
    for pairs in slices:
        for pair in pairs:
            anchors.append(pair.anchor_index)
            neighbors.append(pair.neighbor_index)
            classes.append(pair.relative_class)
    fa = T.gather_rows(features, anchors)
    fn = T.gather_rows(features, neighbors)
    logits = head(T.concat([fa, fn], axis=1))
    return T.scale(_cross_entropy_sum(logits, np.asarray(classes)), 1.0 / len(slices))


def absolute_loss(slices, features: Tensor, head: SslHead) -> Tensor:
    """Mean over slices of the 12-patch cross-entropy sum."""
    slices = list(slices)
    if not slices:
        raise ContractError("absolute_loss needs at least one slice")
    rows, classes = [], []
    for items in slices:
        if len(items) != N_POSITIONS:
            raise SliceGeometryError(f"absolute_loss needs {N_POSITIONS} patches per slice")
        for idx, pos in items:
            rows.append(idx)
            classes.append(pos)
    logits = head(T.gather_rows(features, rows))
    return T.scale(_cross_entropy_sum(logits, np.asarray(classes)), 1.0 / len(slices))


def total_loss(l_mil, l_ssl, mu: float):
    """Weighted combination (l_mil + mu * l_ssl) / (1 + mu)."""
    if mu <= 0:
        raise ContractError(f"mu must be positive, got {mu}")
    if isinstance(l_mil, Tensor) or isinstance(l_ssl, Tensor):
        l_mil = l_mil if isinstance(l_mil, Tensor) else Tensor(np.asarray(l_mil))
        l_ssl = l_ssl if isinstance(l_ssl, Tensor) else Tensor(np.asarray(l_ssl))
        return T.scale(T.add(l_mil, T.scale(l_ssl, mu)), 1.0 / (1.0 + mu))
    return (l_mil + mu * l_ssl) / (1.0 + mu)
