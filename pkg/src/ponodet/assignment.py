"""Anchor-to-object assignment and the dense training maps.

The assignment clusters every anchor cell to the same-class object it
overlaps most.  Each cluster is then normalized by its own best overlap,
which guarantees every object at least one anchor with a normalized
overlap of exactly 1 regardless of how coarse the anchor set is.  Labels
come either from thresholding that normalized map, from thresholding raw
overlap, or from the ambiguity-managed product with the predicted-box
overlap map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorGrid
from .geometry import decode_cxywh, iou_cxywh

UNASSIGNED = -1


@dataclass(frozen=True)
class GroundTruth:
    """Scene annotation: one box and one class id per object."""

    boxes: list
    class_ids: list

    def __post_init__(self):
        if len(self.boxes) != len(self.class_ids):
            raise ValueError("boxes and class_ids must have equal length")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class AssignmentMap:
    """Object index per anchor cell, UNASSIGNED where no same-class overlap."""

    gt_index: np.ndarray


@dataclass(frozen=True)
class PonoMap:
    """Per-object normalized overlap in [0, 1]; 0 on unassigned cells."""

    o: np.ndarray


@dataclass(frozen=True)
class PredIoUMap:
    """Overlap between each cell's decoded box and its assigned object."""

    o_hat: np.ndarray


@dataclass(frozen=True)
class LabelMap:
    """Binary classification targets per anchor cell."""

    p: np.ndarray


def _grid_gt_iou(grid: AnchorGrid, gt: GroundTruth) -> np.ndarray:
    """IoU between every anchor cell and every object, [h, w, nc, na, n_gt];
    objects of a different class score 0."""
    n = len(gt)
    out = np.zeros(grid.boxes.shape[:4] + (n,), dtype=np.float64)
    if n == 0:
        return out
    b = grid.boxes
    for k, (box, cid) in enumerate(zip(gt.boxes, gt.class_ids)):
        v = iou_cxywh(b[..., cid, :, 0], b[..., cid, :, 1],
                      b[..., cid, :, 2], b[..., cid, :, 3],
                      box.cx, box.cy, box.w, box.h)
        out[:, :, cid, :, k] = v
    return out


def assign_ao(grid: AnchorGrid, gt: GroundTruth) -> AssignmentMap:
    """Cluster anchor cells to objects by maximum same-class overlap.

    Ties break toward the lowest object index; cells with no positive
    same-class overlap stay unassigned.  If the argmax pass leaves an
    object with an empty cluster (all its overlapping cells were won by
    other objects), the object claims its single best-overlap cell so
    that no object is ever left without an anchor.
    """
    overlaps = _grid_gt_iou(grid, gt)
    if len(gt) == 0:
        return AssignmentMap(np.full(grid.boxes.shape[:4], UNASSIGNED, dtype=np.int64))
    idx = np.argmax(overlaps, axis=-1)
    best = np.take_along_axis(overlaps, idx[..., None], axis=-1)[..., 0]
    gt_index = np.where(best > 0.0, idx, UNASSIGNED).astype(np.int64)

    # Coverage repair: an object whose cluster came out empty claims its
    # best cell.  Claimed cells are reserved (never re-stolen), so every
    # object is repaired at most once and the pass terminates.
    counts = np.bincount(gt_index[gt_index != UNASSIGNED], minlength=len(gt))
    reserved = np.zeros(gt_index.shape, dtype=bool)
    queue = [k for k in range(len(gt)) if counts[k] == 0]
    while queue:
        k = queue.pop(0)
        if counts[k] > 0:
            continue
        ov = np.where(reserved, -1.0, overlaps[..., k])
        cell = np.unravel_index(np.argmax(ov), gt_index.shape)
        if ov[cell] <= 0.0:
            continue  # no free overlapping cell exists for this object
        prev = gt_index[cell]
        gt_index[cell] = k
        reserved[cell] = True
        counts[k] += 1
        if prev != UNASSIGNED:
            counts[prev] -= 1
            if counts[prev] == 0:
                queue.append(int(prev))
    return AssignmentMap(gt_index)


def ao_map(grid: AnchorGrid, gt: GroundTruth,
           assignment: AssignmentMap) -> np.ndarray:
    """Raw overlap between each cell and its assigned object (0 if none)."""
    overlaps = _grid_gt_iou(grid, gt)
    gi = assignment.gt_index
    if len(gt) == 0:
        return np.zeros(gi.shape, dtype=np.float64)
    vals = np.take_along_axis(overlaps, np.maximum(gi, 0)[..., None], axis=-1)[..., 0]
    return np.where(gi == UNASSIGNED, 0.0, vals)


def compute_pono(grid: AnchorGrid, gt: GroundTruth,
                 assignment: AssignmentMap) -> PonoMap:
    """Divide each cluster's overlaps by the cluster maximum.

    Assigned cells have positive overlap, so the division is always well
    defined and the maximal cell of every cluster lands exactly on 1.0.
    """
    raw = ao_map(grid, gt, assignment)
    o = np.zeros_like(raw)
    gi = assignment.gt_index
    for k in range(len(gt)):
        cluster = gi == k
        if np.any(cluster):
            o[cluster] = raw[cluster] / raw[cluster].max()
    return PonoMap(o)


def gt_cell_arrays(grid: AnchorGrid, gt: GroundTruth,
                   assignment: AssignmentMap):
    """Per-cell assigned-object box components plus the assigned mask.

    Unassigned cells carry unit dummy boxes; mask them out after any
    computation.  Returns (cx, cy, w, h, mask) arrays shaped like the grid.
    """
    gi = assignment.gt_index
    shape = gi.shape
    comps = [np.ones(shape), np.ones(shape), np.ones(shape), np.ones(shape)]
    mask = (gi != UNASSIGNED).astype(np.float64)
    if len(gt) > 0:
        table = np.asarray([[b.cx, b.cy, b.w, b.h] for b in gt.boxes])
        safe = np.maximum(gi, 0)
        picked = table[safe]
        for d in range(4):
            comps[d] = np.where(gi == UNASSIGNED, comps[d], picked[..., d])
    return comps[0], comps[1], comps[2], comps[3], mask


def pred_iou_values(grid: AnchorGrid, offsets, gt_arrays):
    """Overlap of decoded boxes with assigned objects; generic over
    ndarray/Tensor offsets ([h, w, nc, na, 4])."""
    gcx, gcy, gw, gh, mask = gt_arrays
    b = grid.boxes
    cx, cy, w, h = decode_cxywh(b[..., 0], b[..., 1], b[..., 2], b[..., 3],
                                offsets[..., 0], offsets[..., 1],
                                offsets[..., 2], offsets[..., 3])
    return iou_cxywh(cx, cy, w, h, gcx, gcy, gw, gh) * mask


def pred_iou_map(grid: AnchorGrid, offsets: np.ndarray, gt: GroundTruth,
                 assignment: AssignmentMap) -> PredIoUMap:
    if offsets.shape != grid.boxes.shape:
        raise ValueError(f"offsets shape {offsets.shape} does not match grid {grid.boxes.shape}")
    arrays = gt_cell_arrays(grid, gt, assignment)
    return PredIoUMap(np.asarray(pred_iou_values(grid, offsets, arrays)))


def ams_labels(o: PonoMap, o_hat: PredIoUMap, threshold: float = 0.5) -> LabelMap:
    """Positive where normalized overlap times predicted overlap beats the
    threshold.  The predicted map is used as plain data: no gradient is ever
    taken through label computation."""
    return LabelMap(((o.o * np.asarray(o_hat.o_hat)) > threshold).astype(np.uint8))


def pono_labels(o: PonoMap, threshold: float = 0.5) -> LabelMap:
    """Positive where normalized overlap alone beats the threshold."""
    return LabelMap((o.o > threshold).astype(np.uint8))


def threshold_labels(values: np.ndarray, threshold: float = 0.5) -> LabelMap:
    """Positive where a raw overlap map beats the threshold (baseline rule)."""
    return LabelMap((values > threshold).astype(np.uint8))
