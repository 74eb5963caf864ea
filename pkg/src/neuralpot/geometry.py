"""Periodic-box geometry: minimum image, neighbor lists, molecule displacements.

All boxes are orthorhombic. Displacements follow the minimum-image
convention, mapping each component into [-L/2, L/2). Neighbor lists are
directed (both orientations of every pair appear) and sorted by
(destination, source) so downstream segment reductions see contiguous
destination blocks and results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Orthorhombic periodic cell with edge lengths in angstrom."""

    lengths: np.ndarray

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64).reshape(3)
        if np.any(lengths <= 0):
            raise ValueError(f"box lengths must be positive, got {lengths}")
        object.__setattr__(self, "lengths", lengths)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def check_cutoff(self, cutoff: float) -> None:
        """Minimum image is only unambiguous for cutoffs up to half the box."""
        if cutoff <= 0:
            raise ValueError(f"cutoff must be positive, got {cutoff}")
        half = float(self.lengths.min()) / 2.0
        if cutoff > half:
            raise ValueError(
                f"cutoff {cutoff} exceeds half the shortest box edge ({half}); "
                "minimum-image pair distances would be ambiguous")


def minimum_image(disp: np.ndarray, box: Box) -> np.ndarray:
    """Map displacement components into [-L/2, L/2)."""
    d = np.asarray(disp, dtype=np.float64)
    L = box.lengths
    return d - L * np.floor(d / L + 0.5)


def wrap_positions(positions: np.ndarray, box: Box) -> np.ndarray:
    """Map coordinates into [0, L)."""
    x = np.asarray(positions, dtype=np.float64)
    L = box.lengths
    return x - L * np.floor(x / L)


@dataclass
class EdgeList:
    """Directed neighbor edges within a cutoff.

    vec[k] points from the destination atom to the source atom (minimum
    image), so summing unit(vec) over a destination's incoming edges gives
    directions toward its neighbors.
    """

    src: np.ndarray
    dst: np.ndarray
    vec: np.ndarray
    dist: np.ndarray
    num_nodes: int
    cutoff: float = field(default=0.0)

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def as_pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def _sorted_edges(src, dst, vec, n, cutoff) -> EdgeList:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    vec = np.asarray(vec, dtype=np.float64).reshape(-1, 3)
    order = np.lexsort((src, dst))
    src, dst, vec = src[order], dst[order], vec[order]
    return EdgeList(src=src, dst=dst, vec=vec,
                    dist=np.sqrt(np.sum(vec * vec, axis=1)),
                    num_nodes=n, cutoff=cutoff)


def _all_pairs_edges(positions: np.ndarray, box: Box, cutoff: float) -> EdgeList:
    n = positions.shape[0]
    diff = positions[None, :, :] - positions[:, None, :]  # [dst, src, 3]
    diff = minimum_image(diff, box)
    d2 = np.sum(diff * diff, axis=-1)
    np.fill_diagonal(d2, np.inf)
    dst, src = np.nonzero(d2 < cutoff * cutoff)
    return _sorted_edges(src, dst, diff[dst, src], n, cutoff)


def _cell_list_edges(positions: np.ndarray, box: Box, cutoff: float,
                     ncells: np.ndarray) -> EdgeList:
    n = positions.shape[0]
    wrapped = wrap_positions(positions, box)
    frac = wrapped / box.lengths
    cell = np.minimum((frac * ncells).astype(np.int64), ncells - 1)
    flat = (cell[:, 0] * ncells[1] + cell[:, 1]) * ncells[2] + cell[:, 2]
    ncell_total = int(np.prod(ncells))

    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    counts = np.bincount(sorted_flat, minlength=ncell_total)
    starts = np.concatenate([[0], np.cumsum(counts)])

    offsets = np.array([(dx, dy, dz)
                        for dx in (-1, 0, 1)
                        for dy in (-1, 0, 1)
                        for dz in (-1, 0, 1)], dtype=np.int64)

    src_parts, dst_parts, vec_parts = [], [], []
    occupied = np.nonzero(counts)[0]
    for c in occupied:
        cx, cy = divmod(int(c), int(ncells[1] * ncells[2]))
        cy, cz = divmod(cy, int(ncells[2]))
        here = order[starts[c]:starts[c + 1]]

        neigh_cells = (np.array([cx, cy, cz]) + offsets) % ncells
        neigh_flat = (neigh_cells[:, 0] * ncells[1] + neigh_cells[:, 1]) * ncells[2] \
            + neigh_cells[:, 2]
        cand = np.concatenate([order[starts[f]:starts[f + 1]]
                               for f in np.unique(neigh_flat)])

        diff = minimum_image(wrapped[cand][None, :, :] - wrapped[here][:, None, :], box)
        d2 = np.sum(diff * diff, axis=-1)
        within = d2 < cutoff * cutoff
        within &= cand[None, :] != here[:, None]
        di, sj = np.nonzero(within)
        if di.size:
            dst_parts.append(here[di])
            src_parts.append(cand[sj])
            vec_parts.append(diff[di, sj])

    if not src_parts:
        empty = np.zeros(0, dtype=np.int64)
        return EdgeList(src=empty, dst=empty.copy(), vec=np.zeros((0, 3)),
                        dist=np.zeros(0), num_nodes=n, cutoff=cutoff)
    return _sorted_edges(np.concatenate(src_parts), np.concatenate(dst_parts),
                         np.concatenate(vec_parts), n, cutoff)


def build_neighbor_list(positions: np.ndarray, box: Box, cutoff: float) -> EdgeList:
    """All directed pairs with minimum-image distance strictly below cutoff.

    Uses a linked-cell decomposition when the box is at least three cells
    wide in every direction; otherwise falls back to the vectorised
    all-pairs route (identical output). Requires cutoff <= min(L)/2.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"positions must have shape (n, 3), got {positions.shape}")
    box.check_cutoff(cutoff)
    ncells = np.floor(box.lengths / cutoff).astype(np.int64)
    if np.all(ncells >= 3):
        return _cell_list_edges(positions, box, cutoff, ncells)
    return _all_pairs_edges(positions, box, cutoff)


def intra_molecule_displacements(positions: np.ndarray, box: Box,
                                 mol_of_atom: np.ndarray,
                                 atom: int) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-image displacements from one atom to its molecule partners.

    Returns (partner_indices, disp) with partners in ascending index order
    and disp[k] = minimum_image(x_partner - x_atom). The atom itself is
    excluded.
    """
    mol_of_atom = np.asarray(mol_of_atom)
    n = positions.shape[0]
    if not (0 <= atom < n):
        raise IndexError(f"atom {atom} out of range [0, {n})")
    partners = np.nonzero(mol_of_atom == mol_of_atom[atom])[0]
    partners = partners[partners != atom]
    disp = minimum_image(positions[partners] - positions[atom], box)
    return partners, disp
