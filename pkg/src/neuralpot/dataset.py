"""Frame containers, text serialization, splits, and pretext sample assembly.

Frames are stored in an extended-xyz-style text format: a count line, a
header line of key="value" pairs (orthorhombic lattice, column layout,
optional energy), then one line per atom. Floats are written with %.17g so
a save/load round trip reproduces every float64 bit for bit. Files ending
in .gz are transparently gzip-compressed.
"""

from __future__ import annotations

import gzip
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import Box, EdgeList, build_neighbor_list, minimum_image

_SYMBOL_OF = {1: "H", 6: "C", 7: "N", 8: "O", 18: "Ar"}
_NUMBER_OF = {v: k for k, v in _SYMBOL_OF.items()}

OXYGEN = 8
HYDROGEN = 1


@dataclass(frozen=True)
class MoleculeTopology:
    """Partition of atoms into molecules plus a hydrogen marker per atom."""

    mol_of_atom: np.ndarray
    members: tuple[np.ndarray, ...]
    is_hydrogen: np.ndarray

    @property
    def num_molecules(self) -> int:
        return len(self.members)

    def validate_water(self, species: np.ndarray) -> None:
        """Every molecule must be one oxygen with exactly two hydrogens."""
        for m, atoms in enumerate(self.members):
            z = np.sort(species[atoms])
            if not np.array_equal(z, [1, 1, 8]):
                raise ValueError(f"molecule {m} is not a water molecule "
                                 f"(species {z.tolist()})")


def topology_from_arrays(mol_of_atom: np.ndarray,
                         species: np.ndarray) -> MoleculeTopology:
    mol_of_atom = np.asarray(mol_of_atom, dtype=np.int64)
    species = np.asarray(species, dtype=np.int64)
    if mol_of_atom.shape != species.shape:
        raise ValueError("mol_of_atom and species must have matching shapes")
    ids = np.unique(mol_of_atom)
    if ids.size and not np.array_equal(ids, np.arange(ids.size)):
        raise ValueError("molecule ids must be contiguous starting at 0")
    members = tuple(np.nonzero(mol_of_atom == m)[0] for m in ids)
    return MoleculeTopology(mol_of_atom=mol_of_atom, members=members,
                            is_hydrogen=species == HYDROGEN)


@dataclass
class AtomicFrame:
    """One configuration: positions in angstrom plus optional labels.

    energy is in meV and forces in meV/angstrom when the frame carries
    training labels; both may be None for unlabeled configurations.
    """

    positions: np.ndarray
    species: np.ndarray
    mol_of_atom: np.ndarray
    box_lengths: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    # (cutoff, EdgeList) memo filled by collate_frames; stale if positions
    # are mutated in place, so treat frames as immutable once collated
    _edge_cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.species = np.asarray(self.species, dtype=np.int64)
        self.mol_of_atom = np.asarray(self.mol_of_atom, dtype=np.int64)
        self.box_lengths = np.asarray(self.box_lengths, dtype=np.float64).reshape(3)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.species.shape != (n,) or self.mol_of_atom.shape != (n,):
            raise ValueError("species and mol_of_atom must match the atom count")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise ValueError(f"forces must be (n, 3), got {self.forces.shape}")

    @property
    def num_atoms(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_molecules(self) -> int:
        return int(self.mol_of_atom.max()) + 1 if self.num_atoms else 0

    @property
    def box(self) -> Box:
        return Box(self.box_lengths)

    @property
    def topology(self) -> MoleculeTopology:
        return topology_from_arrays(self.mol_of_atom, self.species)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


_HEADER_RE = re.compile(r'(\S+)=("[^"]*"|\S+)')


def _parse_header(line: str) -> dict[str, str]:
    return {k: v.strip('"') for k, v in _HEADER_RE.findall(line)}


def save_frames(path, frames: Sequence[AtomicFrame]) -> None:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt") as fh:
        for frame in frames:
            L = frame.box_lengths
            lattice = " ".join(_fmt(v) for v in
                               (L[0], 0, 0, 0, L[1], 0, 0, 0, L[2]))
            cols = "species:S:1:pos:R:3:mol:I:1"
            if frame.forces is not None:
                cols += ":forces:R:3"
            header = f'Lattice="{lattice}" Properties={cols}'
            if frame.energy is not None:
                header += f" energy={_fmt(frame.energy)}"
            fh.write(f"{frame.num_atoms}\n{header}\n")
            for i in range(frame.num_atoms):
                z = int(frame.species[i])
                parts = [_SYMBOL_OF.get(z, str(z))]
                parts += [_fmt(v) for v in frame.positions[i]]
                parts.append(str(int(frame.mol_of_atom[i])))
                if frame.forces is not None:
                    parts += [_fmt(v) for v in frame.forces[i]]
                fh.write(" ".join(parts) + "\n")


def _parse_species(token: str) -> int:
    if token in _NUMBER_OF:
        return _NUMBER_OF[token]
    try:
        return int(token)
    except ValueError:
        raise ValueError(f"unknown species symbol {token!r}") from None


class FrameParseError(ValueError):
    """Raised with the offending frame index and 1-based line number."""

    def __init__(self, frame: int, line: int, message: str):
        super().__init__(f"frame {frame}, line {line}: {message}")
        self.frame = frame
        self.line = line


def load_frames(path) -> list[AtomicFrame]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    frames: list[AtomicFrame] = []
    with opener(path, "rt") as fh:
        lines = fh.read().splitlines()
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        fi = len(frames)
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise FrameParseError(fi, pos + 1, "expected an atom count") from None
        if pos + 2 + n > len(lines):
            raise FrameParseError(fi, pos + 1,
                                  f"file ends before {n} atom lines")
        header = _parse_header(lines[pos + 1])
        try:
            lattice = np.array([float(v) for v in
                                header["Lattice"].split()]).reshape(3, 3)
        except (KeyError, ValueError):
            raise FrameParseError(fi, pos + 2, "missing or malformed Lattice") from None
        if np.any(lattice - np.diag(np.diag(lattice)) != 0):
            raise FrameParseError(fi, pos + 2,
                                  "only orthorhombic lattices are supported")
        cols = header.get("Properties", "").split(":")
        if len(cols) % 3:
            raise FrameParseError(fi, pos + 2, "malformed Properties entry")
        fields = [(cols[i], cols[i + 1], int(cols[i + 2]))
                  for i in range(0, len(cols), 3)]
        energy = float(header["energy"]) if "energy" in header else None

        species = np.zeros(n, dtype=np.int64)
        positions = np.zeros((n, 3))
        mol = np.zeros(n, dtype=np.int64)
        forces = np.zeros((n, 3)) if any(f[0] == "forces" for f in fields) else None
        width_total = sum(w for _, _, w in fields)
        for i in range(n):
            lineno = pos + 3 + i
            toks = lines[pos + 2 + i].split()
            if len(toks) < width_total:
                raise FrameParseError(fi, lineno,
                                      f"expected {width_total} columns, got {len(toks)}")
            c = 0
            try:
                for name, _, width in fields:
                    chunk, c = toks[c:c + width], c + width
                    if name == "species":
                        species[i] = _parse_species(chunk[0])
                    elif name == "pos":
                        positions[i] = [float(v) for v in chunk]
                    elif name == "mol":
                        mol[i] = int(chunk[0])
                    elif name == "forces":
                        forces[i] = [float(v) for v in chunk]
                    # unrecognised columns are skipped
            except ValueError as exc:
                raise FrameParseError(fi, lineno, str(exc)) from None
        frames.append(AtomicFrame(positions=positions, species=species,
                                  mol_of_atom=mol, box_lengths=np.diag(lattice),
                                  energy=energy, forces=forces))
        pos += 2 + n
    return frames


def split_dataset(frames: Sequence[AtomicFrame], seed: int,
                  ) -> tuple[list[AtomicFrame], list[AtomicFrame], list[AtomicFrame]]:
    """Shuffle and split into (train, val, test).

    A tenth of the frames (at least one) is held out for testing, then a
    tenth of the remainder (at least one) for validation. Needs >= 3 frames.
    """
    n = len(frames)
    if n < 3:
        raise ValueError(f"need at least 3 frames to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, n // 10)
    n_val = max(1, (n - n_test) // 10)
    test = [frames[i] for i in order[:n_test]]
    val = [frames[i] for i in order[n_test:n_test + n_val]]
    train = [frames[i] for i in order[n_test + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# pretext samples

@dataclass
class MaskedSample:
    """A frame with some hydrogens hidden and their layout as the target.

    Each selected molecule has one hydrogen moved onto its oxygen (the
    anchor); the targets are the minimum-image displacements from the
    hydrogen's true position to every other atom of the same molecule.
    """

    frame: AtomicFrame
    input_positions: np.ndarray
    mask_flag: np.ndarray          # (n,) 1.0 on masked atoms
    masked_atoms: np.ndarray       # (m,)
    target_vec: np.ndarray         # (K, 3)
    target_masked: np.ndarray      # (K,) masked atom index per target row
    target_partner: np.ndarray     # (K,) partner atom index per target row


def _anchor_position(frame: AtomicFrame, members: np.ndarray, atom: int,
                     oxygens: np.ndarray, anchor: str) -> np.ndarray:
    if anchor == "oxygen":
        return frame.positions[oxygens[0]]
    if anchor == "centroid":
        visible = members[members != atom]
        ref = frame.positions[visible[0]]
        rel = minimum_image(frame.positions[visible] - ref, frame.box)
        return ref + rel.mean(axis=0)
    raise ValueError(f"anchor must be 'oxygen' or 'centroid', got {anchor!r}")


def make_masked_sample(frame: AtomicFrame, mask_ratio: float,
                       rng: np.random.Generator,
                       anchor: str = "oxygen") -> MaskedSample:
    """Hide one hydrogen in ceil(ratio * M) molecules, uniformly chosen.

    The hidden atom stays in the graph but is relocated to an anchor
    (its molecule's oxygen, or the centroid of the visible atoms). Targets
    are computed from true coordinates before the relocation. Molecules
    without a hydrogen are skipped with a warning; oxygens are never masked.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    if anchor not in ("oxygen", "centroid"):
        raise ValueError(f"anchor must be 'oxygen' or 'centroid', got {anchor!r}")
    n_mol = frame.num_molecules
    m = math.ceil(mask_ratio * n_mol)
    chosen = np.sort(rng.choice(n_mol, size=m, replace=False))

    box = frame.box
    input_positions = frame.positions.copy()
    mask_flag = np.zeros(frame.num_atoms)
    masked, rows_vec, rows_masked, rows_partner = [], [], [], []

    for mol in chosen:
        members = np.nonzero(frame.mol_of_atom == mol)[0]
        hydrogens = members[frame.species[members] == HYDROGEN]
        oxygens = members[frame.species[members] == OXYGEN]
        if hydrogens.size == 0 or (anchor == "oxygen" and oxygens.size == 0):
            warnings.warn(f"molecule {mol} has no hydrogen to mask "
                          "(or no oxygen anchor); skipping", stacklevel=2)
            continue
        atom = int(rng.choice(hydrogens))
        masked.append(atom)
        mask_flag[atom] = 1.0
        input_positions[atom] = _anchor_position(frame, members, atom,
                                                 oxygens, anchor)
        partners = members[members != atom]
        disp = minimum_image(frame.positions[partners] - frame.positions[atom], box)
        rows_vec.append(disp)
        rows_masked.append(np.full(partners.size, atom, dtype=np.int64))
        rows_partner.append(partners)

    return MaskedSample(
        frame=frame,
        input_positions=input_positions,
        mask_flag=mask_flag,
        masked_atoms=np.array(masked, dtype=np.int64),
        target_vec=(np.concatenate(rows_vec, axis=0) if rows_vec
                    else np.zeros((0, 3))),
        target_masked=(np.concatenate(rows_masked) if rows_masked
                       else np.zeros(0, dtype=np.int64)),
        target_partner=(np.concatenate(rows_partner) if rows_partner
                        else np.zeros(0, dtype=np.int64)),
    )


@dataclass
class NoisedSample:
    """A frame with Gaussian-perturbed coordinates; the noise is the target."""

    frame: AtomicFrame
    input_positions: np.ndarray
    noise: np.ndarray
    sigma: float


def make_noised_sample(frame: AtomicFrame, sigma: float,
                       rng: np.random.Generator) -> NoisedSample:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    noise = rng.normal(0.0, sigma, size=frame.positions.shape)
    return NoisedSample(frame=frame, input_positions=frame.positions + noise,
                        noise=noise, sigma=sigma)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """Several frames merged into one disjoint graph."""

    positions: np.ndarray
    species: np.ndarray
    mol_of_atom: np.ndarray
    frame_of_atom: np.ndarray
    num_frames: int
    box: Box
    edges: EdgeList
    energy: np.ndarray | None = None      # (num_frames,)
    forces: np.ndarray | None = None      # (num_atoms, 3)
    mask_flag: np.ndarray | None = None
    target_vec: np.ndarray | None = None
    target_masked: np.ndarray | None = None
    target_partner: np.ndarray | None = None
    noise: np.ndarray | None = None
    sigma: float | None = None

    @property
    def num_atoms(self) -> int:
        return int(self.positions.shape[0])


def _shared_box(frames: Sequence[AtomicFrame]) -> Box:
    first = frames[0].box_lengths
    for f in frames[1:]:
        if not np.array_equal(f.box_lengths, first):
            raise ValueError("all frames in a batch must share one box")
    return Box(first)


def _merge(frames: Sequence[AtomicFrame], positions_of, cutoff: float):
    box = _shared_box(frames)
    pos_parts, edge_src, edge_dst, edge_vec = [], [], [], []
    species, mol, frame_of_atom = [], [], []
    atom_off = mol_off = 0
    for fi, frame in enumerate(frames):
        pos = positions_of(fi, frame)
        # the graph over a frame's own coordinates is the same every epoch;
        # corrupted inputs (pos is a fresh array then) are never memoized
        if pos is frame.positions:
            if frame._edge_cache is None or frame._edge_cache[0] != cutoff:
                frame._edge_cache = (cutoff, build_neighbor_list(pos, box, cutoff))
            nl = frame._edge_cache[1]
        else:
            nl = build_neighbor_list(pos, box, cutoff)
        pos_parts.append(pos)
        edge_src.append(nl.src + atom_off)
        edge_dst.append(nl.dst + atom_off)
        edge_vec.append(nl.vec)
        species.append(frame.species)
        mol.append(frame.mol_of_atom + mol_off)
        frame_of_atom.append(np.full(frame.num_atoms, fi, dtype=np.int64))
        atom_off += frame.num_atoms
        mol_off += frame.num_molecules
    vec = np.concatenate(edge_vec, axis=0)
    edges = EdgeList(src=np.concatenate(edge_src), dst=np.concatenate(edge_dst),
                     vec=vec, dist=np.sqrt(np.sum(vec * vec, axis=1)),
                     num_nodes=atom_off, cutoff=cutoff)
    return (np.concatenate(pos_parts, axis=0), np.concatenate(species),
            np.concatenate(mol), np.concatenate(frame_of_atom), box, edges)


def collate_frames(frames: Sequence[AtomicFrame], cutoff: float) -> Batch:
    """Merge labeled frames for supervised energy/force training."""
    pos, species, mol, foa, box, edges = _merge(
        frames, lambda fi, f: f.positions, cutoff)
    energy = None
    if all(f.energy is not None for f in frames):
        energy = np.array([f.energy for f in frames])
    forces = None
    if all(f.forces is not None for f in frames):
        forces = np.concatenate([f.forces for f in frames], axis=0)
    return Batch(positions=pos, species=species, mol_of_atom=mol,
                 frame_of_atom=foa, num_frames=len(frames), box=box,
                 edges=edges, energy=energy, forces=forces)


def collate_masked(samples: Sequence[MaskedSample], cutoff: float) -> Batch:
    """Merge masked samples; the graph is built from the corrupted positions."""
    frames = [s.frame for s in samples]
    pos, species, mol, foa, box, edges = _merge(
        frames, lambda fi, f: samples[fi].input_positions, cutoff)
    offsets = np.cumsum([0] + [f.num_atoms for f in frames[:-1]])
    return Batch(positions=pos, species=species, mol_of_atom=mol,
                 frame_of_atom=foa, num_frames=len(frames), box=box, edges=edges,
                 mask_flag=np.concatenate([s.mask_flag for s in samples]),
                 target_vec=np.concatenate([s.target_vec for s in samples], axis=0),
                 target_masked=np.concatenate(
                     [s.target_masked + off for s, off in zip(samples, offsets)]),
                 target_partner=np.concatenate(
                     [s.target_partner + off for s, off in zip(samples, offsets)]))


def collate_noised(samples: Sequence[NoisedSample], cutoff: float) -> Batch:
    """Merge noised samples; the graph is built from the perturbed positions."""
    frames = [s.frame for s in samples]
    sigmas = {s.sigma for s in samples}
    if len(sigmas) != 1:
        raise ValueError("all noised samples in a batch must share one sigma")
    pos, species, mol, foa, box, edges = _merge(
        frames, lambda fi, f: samples[fi].input_positions, cutoff)
    return Batch(positions=pos, species=species, mol_of_atom=mol,
                 frame_of_atom=foa, num_frames=len(frames), box=box, edges=edges,
                 noise=np.concatenate([s.noise for s in samples], axis=0),
                 sigma=sigmas.pop())


def iter_batches(num_items: int, batch_size: int,
                 rng: np.random.Generator | None = None,
                 drop_last: bool = False) -> Iterator[np.ndarray]:
    """Yield index arrays covering the dataset, shuffled when an rng is given."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(num_items) if rng is not None else np.arange(num_items)
    for start in range(0, num_items, batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and chunk.size < batch_size:
            return
        yield chunk


def strip_labels(frame: AtomicFrame) -> AtomicFrame:
    """Copy of a frame without energy and force labels."""
    return replace(frame, energy=None, forces=None)
