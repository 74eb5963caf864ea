"""Classical MD generator for synthetic labeled datasets.

Systems are flexible water (harmonic bonds and angles, point charges,
oxygen Lennard-Jones) or plain Lennard-Jones clusters. Nonbonded terms are
truncated at the cutoff and shifted so the pair energy is zero there,
which keeps the emitted energy labels exactly consistent with the force
labels: forces are the analytic negative gradient of the energy actually
evaluated, not of some ideal untruncated model.

Internal units: angstrom, femtosecond, amu, kJ/mol. One amu * A^2 / fs^2
is exactly 1e4 kJ/mol, hence the 1e-4 factor converting force/mass into
acceleration. Emitted frame labels are converted to meV and meV/A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import AtomicFrame, MoleculeTopology, topology_from_arrays
from .geometry import Box, minimum_image, wrap_positions

KB = 0.008314462618            # kJ/mol/K
COULOMB_K = 1389.35458         # kJ*A/mol/e^2
ACC_UNIT = 1e-4                # (A/fs^2) per (kJ/mol/A / amu)
KJMOL_TO_MEV = 1000.0 / 96.48533212331

MASS_OF = {1: 1.008, 8: 15.999, 18: 39.948}


class SingularityError(RuntimeError):
    """Two nonbonded atoms closer than the hard floor."""


class BlowUpError(RuntimeError):
    """Integration became unstable (excessive per-step displacement)."""


@dataclass(frozen=True)
class ForceField:
    lj_eps: dict[int, float]        # kJ/mol per species
    lj_sigma: dict[int, float]      # A per species
    charge: dict[int, float]        # e per species
    bond_k: float                   # kJ/mol/A^2, E = k/2 (r - r0)^2
    bond_r0: float                  # A
    angle_k: float                  # kJ/mol/rad^2, E = k/2 (theta - theta0)^2
    angle_theta0: float             # rad
    cutoff: float                   # A
    coulomb_k: float = COULOMB_K

    def __post_init__(self):
        if any(v < 0 for v in self.lj_eps.values()):
            raise ValueError("lj_eps must be non-negative")
        if any(v <= 0 for v in self.lj_sigma.values()):
            raise ValueError("lj_sigma must be positive")
        if self.bond_k < 0 or self.angle_k < 0:
            raise ValueError("force constants must be non-negative")
        if self.bond_r0 <= 0:
            raise ValueError("bond_r0 must be positive")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")


def water_forcefield(cutoff: float = 10.0, **overrides) -> ForceField:
    """Flexible water with Tip3p-like nonbonded parameters.

    The bond and angle stiffness are softer than a real OH stretch so the
    fastest period stays well above a 2 fs step.
    """
    params = dict(
        lj_eps={8: 0.636, 1: 0.0},
        lj_sigma={8: 3.151, 1: 1.0},
        charge={8: -0.834, 1: 0.417},
        bond_k=2000.0,
        bond_r0=0.9572,
        angle_k=300.0,
        angle_theta0=math.radians(104.52),
        cutoff=cutoff,
    )
    params.update(overrides)
    return ForceField(**params)


def lj_forcefield(cutoff: float = 8.0, eps: float = 0.996,
                  sigma: float = 3.405) -> ForceField:
    """Argon-like single-species Lennard-Jones fluid."""
    return ForceField(lj_eps={18: eps}, lj_sigma={18: sigma}, charge={18: 0.0},
                      bond_k=0.0, bond_r0=1.0, angle_k=0.0, angle_theta0=0.0,
                      cutoff=cutoff)


@dataclass
class MDState:
    positions: np.ndarray       # (n, 3) A, wrapped
    velocities: np.ndarray      # (n, 3) A/fs
    masses: np.ndarray          # (n,) amu
    species: np.ndarray         # (n,)
    box: Box
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.species = np.asarray(self.species, dtype=np.int64)
        if not (np.all(np.isfinite(self.positions))
                and np.all(np.isfinite(self.velocities))):
            raise ValueError("state contains non-finite values")
        self.positions = wrap_positions(self.positions, self.box)


def kinetic_energy(state: MDState) -> float:
    """kJ/mol."""
    v2 = np.sum(state.velocities ** 2, axis=1)
    return float(0.5 * np.sum(state.masses * v2) / ACC_UNIT)


def instantaneous_temperature(state: MDState) -> float:
    n = state.positions.shape[0]
    return 2.0 * kinetic_energy(state) / (3.0 * n * KB)


def maxwell_boltzmann_velocities(masses: np.ndarray, temperature: float,
                                 rng: np.random.Generator) -> np.ndarray:
    """Thermal velocities in A/fs with the drift removed."""
    std = np.sqrt(KB * temperature * ACC_UNIT / masses)
    v = rng.normal(size=(masses.size, 3)) * std[:, None]
    p = (masses[:, None] * v).sum(axis=0)
    return v - p / masses.sum()


# ---------------------------------------------------------------------------
# force field evaluation

def _bonds_and_angles(topo: MoleculeTopology, species: np.ndarray):
    """Water-rule bonded terms: O-H bonds and the H-O-H angle per molecule.

    Single-atom molecules contribute nothing. Cached on the topology object.
    """
    cached = getattr(topo, "_bonded_cache", None)
    if cached is not None:
        return cached
    bonds, angles = [], []
    for atoms in topo.members:
        if atoms.size < 2:
            continue
        oxy = atoms[species[atoms] == 8]
        hyd = atoms[species[atoms] == 1]
        if oxy.size != 1:
            raise ValueError("bonded terms need exactly one oxygen per molecule")
        o = int(oxy[0])
        for h in hyd:
            bonds.append((o, int(h)))
        if hyd.size == 2:
            angles.append((int(hyd[0]), o, int(hyd[1])))
    out = (np.array(bonds, dtype=np.int64).reshape(-1, 2),
           np.array(angles, dtype=np.int64).reshape(-1, 3))
    object.__setattr__(topo, "_bonded_cache", out)
    return out


def _bond_terms(pos, box, bonds, k, r0, forces):
    if bonds.shape[0] == 0 or k == 0.0:
        return 0.0
    d = minimum_image(pos[bonds[:, 0]] - pos[bonds[:, 1]], box)
    r = np.sqrt(np.sum(d * d, axis=1))
    if np.any(r < 1e-12):
        raise SingularityError("bonded pair at zero distance")
    dr = r - r0
    # F_i = -k (r - r0) d_ij / r on the first atom, opposite on the second
    f = (-k * dr / r)[:, None] * d
    np.add.at(forces, bonds[:, 0], f)
    np.add.at(forces, bonds[:, 1], -f)
    return float(0.5 * k * np.sum(dr * dr))


def _angle_terms(pos, box, angles, k, theta0, forces):
    if angles.shape[0] == 0 or k == 0.0:
        return 0.0
    i, j, kk = angles[:, 0], angles[:, 1], angles[:, 2]
    u = minimum_image(pos[i] - pos[j], box)
    v = minimum_image(pos[kk] - pos[j], box)
    nu = np.sqrt(np.sum(u * u, axis=1))
    nv = np.sqrt(np.sum(v * v, axis=1))
    cosang = np.clip(np.sum(u * v, axis=1) / (nu * nv), -1.0, 1.0)
    theta = np.arccos(cosang)
    sin = np.sqrt(np.maximum(1.0 - cosang * cosang, 1e-16))
    uhat, vhat = u / nu[:, None], v / nv[:, None]
    dtheta_di = -(vhat - cosang[:, None] * uhat) / (nu * sin)[:, None]
    dtheta_dk = -(uhat - cosang[:, None] * vhat) / (nv * sin)[:, None]
    coeff = (-k * (theta - theta0))[:, None]
    fi = coeff * dtheta_di
    fk = coeff * dtheta_dk
    np.add.at(forces, i, fi)
    np.add.at(forces, kk, fk)
    np.add.at(forces, j, -(fi + fk))
    return float(0.5 * k * np.sum((theta - theta0) ** 2))


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _half_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    pair = _TRIU_CACHE.get(n)
    if pair is None:
        pair = np.triu_indices(n, k=1)
        _TRIU_CACHE[n] = pair
    return pair


def _nonbonded_terms(pos, box, species, mol_of_atom, ff: ForceField, forces):
    n = pos.shape[0]
    i, j = _half_pairs(n)
    d = minimum_image(pos[j] - pos[i], box)
    r2 = np.einsum("ij,ij->i", d, d)
    keep = (r2 < ff.cutoff * ff.cutoff) & (mol_of_atom[i] != mol_of_atom[j])
    if not np.any(keep):
        return 0.0
    i, j, d, r2 = i[keep], j[keep], d[keep], r2[keep]
    r = np.sqrt(r2)
    if np.min(r) < 1e-6:
        raise SingularityError(
            f"nonbonded pair at r = {np.min(r):.2e} A (overlapping atoms)")

    zs = sorted(ff.lj_eps)
    eps_of = np.zeros(max(zs) + 1)
    sig_of = np.ones(max(zs) + 1)
    q_of = np.zeros(max(zs) + 1)
    for z in zs:
        eps_of[z], sig_of[z] = ff.lj_eps[z], ff.lj_sigma[z]
        q_of[z] = ff.charge[z]
    eps = np.sqrt(eps_of[species[i]] * eps_of[species[j]])
    sig = 0.5 * (sig_of[species[i]] + sig_of[species[j]])
    qq = q_of[species[i]] * q_of[species[j]]

    rc = ff.cutoff
    s6 = (sig * sig / r2) ** 3
    s6c = (sig / rc) ** 6
    e_lj = 4.0 * eps * (s6 * s6 - s6) - 4.0 * eps * (s6c * s6c - s6c)
    dudr_lj = -24.0 * eps * (2.0 * s6 * s6 - s6) / r
    e_cl = ff.coulomb_k * qq * (1.0 / r - 1.0 / rc)
    dudr_cl = -ff.coulomb_k * qq / r2

    # d points i -> j, so F_i = dU/dr * d/r and F_j is its negation; the
    # pairwise bincount accumulation keeps Newton's third law exact
    f = ((dudr_lj + dudr_cl) / r)[:, None] * d
    for c in range(3):
        forces[:, c] += np.bincount(i, weights=f[:, c], minlength=n)
        forces[:, c] -= np.bincount(j, weights=f[:, c], minlength=n)
    return float(np.sum(e_lj + e_cl))


def compute_forces_energy(state: MDState, ff: ForceField,
                          topo: MoleculeTopology) -> tuple[np.ndarray, float]:
    """Analytic forces (kJ/mol/A) and potential energy (kJ/mol)."""
    state.box.check_cutoff(ff.cutoff)
    pos = state.positions
    forces = np.zeros_like(pos)
    bonds, angles = _bonds_and_angles(topo, state.species)
    energy = _bond_terms(pos, state.box, bonds, ff.bond_k, ff.bond_r0, forces)
    energy += _angle_terms(pos, state.box, angles, ff.angle_k,
                           ff.angle_theta0, forces)
    energy += _nonbonded_terms(pos, state.box, state.species,
                               topo.mol_of_atom, ff, forces)
    return forces, energy


# ---------------------------------------------------------------------------
# integrators

def _check_step(disp: np.ndarray, cutoff: float, time: float) -> None:
    worst = float(np.max(np.abs(disp))) if disp.size else 0.0
    if worst > 0.5 * cutoff:
        raise BlowUpError(f"per-step displacement {worst:.3g} A exceeds half "
                          f"the cutoff at t = {time:.1f} fs")


def _step_nve(state: MDState, ff: ForceField, topo: MoleculeTopology,
              dt: float, forces: np.ndarray):
    inv_m = ACC_UNIT / state.masses[:, None]
    v_half = state.velocities + 0.5 * dt * forces * inv_m
    disp = dt * v_half
    _check_step(disp, ff.cutoff, state.time)
    new = replace(state, positions=state.positions + disp,
                  velocities=v_half, time=state.time + dt)
    f_new, e_new = compute_forces_energy(new, ff, topo)
    new.velocities = v_half + 0.5 * dt * f_new * inv_m
    return new, f_new, e_new


def _step_langevin(state: MDState, ff: ForceField, topo: MoleculeTopology,
                   dt: float, friction: float, temperature: float,
                   rng: np.random.Generator, forces: np.ndarray):
    # kick / drift / Ornstein-Uhlenbeck / drift / kick; the velocity
    # randomisation is exact in the friction, so the sampled temperature
    # stays correct for any step the forces tolerate
    inv_m = ACC_UNIT / state.masses[:, None]
    v = state.velocities + 0.5 * dt * forces * inv_m
    x = state.positions + 0.5 * dt * v
    c1 = math.exp(-friction * dt)
    std = np.sqrt((1.0 - c1 * c1) * KB * temperature * ACC_UNIT / state.masses)
    v = c1 * v + std[:, None] * rng.normal(size=v.shape)
    x = x + 0.5 * dt * v
    _check_step(x - state.positions, ff.cutoff, state.time)
    new = replace(state, positions=x, velocities=v, time=state.time + dt)
    f_new, e_new = compute_forces_energy(new, ff, topo)
    new.velocities = v + 0.5 * dt * f_new * inv_m
    return new, f_new, e_new


def velocity_verlet_step(state: MDState, ff: ForceField, topo: MoleculeTopology,
                         dt: float, forces: np.ndarray | None = None) -> MDState:
    """One NVE step; pass cached forces at the current positions to skip a
    re-evaluation."""
    if forces is None:
        forces, _ = compute_forces_energy(state, ff, topo)
    return _step_nve(state, ff, topo, dt, forces)[0]


def langevin_step(state: MDState, ff: ForceField, topo: MoleculeTopology,
                  dt: float, friction: float, temperature: float,
                  rng: np.random.Generator,
                  forces: np.ndarray | None = None) -> MDState:
    """One NVT step with an exact Ornstein-Uhlenbeck velocity update."""
    if forces is None:
        forces, _ = compute_forces_energy(state, ff, topo)
    return _step_langevin(state, ff, topo, dt, friction, temperature,
                          rng, forces)[0]


def quench(state: MDState, ff: ForceField, topo: MoleculeTopology,
           steps: int, dt: float) -> MDState:
    """Relax by damped dynamics: velocities reset whenever they oppose the
    force, which drains potential energy without a line search. The clock
    is zeroed afterwards; relaxation is preparation, not trajectory."""
    forces, _ = compute_forces_energy(state, ff, topo)
    for _ in range(steps):
        state, forces, _ = _step_nve(state, ff, topo, dt, forces)
        if float(np.sum(state.velocities * forces)) < 0.0:
            state.velocities = np.zeros_like(state.velocities)
    state.velocities = np.zeros_like(state.velocities)
    state.time = 0.0
    return state


# ---------------------------------------------------------------------------
# trajectory generation

@dataclass
class GenConfig:
    kind: str = "water"             # water | lj
    n_molecules: int = 64
    box_length: float | None = None  # None: from liquid-water / rho*=0.8 density
    temperature: float = 300.0      # K
    steps: int = 50_000
    save_every: int = 50
    dt: float = 2.0                 # fs
    friction: float = 0.005         # 1/fs; 0 disables the thermostat (NVE)
    cutoff: float | None = None     # None: force-field default
    relax_steps: int = 300
    relax_dt: float = 0.5
    ff_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("water", "lj"):
            raise ValueError(f"kind must be 'water' or 'lj', got {self.kind!r}")
        if self.n_molecules < 1:
            raise ValueError("n_molecules must be >= 1")
        if self.steps < 0 or self.save_every < 1:
            raise ValueError("steps must be >= 0 and save_every >= 1")
        if self.temperature <= 0 or self.dt <= 0 or self.friction < 0:
            raise ValueError("temperature and dt must be positive, friction >= 0")


def _default_box_length(config: GenConfig, ff: ForceField) -> float:
    if config.kind == "water":
        mass = config.n_molecules * (MASS_OF[8] + 2 * MASS_OF[1])
        volume = mass / 0.602214076  # amu per A^3 at 1 g/cm^3
    else:
        sigma = ff.lj_sigma[18]
        volume = config.n_molecules * sigma ** 3 / 0.8
    return volume ** (1.0 / 3.0)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def build_initial_state(config: GenConfig, ff: ForceField,
                        rng: np.random.Generator) -> MDState:
    """Molecules on a jittered cubic lattice with random orientations."""
    L = config.box_length if config.box_length is not None \
        else _default_box_length(config, ff)
    box = Box(np.full(3, L))
    per_side = math.ceil(config.n_molecules ** (1.0 / 3.0))
    spacing = L / per_side
    sites = [(i, j, k) for i in range(per_side)
             for j in range(per_side) for k in range(per_side)]

    positions, species, mol = [], [], []
    if config.kind == "water":
        half = ff.angle_theta0 / 2.0
        template = ff.bond_r0 * np.array([
            [0.0, 0.0, 0.0],
            [math.cos(half), math.sin(half), 0.0],
            [math.cos(half), -math.sin(half), 0.0],
        ])
        template -= template.mean(axis=0)
        for m in range(config.n_molecules):
            center = (np.array(sites[m]) + 0.5) * spacing \
                + rng.uniform(-0.08, 0.08, size=3) * spacing
            rot = _random_rotation(rng)
            for a, z in enumerate((8, 1, 1)):
                positions.append(center + template[a] @ rot.T)
                species.append(z)
                mol.append(m)
    else:
        for m in range(config.n_molecules):
            center = (np.array(sites[m]) + 0.5) * spacing \
                + rng.uniform(-0.08, 0.08, size=3) * spacing
            positions.append(center)
            species.append(18)
            mol.append(m)

    species = np.array(species, dtype=np.int64)
    masses = np.array([MASS_OF[z] for z in species])
    return MDState(positions=np.array(positions),
                   velocities=np.zeros((species.size, 3)),
                   masses=masses, species=species, box=box)


def _frame_from_state(state: MDState, topo: MoleculeTopology, ff: ForceField,
                      forces: np.ndarray, energy: float) -> AtomicFrame:
    return AtomicFrame(positions=state.positions.copy(),
                       species=state.species.copy(),
                       mol_of_atom=topo.mol_of_atom.copy(),
                       box_lengths=state.box.lengths.copy(),
                       energy=energy * KJMOL_TO_MEV,
                       forces=forces * KJMOL_TO_MEV)


def forcefield_for(config: GenConfig) -> ForceField:
    """The force field a trajectory run uses, overrides and cutoff applied."""
    factory = water_forcefield if config.kind == "water" else lj_forcefield
    ff = factory(**config.ff_overrides) if config.ff_overrides else factory()
    if config.cutoff is not None:
        ff = replace(ff, cutoff=config.cutoff)
    return ff


def generate_trajectory(config: GenConfig, seed: int) -> list[AtomicFrame]:
    """Relax, thermalise, and integrate; emit labeled frames every
    config.save_every steps (the relaxed initial frame included)."""
    rng = np.random.default_rng(seed)
    ff = forcefield_for(config)

    state = build_initial_state(config, ff, rng)
    state.box.check_cutoff(ff.cutoff)
    mol = np.repeat(np.arange(config.n_molecules),
                    3 if config.kind == "water" else 1)
    topo = topology_from_arrays(mol, state.species)

    state = quench(state, ff, topo, config.relax_steps, config.relax_dt)
    state.velocities = maxwell_boltzmann_velocities(
        state.masses, config.temperature, rng)

    forces, energy = compute_forces_energy(state, ff, topo)
    frames = [_frame_from_state(state, topo, ff, forces, energy)]
    for step in range(1, config.steps + 1):
        try:
            if config.friction > 0:
                state, forces, energy = _step_langevin(
                    state, ff, topo, config.dt, config.friction,
                    config.temperature, rng, forces)
            else:
                state, forces, energy = _step_nve(state, ff, topo,
                                                  config.dt, forces)
        except BlowUpError as exc:
            raise BlowUpError(f"{exc} (after frame {len(frames) - 1}, "
                              f"step {step})") from exc
        if step % config.save_every == 0:
            frames.append(_frame_from_state(state, topo, ff, forces, energy))
    return frames
