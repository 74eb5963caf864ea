"""Graph networks over periodic atomic frames.

Two model families share one message-passing trunk:

* ``energy`` family: an equivariant network whose scalar readout is the
  total energy; forces come from differentiating that energy, so they are
  conservative by construction (`egnn_forward` / `egnn_forces`).
* ``force`` family: an encode-process-decode network that emits per-atom
  force vectors directly through a covariant edge decoder
  (`forcecentric_forward`).

Both families expose a masked-displacement head (`pretext_head`) and a
noise-prediction head (`denoise_head`).  Trunk parameter names are shared,
so a trunk pretrained on either pretext task can be moved into a fresh
model with `transfer_trunk`.

All geometry enters through minimum-image edge vectors, Gaussian radial
features and a cosine cutoff envelope, which keeps every output smooth as
atoms cross the cutoff and invariant under rigid translation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Batch
from .geometry import minimum_image

CHECKPOINT_MAGIC = b"NPCK"
CHECKPOINT_VERSION = 1

# Softened norms keep gradients finite on zero-length edges (a masked atom
# sits exactly on its anchor, so such edges do occur).
_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters, stored inside every checkpoint."""

    family: str = "energy"
    hidden: int = 128
    layers: int = 4
    cutoff: float = 3.4
    n_rbf: int = 16
    species: tuple[int, ...] = (1, 8)
    raw_vector_decoder: bool = False

    def __post_init__(self):
        if self.family not in ("energy", "force"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.hidden < 1 or self.layers < 1 or self.n_rbf < 2:
            raise ValueError("hidden, layers must be >= 1 and n_rbf >= 2")
        if self.cutoff <= 0.0:
            raise ValueError("cutoff must be positive")
        sp = tuple(int(z) for z in self.species)
        if len(sp) == 0 or len(set(sp)) != len(sp):
            raise ValueError("species must be a non-empty set of atomic numbers")
        object.__setattr__(self, "species", sp)
        if self.raw_vector_decoder and self.family != "force":
            raise ValueError("raw_vector_decoder applies to the force family only")

    @property
    def n_edge_features(self) -> int:
        return self.n_rbf + 1  # radial basis + same-molecule flag


@dataclass
class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trunk_names(self) -> list[str]:
        return [n for n in self.names() if n.startswith("trunk.")]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        tensors = {
            n: Tensor(t.data.copy(), requires_grad=True)
            for n, t in self.tensors.items()
        }
        return ModelParams(self.config, tensors)


@dataclass
class ModelOutput:
    """Only the fields produced by the invoked head are populated."""

    energy: Tensor | None = None       # (num_frames,)
    forces: Tensor | None = None       # (num_atoms, 3)
    masked_pred: Tensor | None = None  # (num_targets, 3)
    noise_pred: Tensor | None = None   # (num_atoms, 3)


# ---------------------------------------------------------------------------
# initialization

def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity of the QR factor
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols])


def _mlp(rng, tensors, prefix, sizes, zero_last=False) -> None:
    """Two-layer perceptron parameters ``prefix.{w0,b0,w1,b1}``."""
    d_in, d_mid, d_out = sizes
    tensors[f"{prefix}.w0"] = Tensor(_orthogonal(rng, d_in, d_mid), requires_grad=True)
    tensors[f"{prefix}.b0"] = Tensor(np.zeros(d_mid), requires_grad=True)
    w1 = np.zeros((d_mid, d_out)) if zero_last else _orthogonal(rng, d_mid, d_out)
    tensors[f"{prefix}.w1"] = Tensor(w1, requires_grad=True)
    tensors[f"{prefix}.b1"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: orthogonal linear maps, zeroed final head layers.

    Zero-initialized output layers make every head start from the null
    prediction (zero energy correction, zero forces, zero displacement),
    so early training cannot blow up the equivariant channels.
    """
    rng = np.random.default_rng(seed)
    h = config.hidden
    n_sp = len(config.species)
    msg_in = 2 * h + 1 + config.n_edge_features

    t: dict[str, Tensor] = {}
    scale = 1.0 / np.sqrt(h)
    t["trunk.embed"] = Tensor(scale * rng.standard_normal((n_sp, h)), requires_grad=True)
    t["trunk.mask_embed"] = Tensor(scale * rng.standard_normal(h), requires_grad=True)
    for layer in range(config.layers):
        _mlp(rng, t, f"trunk.{layer}.phi_m", (msg_in, h, h))
        _mlp(rng, t, f"trunk.{layer}.phi_x", (h, h, 1), zero_last=True)
        _mlp(rng, t, f"trunk.{layer}.phi_u", (2 * h, h, h))

    _mlp(rng, t, "head.energy", (h, h, 1), zero_last=True)
    t["head.energy_bias"] = Tensor(np.zeros((n_sp, 1)), requires_grad=True)
    # Output gains let a calibration pass match the label scale up front;
    # Adam alone would need thousands of steps to grow weights to it.
    t["head.energy_scale"] = Tensor(np.array(1.0), requires_grad=True)
    if config.family == "force":
        t["head.force_scale"] = Tensor(np.array(1.0), requires_grad=True)
        if config.raw_vector_decoder:
            _mlp(rng, t, "head.force", (h, h, 3), zero_last=True)
        else:
            _mlp(rng, t, "head.force", (msg_in, h, 1), zero_last=True)
        _mlp(rng, t, "head.mask", (msg_in, h, 1), zero_last=True)
        _mlp(rng, t, "head.denoise", (msg_in, h, 1), zero_last=True)
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# trunk

def _species_index(config: ModelConfig, species: np.ndarray) -> np.ndarray:
    table = {z: i for i, z in enumerate(config.species)}
    missing = set(int(z) for z in species) - set(table)
    if missing:
        raise ValueError(
            f"species {sorted(missing)} not covered by model table {config.species}"
        )
    return np.array([table[int(z)] for z in species], dtype=np.intp)


def _linear2(params: ModelParams, prefix: str, z: Tensor) -> Tensor:
    mid = ad.silu(ad.matmul(z, params[f"{prefix}.w0"]) + params[f"{prefix}.b0"])
    return ad.matmul(mid, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"]


@dataclass
class _TrunkOut:
    h: Tensor        # (N, hidden) final node states
    delta: Tensor    # (N, 3) accumulated coordinate-channel displacement
    vec0: Tensor     # (E, 3) input minimum-image edge vectors
    dist0: Tensor    # (E, 1)
    e_static: Tensor  # (E, n_edge_features)
    env: Tensor      # (E, 1) cosine cutoff envelope


def _trunk_forward(batch: Batch, params: ModelParams, x: Tensor) -> _TrunkOut:
    cfg = params.config
    nl = batch.edges
    if nl.cutoff > cfg.cutoff + 1e-9:
        raise ValueError(
            f"neighbor list cutoff {nl.cutoff} exceeds model cutoff {cfg.cutoff}"
        )
    n = batch.num_atoms
    src, dst = nl.src, nl.dst
    n_edges = nl.num_edges

    # Minimum image as a differentiable function of x: the image shift is a
    # locally constant multiple of the box lengths, so adding it as a
    # constant keeps gradients exact.
    shift = Tensor(nl.vec - (batch.positions[src] - batch.positions[dst]))
    vec0 = ad.gather(x, src) - ad.gather(x, dst) + shift
    dist0 = ad.soft_norm(vec0, axis=1, keepdims=True, eps=_NORM_EPS)

    centers = np.linspace(0.0, cfg.cutoff, cfg.n_rbf)
    width = cfg.cutoff / cfg.n_rbf
    u = (ad.broadcast_to(dist0, (n_edges, cfg.n_rbf)) - Tensor(centers)) * (1.0 / width)
    rbf = ad.exp(ad.square(u) * -0.5)
    intra = (batch.mol_of_atom[src] == batch.mol_of_atom[dst]).astype(np.float64)
    e_static = ad.concat([rbf, Tensor(intra[:, None])], axis=1)
    env = (ad.cos(dist0 * (np.pi / cfg.cutoff)) + 1.0) * 0.5

    sp_idx = _species_index(cfg, batch.species)
    h = ad.gather(params["trunk.embed"], sp_idx)
    if batch.mask_flag is not None and batch.mask_flag.any():
        flag = Tensor(batch.mask_flag.astype(np.float64)[:, None])
        h = h + ad.broadcast_to(flag, (n, cfg.hidden)) * params["trunk.mask_embed"]

    delta = Tensor(np.zeros((n, 3)))
    for layer in range(cfg.layers):
        vec_t = vec0 + (ad.gather(delta, src) - ad.gather(delta, dst))
        d2 = ad.sum_(ad.square(vec_t), axis=1, keepdims=True)
        z = ad.concat([ad.gather(h, dst), ad.gather(h, src), d2, e_static], axis=1)
        m = _linear2(params, f"trunk.{layer}.phi_m", z) * env

        unit_t = vec_t / ad.soft_norm(vec_t, axis=1, keepdims=True, eps=_NORM_EPS)
        s = _linear2(params, f"trunk.{layer}.phi_x", m) * env
        delta = delta + ad.scatter_add(unit_t * s, dst, n)

        agg = ad.scatter_add(m, dst, n)
        h = h + _linear2(params, f"trunk.{layer}.phi_u", ad.concat([h, agg], axis=1))
        if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(delta.data))):
            raise FloatingPointError(
                f"non-finite activations in message-passing layer {layer}"
            )
    return _TrunkOut(h, delta, vec0, dist0, e_static, env)


def _energy_readout(batch: Batch, params: ModelParams, h: Tensor) -> Tensor:
    sp_idx = _species_index(params.config, batch.species)
    e_atom = (_linear2(params, "head.energy", h) * params["head.energy_scale"]
              + ad.gather(params["head.energy_bias"], sp_idx))
    per_frame = ad.scatter_add(e_atom, batch.frame_of_atom, batch.num_frames)
    return ad.reshape(per_frame, (batch.num_frames,))


def _covariant_vectors(batch: Batch, params: ModelParams, prefix: str,
                       trunk: _TrunkOut) -> Tensor:
    """Per-node 3-vectors: learned scalars pushed along unit edge vectors."""
    src, dst = batch.edges.src, batch.edges.dst
    z = ad.concat(
        [ad.gather(trunk.h, dst), ad.gather(trunk.h, src),
         ad.square(trunk.dist0), trunk.e_static],
        axis=1,
    )
    s = _linear2(params, prefix, z) * trunk.env
    unit0 = trunk.vec0 / ad.soft_norm(trunk.vec0, axis=1, keepdims=True, eps=_NORM_EPS)
    return ad.scatter_add(unit0 * s, dst, batch.num_atoms)


# ---------------------------------------------------------------------------
# family forwards

def egnn_energy(batch: Batch, params: ModelParams, x: Tensor | None = None) -> Tensor:
    """Per-frame energies only; pass a position Tensor to control the leaf
    (e.g. to differentiate with respect to coordinates externally)."""
    if params.config.family != "energy":
        raise ValueError("egnn_energy requires an energy-family model")
    if x is None:
        x = Tensor(batch.positions)
    trunk = _trunk_forward(batch, params, x)
    return _energy_readout(batch, params, trunk.h)


def egnn_forward(batch: Batch, params: ModelParams, compute_forces: bool = False,
                 create_graph: bool = False) -> ModelOutput:
    """Energy family: invariant per-frame energies, optional gradient forces.

    With ``create_graph=True`` the force tensor stays differentiable, so a
    loss on forces can itself be backpropagated to the parameters.
    """
    x = Tensor(batch.positions, requires_grad=compute_forces)
    energy = egnn_energy(batch, params, x)
    forces = None
    if compute_forces:
        grads = ad.backward(ad.sum_(energy), create_graph=create_graph)
        g = grads.get(x)
        forces = -g if g is not None else Tensor(np.zeros((batch.num_atoms, 3)))
    return ModelOutput(energy=energy, forces=forces)


def egnn_forces(batch: Batch, params: ModelParams, create_graph: bool = False) -> Tensor:
    """Forces as the negative position gradient of the summed energy."""
    return egnn_forward(batch, params, compute_forces=True,
                        create_graph=create_graph).forces


def forcecentric_forward(batch: Batch, params: ModelParams) -> ModelOutput:
    """Force family: direct per-atom force decoding plus a pooled energy."""
    if params.config.family != "force":
        raise ValueError("forcecentric_forward requires a force-family model")
    trunk = _trunk_forward(batch, params, Tensor(batch.positions))
    energy = _energy_readout(batch, params, trunk.h)
    if params.config.raw_vector_decoder:
        forces = _linear2(params, "head.force", trunk.h)
    else:
        forces = _covariant_vectors(batch, params, "head.force", trunk)
    forces = forces * params["head.force_scale"]
    return ModelOutput(energy=energy, forces=forces)


def supervised_forward(batch: Batch, params: ModelParams,
                       create_graph: bool = False) -> ModelOutput:
    """Energy and forces from whichever family the params belong to."""
    if params.config.family == "energy":
        return egnn_forward(batch, params, compute_forces=True,
                            create_graph=create_graph)
    return forcecentric_forward(batch, params)


# ---------------------------------------------------------------------------
# pretext heads

def pretext_head(batch: Batch, params: ModelParams) -> ModelOutput:
    """Displacement predictions for each (masked atom, partner) target row.

    The prediction starts from the visible-graph displacement between the
    partner and the masked atom's anchored position and adds the learned
    equivariant correction: the trunk's coordinate channel for the energy
    family, a dedicated covariant head for the force family.  Row order
    matches ``batch.target_vec``.
    """
    if batch.target_masked is None or batch.target_partner is None:
        raise ValueError("batch carries no masked-atom targets")
    trunk = _trunk_forward(batch, params, Tensor(batch.positions))
    if params.config.family == "energy":
        v = trunk.delta
    else:
        v = _covariant_vectors(batch, params, "head.mask", trunk)
    base = minimum_image(
        batch.positions[batch.target_partner] - batch.positions[batch.target_masked],
        batch.box,
    )
    pred = Tensor(base) + (ad.gather(v, batch.target_partner)
                           - ad.gather(v, batch.target_masked))
    return ModelOutput(masked_pred=pred)


def denoise_head(batch: Batch, params: ModelParams) -> ModelOutput:
    """Per-atom noise predictions (N, 3); translation invariant."""
    if batch.noise is None:
        raise ValueError("batch carries no noise targets")
    trunk = _trunk_forward(batch, params, Tensor(batch.positions))
    if params.config.family == "energy":
        pred = trunk.delta
    else:
        pred = _covariant_vectors(batch, params, "head.denoise", trunk)
    return ModelOutput(noise_pred=pred)


# ---------------------------------------------------------------------------
# persistence and transfer

def save_params(params: ModelParams, path) -> None:
    """Write a checkpoint: magic, version, JSON header, float64 blobs.

    Layout: ``NPCK`` | u32 version | u64 header length | JSON header
    {config, tensors: [[name, shape], ...]} | tensor data in header order,
    little-endian float64, C order.  Bit-exact round trip.
    """
    names = params.names()
    header = {
        "config": asdict(params.config),
        "tensors": [[n, list(params[n].shape)] for n in names],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + 12
    header = json.loads(blob[start:start + header_len].decode("utf-8"))
    raw = header["config"]
    raw["species"] = tuple(raw["species"])
    config = ModelConfig(**raw)

    tensors: dict[str, Tensor] = {}
    offset = start + header_len
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at tensor {name!r}")
        data = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        tensors[name] = Tensor(data, requires_grad=True)
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams(config, tensors)


def transfer_trunk(src: ModelParams, dst: ModelParams) -> ModelParams:
    """Copy every ``trunk.*`` tensor of src into a copy of dst.

    Head tensors keep dst's fresh initialization.  Trunk names or shapes
    that do not line up abort the transfer and name the offenders.
    """
    out = dst.copy()
    bad = [
        n for n in out.trunk_names()
        if n not in src.tensors or src[n].shape != out[n].shape
    ]
    if bad:
        raise ValueError("trunk transfer mismatch for: " + ", ".join(bad))
    for n in out.trunk_names():
        out.tensors[n] = Tensor(src[n].data.copy(), requires_grad=True)
    return out
