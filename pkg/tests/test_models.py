import numpy as np
import pytest

from neuralpot import autodiff as ad
from neuralpot.dataset import (
    AtomicFrame, collate_frames, collate_masked, collate_noised,
    make_masked_sample, make_noised_sample,
)
from neuralpot.models import (
    ModelConfig, denoise_head, egnn_forces, egnn_forward, forcecentric_forward,
    init_params, load_params, pretext_head, save_params, supervised_forward,
    transfer_trunk,
)

CUTOFF = 3.4
SMALL = ModelConfig(family="energy", hidden=16, layers=2, cutoff=CUTOFF, n_rbf=8)
SMALL_F = ModelConfig(family="force", hidden=16, layers=2, cutoff=CUTOFF, n_rbf=8)


def cluster_frame(rng, n_mol=3, L=50.0):
    """Water molecules huddled at the box center: effectively free space,
    so rigid rotations are exact symmetries of the input."""
    c = L / 2
    positions, species, mol = [], [], []
    for m in range(n_mol):
        o = c + rng.uniform(-2.0, 2.0, size=3)
        positions += [o,
                      o + rng.normal(0, 0.05, 3) + [0.96, 0, 0],
                      o + rng.normal(0, 0.05, 3) + [-0.24, 0.93, 0]]
        species += [8, 1, 1]
        mol += [m, m, m]
    return AtomicFrame(positions=np.array(positions), species=np.array(species),
                       mol_of_atom=np.array(mol), box_lengths=np.full(3, L))


def periodic_frame(rng, n_mol=4, L=7.5):
    positions, species, mol = [], [], []
    for m in range(n_mol):
        o = rng.uniform(0, L, size=3)
        positions += [o % L,
                      (o + [0.96, 0, 0]) % L,
                      (o + [-0.24, 0.93, 0]) % L]
        species += [8, 1, 1]
        mol += [m, m, m]
    return AtomicFrame(positions=np.array(positions), species=np.array(species),
                       mol_of_atom=np.array(mol), box_lengths=np.full(3, L))


def randomized(config, seed=0):
    """Init params, then shake every tensor so zero-initialized heads and
    coordinate channels produce nonzero outputs."""
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name in params.names():
        t = params[name]
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    return params


def rotation_matrix(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotated_frame(frame, rot):
    c = frame.box_lengths / 2
    return AtomicFrame(positions=(frame.positions - c) @ rot.T + c,
                       species=frame.species, mol_of_atom=frame.mol_of_atom,
                       box_lengths=frame.box_lengths)


class TestConfig:
    def test_rejects_unknown_family(self):
        with pytest.raises(ValueError):
            ModelConfig(family="hybrid")

    def test_rejects_raw_decoder_on_energy_family(self):
        with pytest.raises(ValueError):
            ModelConfig(family="energy", raw_vector_decoder=True)

    def test_rejects_duplicate_species(self):
        with pytest.raises(ValueError):
            ModelConfig(species=(1, 1, 8))

    def test_species_normalized_to_ints(self):
        cfg = ModelConfig(species=(np.int64(1), np.int64(8)))
        assert cfg.species == (1, 8)


class TestInit:
    def test_energy_family_has_no_vector_heads(self):
        params = init_params(SMALL, seed=0)
        assert not any(n.startswith("head.mask") for n in params.names())
        assert not any(n.startswith("head.force") for n in params.names())

    def test_force_family_heads_present(self):
        params = init_params(SMALL_F, seed=0)
        for prefix in ("head.force", "head.mask", "head.denoise"):
            assert f"{prefix}.w0" in params.tensors

    def test_final_layers_zeroed(self):
        params = init_params(SMALL, seed=3)
        assert np.all(params["head.energy.w1"].data == 0)
        assert np.all(params["trunk.0.phi_x.w1"].data == 0)

    def test_orthogonal_hidden_maps(self):
        params = init_params(SMALL, seed=3)
        w = params["trunk.0.phi_u.w1"].data  # square (16, 16)
        assert np.allclose(w.T @ w, np.eye(16), atol=1e-12)

    def test_deterministic_in_seed(self):
        a, b = init_params(SMALL, seed=7), init_params(SMALL, seed=7)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())

    def test_copy_is_independent(self):
        a = init_params(SMALL, seed=0)
        b = a.copy()
        b["trunk.embed"].data[0, 0] += 1.0
        assert a["trunk.embed"].data[0, 0] != b["trunk.embed"].data[0, 0]

    def test_parameter_count_positive(self):
        assert init_params(SMALL, seed=0).num_parameters() > 500


class TestEnergyFamily:
    def test_isolated_atom_energy_is_species_bias(self):
        params = init_params(SMALL, seed=0)
        params["head.energy_bias"].data[:] = [[2.5], [-1.5]]  # H, O rows
        frame = AtomicFrame(positions=np.array([[5.0, 5.0, 5.0]]),
                            species=np.array([8]), mol_of_atom=np.array([0]),
                            box_lengths=np.full(3, 12.0))
        batch = collate_frames([frame], cutoff=CUTOFF)
        out = egnn_forward(batch, params, compute_forces=True)
        assert out.energy.data == pytest.approx(-1.5, abs=1e-14)
        assert np.all(out.forces.data == 0)

    def test_rotation_translation_invariance(self):
        params = randomized(SMALL, seed=1)
        rng = np.random.default_rng(2)
        frame = cluster_frame(rng)
        e0 = egnn_forward(collate_frames([frame], CUTOFF), params).energy.data[0]
        for _ in range(5):
            rot = rotation_matrix(rng)
            moved = rotated_frame(frame, rot)
            moved = AtomicFrame(
                positions=(moved.positions + rng.uniform(-1, 1, 3)) % 50.0,
                species=moved.species, mol_of_atom=moved.mol_of_atom,
                box_lengths=moved.box_lengths)
            e1 = egnn_forward(collate_frames([moved], CUTOFF), params).energy.data[0]
            assert abs(e1 - e0) < 1e-8 * max(1.0, abs(e0))

    def test_periodic_translation_invariance(self):
        params = randomized(SMALL, seed=4)
        rng = np.random.default_rng(5)
        frame = periodic_frame(rng)
        e0 = egnn_forward(collate_frames([frame], CUTOFF), params).energy.data[0]
        shifted = AtomicFrame(positions=(frame.positions + [3.1, -1.2, 5.9]) % 7.5,
                              species=frame.species, mol_of_atom=frame.mol_of_atom,
                              box_lengths=frame.box_lengths)
        e1 = egnn_forward(collate_frames([shifted], CUTOFF), params).energy.data[0]
        assert e1 == pytest.approx(e0, rel=1e-10)

    def test_force_rotation_equivariance(self):
        params = randomized(SMALL, seed=6)
        rng = np.random.default_rng(7)
        frame = cluster_frame(rng)
        f0 = egnn_forces(collate_frames([frame], CUTOFF), params).data
        rot = rotation_matrix(rng)
        f1 = egnn_forces(collate_frames([rotated_frame(frame, rot)], CUTOFF),
                         params).data
        assert np.max(np.abs(f1 - f0 @ rot.T)) < 1e-6 * max(1.0, np.abs(f0).max())

    def test_permutation_equivariance(self):
        params = randomized(SMALL, seed=8)
        rng = np.random.default_rng(9)
        frame = periodic_frame(rng)
        perm = rng.permutation(frame.num_atoms)
        permuted = AtomicFrame(positions=frame.positions[perm],
                               species=frame.species[perm],
                               mol_of_atom=frame.mol_of_atom[perm],
                               box_lengths=frame.box_lengths)
        out0 = egnn_forward(collate_frames([frame], CUTOFF), params,
                            compute_forces=True)
        out1 = egnn_forward(collate_frames([permuted], CUTOFF), params,
                            compute_forces=True)
        assert out1.energy.data[0] == pytest.approx(out0.energy.data[0], rel=1e-12)
        assert np.allclose(out1.forces.data, out0.forces.data[perm], atol=1e-12)

    def test_forces_match_finite_differences(self):
        params = randomized(SMALL, seed=10)
        rng = np.random.default_rng(11)
        frame = periodic_frame(rng, n_mol=2)
        forces = egnn_forces(collate_frames([frame], CUTOFF), params).data

        def energy_at(positions):
            moved = AtomicFrame(positions=positions % 7.5, species=frame.species,
                                mol_of_atom=frame.mol_of_atom,
                                box_lengths=frame.box_lengths)
            return egnn_forward(collate_frames([moved], CUTOFF), params).energy.data[0]

        h = 1e-4
        fd = np.zeros_like(forces)
        for i in range(frame.num_atoms):
            for k in range(3):
                up = frame.positions.copy(); up[i, k] += h
                dn = frame.positions.copy(); dn[i, k] -= h
                fd[i, k] = -(energy_at(up) - energy_at(dn)) / (2 * h)
        denom = max(np.abs(fd).max(), 1e-10)
        assert np.max(np.abs(forces - fd)) / denom < 1e-4

    def test_smooth_across_cutoff(self):
        # an edge appearing at r = cutoff must not kick the energy
        params = randomized(SMALL, seed=12)
        frame_at = lambda r: AtomicFrame(
            positions=np.array([[10.0, 10, 10], [10.0 + r, 10, 10]]),
            species=np.array([8, 8]), mol_of_atom=np.array([0, 1]),
            box_lengths=np.full(3, 25.0))
        delta = 1e-6
        e_in = egnn_forward(collate_frames([frame_at(CUTOFF - delta)], CUTOFF),
                            params).energy.data[0]
        e_out = egnn_forward(collate_frames([frame_at(CUTOFF + delta)], CUTOFF),
                             params).energy.data[0]
        assert abs(e_in - e_out) < 1e-9

    def test_rejects_force_family_params(self):
        params = init_params(SMALL_F, seed=0)
        frame = periodic_frame(np.random.default_rng(0))
        with pytest.raises(ValueError):
            egnn_forward(collate_frames([frame], CUTOFF), params)

    def test_nan_activations_name_the_layer(self):
        params = init_params(SMALL, seed=0)
        params["trunk.1.phi_u.b0"].data[:] = 1e200  # silu keeps this positive
        params["trunk.1.phi_u.w1"].data[:] = 1e200
        frame = periodic_frame(np.random.default_rng(1))
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="layer 1"):
            egnn_forward(collate_frames([frame], CUTOFF), params)

    def test_unknown_species_rejected(self):
        params = init_params(SMALL, seed=0)
        frame = AtomicFrame(positions=np.array([[1.0, 1, 1]]),
                            species=np.array([18]), mol_of_atom=np.array([0]),
                            box_lengths=np.full(3, 10.0))
        with pytest.raises(ValueError, match="species"):
            egnn_forward(collate_frames([frame], CUTOFF), params)

    def test_neighbor_cutoff_mismatch_rejected(self):
        params = init_params(SMALL, seed=0)
        frame = periodic_frame(np.random.default_rng(1), L=12.0)
        batch = collate_frames([frame], cutoff=5.0)  # wider than the model's 3.4
        with pytest.raises(ValueError, match="cutoff"):
            egnn_forward(batch, params)


class TestForceFamily:
    def test_shapes(self):
        params = randomized(SMALL_F, seed=0)
        rng = np.random.default_rng(1)
        batch = collate_frames([periodic_frame(rng), periodic_frame(rng)], CUTOFF)
        out = forcecentric_forward(batch, params)
        assert out.energy.shape == (2,)
        assert out.forces.shape == (batch.num_atoms, 3)

    def test_zero_edge_graph_zero_forces(self):
        params = randomized(SMALL_F, seed=2)
        frame = AtomicFrame(positions=np.array([[2.0, 2, 2], [18.0, 18, 18]]),
                            species=np.array([8, 8]), mol_of_atom=np.array([0, 1]),
                            box_lengths=np.full(3, 24.0))
        out = forcecentric_forward(collate_frames([frame], CUTOFF), params)
        assert np.all(out.forces.data == 0)

    def test_force_rotation_equivariance(self):
        params = randomized(SMALL_F, seed=3)
        rng = np.random.default_rng(4)
        frame = cluster_frame(rng)
        f0 = forcecentric_forward(collate_frames([frame], CUTOFF), params).forces.data
        rot = rotation_matrix(rng)
        f1 = forcecentric_forward(collate_frames([rotated_frame(frame, rot)], CUTOFF),
                                  params).forces.data
        assert np.max(np.abs(f1 - f0 @ rot.T)) < 1e-6 * max(1.0, np.abs(f0).max())

    def test_permutation_equivariance(self):
        params = randomized(SMALL_F, seed=5)
        rng = np.random.default_rng(6)
        frame = periodic_frame(rng)
        perm = rng.permutation(frame.num_atoms)
        permuted = AtomicFrame(positions=frame.positions[perm],
                               species=frame.species[perm],
                               mol_of_atom=frame.mol_of_atom[perm],
                               box_lengths=frame.box_lengths)
        f0 = forcecentric_forward(collate_frames([frame], CUTOFF), params).forces.data
        f1 = forcecentric_forward(collate_frames([permuted], CUTOFF), params).forces.data
        assert np.allclose(f1, f0[perm], atol=1e-12)

    def test_raw_decoder_shapes(self):
        cfg = ModelConfig(family="force", hidden=16, layers=2, cutoff=CUTOFF,
                          n_rbf=8, raw_vector_decoder=True)
        params = randomized(cfg, seed=7)
        frame = periodic_frame(np.random.default_rng(8))
        out = forcecentric_forward(collate_frames([frame], CUTOFF), params)
        assert out.forces.shape == (frame.num_atoms, 3)

    def test_rejects_energy_family_params(self):
        params = init_params(SMALL, seed=0)
        frame = periodic_frame(np.random.default_rng(0))
        with pytest.raises(ValueError):
            forcecentric_forward(collate_frames([frame], CUTOFF), params)


class TestSupervisedDispatch:
    @pytest.mark.parametrize("config", [SMALL, SMALL_F], ids=["energy", "force"])
    def test_populates_energy_and_forces(self, config):
        params = randomized(config, seed=1)
        frame = periodic_frame(np.random.default_rng(2))
        out = supervised_forward(collate_frames([frame], CUTOFF), params)
        assert out.energy is not None and out.forces is not None
        assert out.forces.shape == (frame.num_atoms, 3)


class TestPretextHead:
    def masked_batch(self, rng, n_frames=2, ratio=0.5):
        samples = [make_masked_sample(periodic_frame(rng), ratio, rng)
                   for _ in range(n_frames)]
        return collate_masked(samples, cutoff=CUTOFF)

    @pytest.mark.parametrize("config", [SMALL, SMALL_F], ids=["energy", "force"])
    def test_one_prediction_per_target(self, config):
        params = randomized(config, seed=1)
        batch = self.masked_batch(np.random.default_rng(2))
        out = pretext_head(batch, params)
        assert out.masked_pred.shape == batch.target_vec.shape

    def test_initial_prediction_is_visible_displacement(self):
        # zero-initialized coordinate channel: the head starts from the
        # anchored geometry and the learned correction is exactly zero
        params = init_params(SMALL, seed=3)
        batch = self.masked_batch(np.random.default_rng(4))
        out = pretext_head(batch, params)
        from neuralpot.geometry import minimum_image
        base = minimum_image(batch.positions[batch.target_partner]
                             - batch.positions[batch.target_masked], batch.box)
        assert np.allclose(out.masked_pred.data, base, atol=1e-12)

    @pytest.mark.parametrize("config", [SMALL, SMALL_F], ids=["energy", "force"])
    def test_rotation_covariance(self, config):
        params = randomized(config, seed=5)
        rng = np.random.default_rng(6)
        frame = cluster_frame(rng, n_mol=4)
        sample = make_masked_sample(frame, 0.5, np.random.default_rng(7))
        d0 = pretext_head(collate_masked([sample], CUTOFF), params).masked_pred.data

        rot = rotation_matrix(rng)
        moved = rotated_frame(frame, rot)
        sample_r = make_masked_sample(moved, 0.5, np.random.default_rng(7))
        assert np.array_equal(sample.masked_atoms, sample_r.masked_atoms)
        d1 = pretext_head(collate_masked([sample_r], CUTOFF), params).masked_pred.data
        assert np.max(np.abs(d1 - d0 @ rot.T)) < 1e-6 * max(1.0, np.abs(d0).max())

    def test_mask_embedding_feeds_the_trunk(self):
        params = randomized(SMALL, seed=8)
        batch = self.masked_batch(np.random.default_rng(9))
        d_flagged = pretext_head(batch, params).masked_pred.data
        batch.mask_flag[:] = False
        d_plain = pretext_head(batch, params).masked_pred.data
        assert np.abs(d_flagged - d_plain).max() > 1e-8

    def test_requires_targets(self):
        params = init_params(SMALL, seed=0)
        frame = periodic_frame(np.random.default_rng(0))
        with pytest.raises(ValueError, match="masked"):
            pretext_head(collate_frames([frame], CUTOFF), params)


class TestDenoiseHead:
    def noised_batch(self, rng, sigma=0.3):
        samples = [make_noised_sample(periodic_frame(rng), sigma, rng)
                   for _ in range(2)]
        return collate_noised(samples, cutoff=CUTOFF)

    @pytest.mark.parametrize("config", [SMALL, SMALL_F], ids=["energy", "force"])
    def test_shape(self, config):
        params = randomized(config, seed=1)
        batch = self.noised_batch(np.random.default_rng(2))
        out = denoise_head(batch, params)
        assert out.noise_pred.shape == (batch.num_atoms, 3)

    def test_translation_invariance(self):
        params = randomized(SMALL, seed=3)
        rng = np.random.default_rng(4)
        frame = periodic_frame(rng)
        sample = make_noised_sample(frame, 0.3, np.random.default_rng(5))
        p0 = denoise_head(collate_noised([sample], CUTOFF), params).noise_pred.data

        shifted = AtomicFrame(positions=(frame.positions + [1.7, -0.4, 2.2]) % 7.5,
                              species=frame.species, mol_of_atom=frame.mol_of_atom,
                              box_lengths=frame.box_lengths)
        sample_s = make_noised_sample(shifted, 0.3, np.random.default_rng(5))
        p1 = denoise_head(collate_noised([sample_s], CUTOFF), params).noise_pred.data
        assert np.allclose(p1, p0, atol=1e-9)

    def test_requires_noise(self):
        params = init_params(SMALL, seed=0)
        frame = periodic_frame(np.random.default_rng(0))
        with pytest.raises(ValueError, match="noise"):
            denoise_head(collate_frames([frame], CUTOFF), params)


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path):
        params = randomized(SMALL_F, seed=1)
        path = tmp_path / "model.bin"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.config == params.config
        assert loaded.names() == params.names()
        for n in params.names():
            assert np.array_equal(loaded[n].data, params[n].data)
            assert loaded[n].requires_grad

    def test_save_is_deterministic(self, tmp_path):
        params = randomized(SMALL, seed=2)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_params(params, a)
        save_params(params, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"????" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_params(path)

    def test_truncated_file(self, tmp_path):
        params = init_params(SMALL, seed=0)
        path = tmp_path / "model.bin"
        save_params(params, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_params(path)


class TestTransfer:
    def test_trunk_copied_heads_fresh(self):
        src = randomized(SMALL_F, seed=1)
        dst = init_params(SMALL_F, seed=99)
        out = transfer_trunk(src, dst)
        for n in out.trunk_names():
            assert np.array_equal(out[n].data, src[n].data)
            assert out[n] is not src[n]
        assert np.abs(out["head.mask.w0"].data - src["head.mask.w0"].data).max() > 0
        assert np.array_equal(out["head.mask.w0"].data, dst["head.mask.w0"].data)

    def test_cross_family_transfer(self):
        src = randomized(SMALL, seed=2)  # energy-family pretraining
        dst = init_params(SMALL_F, seed=3)
        out = transfer_trunk(src, dst)
        assert np.array_equal(out["trunk.embed"].data, src["trunk.embed"].data)
        assert "head.force.w0" in out.tensors

    def test_shape_mismatch_names_keys(self):
        src = init_params(ModelConfig(family="energy", hidden=8, layers=2,
                                      cutoff=CUTOFF, n_rbf=8), seed=0)
        dst = init_params(SMALL, seed=0)
        with pytest.raises(ValueError, match="trunk.embed"):
            transfer_trunk(src, dst)

    def test_source_checkpoint_round_trip(self, tmp_path):
        src = randomized(SMALL, seed=4)
        path = tmp_path / "pre.bin"
        save_params(src, path)
        out = transfer_trunk(load_params(path), init_params(SMALL, seed=5))
        assert np.array_equal(out["trunk.embed"].data, src["trunk.embed"].data)


class TestDeterminism:
    def test_forward_is_pure(self):
        params = randomized(SMALL, seed=1)
        batch = collate_frames([periodic_frame(np.random.default_rng(2))], CUTOFF)
        a = egnn_forward(batch, params, compute_forces=True)
        b = egnn_forward(batch, params, compute_forces=True)
        assert np.array_equal(a.energy.data, b.energy.data)
        assert np.array_equal(a.forces.data, b.forces.data)
