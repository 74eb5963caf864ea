"""Optimization loops: pretraining, finetuning, evaluation, checkpointing.

Runs are deterministic under a fixed seed in single-threaded mode: every
epoch draws its masks, noise and batch order from a generator keyed by
(seed, epoch), so a resumed run replays exactly what an uninterrupted one
would have done.  Metrics files never contain timing, which keeps repeated
runs byte-identical; wall time lives only on the in-memory records.
"""

from __future__ import annotations

import contextlib
import csv
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import (
    Batch, collate_frames, collate_masked, collate_noised, iter_batches,
    make_masked_sample, make_noised_sample, split_dataset,
)
from .geometry import EdgeList
from .models import (
    ModelConfig, ModelParams, denoise_head, egnn_energy, init_params,
    load_params, pretext_head, save_params, supervised_forward, transfer_trunk,
)
from .pretext import denoising_loss, masking_loss, supervised_loss

PRETRAIN_TASKS = ("mask-pretrain", "denoise-pretrain")
SUPERVISED_TASKS = ("finetune", "scratch")


class DivergenceError(RuntimeError):
    """Training produced no usable step for a whole epoch."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    task: str
    epochs: int = 1
    batch_size: int = 8
    lr_init: float = 1e-4
    lr_min: float = 1e-7
    weight_decay: float = 1e-4
    mask_ratio: float = 0.5
    mask_anchor: str = "oxygen"
    per_vector_cosine: bool = False
    sigma: float = 0.5
    w_force: float = 40.0
    w_energy: float = 15.0
    seed: int = 0
    schedule: str = "cosine"
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    force_grad_mode: str = "exact"  # energy-family force loss: exact | fd
    fd_epsilon: float = 1e-4
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    state_path: str | None = None

    def __post_init__(self):
        if self.task not in PRETRAIN_TASKS + SUPERVISED_TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.lr_min <= self.lr_init):
            raise ValueError("need 0 <= lr_min <= lr_init")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.schedule not in ("cosine", "plateau"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.force_grad_mode not in ("exact", "fd"):
            raise ValueError(f"unknown force_grad_mode {self.force_grad_mode!r}")
        if self.fd_epsilon <= 0:
            raise ValueError("fd_epsilon must be positive")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float | None = None
    val_loss: float | None = None
    val_force_rmse: float | None = None
    val_force_mae: float | None = None
    val_energy_rmse: float | None = None
    val_energy_mae: float | None = None
    lr: float | None = None
    skipped_steps: int = 0
    wall_time_s: float = 0.0  # never serialized; see write_metrics_csv

    def __post_init__(self):
        for rmse, mae in ((self.val_force_rmse, self.val_force_mae),
                          (self.val_energy_rmse, self.val_energy_mae)):
            if rmse is not None and mae is not None and rmse < mae - 1e-12:
                raise ValueError("RMSE cannot be below MAE")


@dataclass
class RunResult:
    params: ModelParams            # best-validation parameters
    final_params: ModelParams      # parameters after the last epoch
    start_params: ModelParams      # parameters before the first step
    records: list[MetricsRecord]
    state: "AdamState"
    best_val: float
    test_record: MetricsRecord | None = None


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(m={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                     v={n: np.zeros_like(t.data) for n, t in params.tensors.items()})


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float) -> AdamState:
    """Decoupled AdamW, β=(0.9, 0.999), ε=1e-8, applied in place.

    A tensor absent from ``grads`` is treated as zero gradient (its head was
    not exercised this step).  Any non-finite gradient skips the whole step.
    """
    unknown = set(grads) - set(params.tensors)
    if unknown:
        raise ValueError(f"gradients for unknown tensors: {sorted(unknown)}")
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return state

    b1, b2, eps = 0.9, 0.999, 1e-8
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.tensors.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * t.data
        t.data = t.data - lr * update
    return state


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Cosine decay from lr_init (epoch 0) to lr_min (final epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_init
    span = config.lr_init - config.lr_min
    phase = np.pi * epoch / (config.epochs - 1)
    return config.lr_min + span * 0.5 * (1.0 + np.cos(phase))


class _PlateauTracker:
    """Halve the learning rate after `patience` epochs without improvement."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr_init
        self.best = np.inf
        self.bad = 0

    def update(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad = 0
            return
        self.bad += 1
        if self.bad > self.config.plateau_patience:
            self.lr = max(self.lr * self.config.plateau_factor, self.config.lr_min)
            self.bad = 0


def _epoch_lr(epoch: int, config: TrainConfig, plateau: _PlateauTracker) -> float:
    return plateau.lr if config.schedule == "plateau" else lr_schedule(epoch, config)


# ---------------------------------------------------------------------------
# gradient plumbing

def _named_grads(params: ModelParams, grad_map: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in params.tensors.items():
        g = grad_map.get(t)
        if g is not None:
            out[name] = g.data
    return out


def _pretext_loss(params: ModelParams, batch: Batch, config: TrainConfig):
    if batch.noise is not None:
        out = denoise_head(batch, params)
        return denoising_loss(out.noise_pred, batch.noise)
    out = pretext_head(batch, params)
    return masking_loss(out.masked_pred, batch.target_vec,
                        per_vector=config.per_vector_cosine)


def _perturbed_batch(batch: Batch, new_positions: np.ndarray) -> Batch:
    """Same edge set, displaced geometry: edge vectors follow the atoms.

    Valid only for displacements small enough not to change the neighbor
    list or any minimum-image choice.
    """
    nl = batch.edges
    dvec = ((new_positions[nl.src] - new_positions[nl.dst])
            - (batch.positions[nl.src] - batch.positions[nl.dst]))
    vec = nl.vec + dvec
    edges = EdgeList(src=nl.src, dst=nl.dst, vec=vec,
                     dist=np.linalg.norm(vec, axis=1), num_nodes=nl.num_nodes,
                     cutoff=nl.cutoff)
    return replace(batch, positions=new_positions, edges=edges)


def _supervised_grads(params: ModelParams, batch: Batch, config: TrainConfig):
    """Loss value, breakdown and per-tensor parameter gradients for one batch.

    The force family and the exact energy-family path run one reverse sweep
    through the full loss (the latter differentiating through the force
    computation itself).  The "fd" path avoids second derivatives: the force
    term's parameter gradient is recovered from a forward difference of the
    energy gradient along the force-residual direction.
    """
    family = params.config.family
    if family == "force" or config.force_grad_mode == "exact":
        out = supervised_forward(batch, params, create_graph=(family == "energy"))
        loss = supervised_loss(out, batch, config.w_force, config.w_energy)
        grads = _named_grads(params, ad.backward(loss.scalar))
        return loss.item(), loss.breakdown, grads

    # energy family, first-order surrogate; create_graph keeps the tape
    # alive for the energy-term sweep below (backward consumes it otherwise)
    x = Tensor(batch.positions, requires_grad=True)
    energy = egnn_energy(batch, params, x)
    g_total = ad.backward(ad.sum_(energy), create_graph=True)
    forces = -g_total[x].data

    n_comp = forces.size
    w = config.w_force * 2.0 * (forces - batch.forces) / n_comp  # dL_F/dF
    force_term = config.w_force * float(np.mean((forces - batch.forces) ** 2))

    counts = np.bincount(batch.frame_of_atom, minlength=batch.num_frames)
    e_scaled = (energy - Tensor(batch.energy)) * Tensor(1.0 / counts)
    energy_loss = config.w_energy * ad.mean(ad.square(e_scaled))
    grads = _named_grads(params, ad.backward(energy_loss))

    # dL_F/dθ = -∂θ(∇x E · w) ≈ -|w| (∇θE(x+εŵ) - ∇θE(x)) / ε
    w_len = float(np.linalg.norm(w))
    if w_len > 0.0:
        step = config.fd_epsilon
        shifted = _perturbed_batch(batch, batch.positions + step * (w / w_len))
        g_shift = _named_grads(params, ad.backward(ad.sum_(egnn_energy(shifted, params))))
        g_base = _named_grads(params, g_total)
        for name in set(g_shift) | set(g_base):
            a = g_shift.get(name, 0.0)
            b = g_base.get(name, 0.0)
            surr = -(w_len / step) * (a - b)
            grads[name] = grads.get(name, 0.0) + surr

    total = force_term + float(energy_loss.data)
    breakdown = {"force": force_term, "energy": float(energy_loss.data)}
    return total, breakdown, grads


def calibrate_output_scales(params: ModelParams, frames) -> None:
    """Match head gains and species reference energies to the label scale.

    The output gains are set to the standard deviation of the training
    force components; per-species reference energies are least-squares
    fitted to the frame energies.  Zero-initialized heads then start
    training at the right order of magnitude instead of crawling there.
    """
    f = np.concatenate([fr.forces.ravel() for fr in frames])
    scale = float(np.std(f))
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    params["head.energy_scale"].data = np.array(scale)
    if "head.force_scale" in params.tensors:
        params["head.force_scale"].data = np.array(scale)

    counts = np.array([[np.sum(fr.species == z) for z in params.config.species]
                       for fr in frames], dtype=np.float64)
    energies = np.array([fr.energy for fr in frames])
    bias, *_ = np.linalg.lstsq(counts, energies, rcond=None)
    params["head.energy_bias"].data = bias[:, None]


# ---------------------------------------------------------------------------
# evaluation

def evaluate(params, frames, batch_size: int = 16,
             w_force: float = 40.0, w_energy: float = 15.0) -> MetricsRecord:
    """Force RMSE/MAE over all 3N components and per-frame energy RMSE/MAE.

    ``params`` may be a ModelParams or a checkpoint path.  Units follow the
    labels (meV/Å and meV).
    """
    if not isinstance(params, ModelParams):
        params = load_params(params)
    if not frames:
        raise ValueError("evaluate needs at least one frame")
    if any(f.energy is None or f.forces is None for f in frames):
        raise ValueError("evaluate needs labeled frames")

    t0 = time.perf_counter()
    f_err, e_err, losses = [], [], []
    # the energy family differentiates the tape for its forces; the force
    # family's forward is pure inference and need not record one
    ctx = (contextlib.nullcontext if params.config.family == "energy"
           else ad.no_grad)
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        batch = collate_frames(chunk, cutoff=params.config.cutoff)
        with ctx():
            out = supervised_forward(batch, params)
            losses.append(supervised_loss(out, batch, w_force, w_energy).item())
        f_err.append(out.forces.data - batch.forces)
        e_err.append(out.energy.data - batch.energy)
    df = np.concatenate(f_err).ravel()
    de = np.concatenate(e_err)
    return MetricsRecord(
        epoch=-1,
        val_loss=float(np.mean(losses)),
        val_force_rmse=float(np.sqrt(np.mean(df ** 2))),
        val_force_mae=float(np.mean(np.abs(df))),
        val_energy_rmse=float(np.sqrt(np.mean(de ** 2))),
        val_energy_mae=float(np.mean(np.abs(de))),
        wall_time_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# metrics and state files

_CSV_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_force_rmse",
               "val_force_mae", "val_energy_rmse", "val_energy_mae",
               "skipped_steps")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.17g}"


def write_metrics_csv(records, path) -> None:
    """Epoch-indexed metrics table.  Wall time is deliberately excluded so
    that repeated runs with the same seed write identical bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for r in records:
            writer.writerow([_cell(getattr(r, f)) for f in _CSV_FIELDS])


def write_summary_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_train_state(path, params: ModelParams, best_params: ModelParams,
                     state: AdamState, next_epoch: int, best_val: float,
                     plateau: _PlateauTracker) -> None:
    arrays = {}
    for n, t in params.tensors.items():
        arrays[f"p.{n}"] = t.data
        arrays[f"b.{n}"] = best_params[n].data
        arrays[f"m.{n}"] = state.m[n]
        arrays[f"v.{n}"] = state.v[n]
    arrays["meta.int"] = np.array([state.step, state.skipped, next_epoch, plateau.bad],
                                  dtype=np.int64)
    arrays["meta.float"] = np.array([best_val, plateau.lr, plateau.best])
    with open(path, "wb") as fh:  # keep the exact path (savez would append .npz)
        np.savez(fh, **arrays)


def load_train_state(path, params: ModelParams, state: AdamState,
                     plateau: _PlateauTracker):
    """Restore in place; returns (best_params, next_epoch, best_val)."""
    with np.load(path) as blob:
        best_params = params.copy()
        for n, t in params.tensors.items():
            t.data = blob[f"p.{n}"].copy()
            best_params[n].data = blob[f"b.{n}"].copy()
            state.m[n] = blob[f"m.{n}"].copy()
            state.v[n] = blob[f"v.{n}"].copy()
        step, skipped, next_epoch, plateau_bad = (int(v) for v in blob["meta.int"])
        best_val, plateau_lr, plateau_best = (float(v) for v in blob["meta.float"])
    state.step, state.skipped = step, skipped
    plateau.lr, plateau.best, plateau.bad = plateau_lr, plateau_best, plateau_bad
    return best_params, next_epoch, best_val


# ---------------------------------------------------------------------------
# training loops

def _pretext_batch(frames_subset, config: TrainConfig, cutoff: float, rng):
    if config.task == "mask-pretrain":
        samples = [make_masked_sample(f, config.mask_ratio, rng,
                                      anchor=config.mask_anchor)
                   for f in frames_subset]
        return collate_masked(samples, cutoff)
    samples = [make_noised_sample(f, config.sigma, rng) for f in frames_subset]
    return collate_noised(samples, cutoff)


def _finish(config: TrainConfig, result: RunResult) -> RunResult:
    if config.checkpoint_path:
        save_params(result.params, config.checkpoint_path)
    if config.metrics_path:
        write_metrics_csv(result.records, config.metrics_path)
    return result


def _diverged(config: TrainConfig, records, best_params, epoch) -> DivergenceError:
    if config.checkpoint_path:
        save_params(best_params, config.checkpoint_path)
    if config.metrics_path:
        write_metrics_csv(records, config.metrics_path)
    return DivergenceError(
        f"every step of epoch {epoch} failed; last good checkpoint kept",
        checkpoint_path=config.checkpoint_path,
    )


def run_pretrain(config: TrainConfig, model_config: ModelConfig, frames,
                 resume_from=None, log=None) -> RunResult:
    """Self-supervised training on the train split of unlabeled frames.

    Masks and noise are redrawn every epoch from a (seed, epoch)-keyed
    generator; validation uses one fixed set of samples so epoch scores are
    comparable.  The best-validation parameters are kept (and written to
    config.checkpoint_path when set).  ``log``, when given, is called with
    each epoch's MetricsRecord.
    """
    if config.task not in PRETRAIN_TASKS:
        raise ValueError(f"run_pretrain cannot run task {config.task!r}")
    train, val, _ = split_dataset(frames, seed=config.seed)
    cutoff = model_config.cutoff

    params = init_params(model_config, seed=config.seed)
    start_params = params.copy()
    state = init_adam_state(params)
    plateau = _PlateauTracker(config)
    best_params, best_val, first_epoch = params.copy(), np.inf, 0
    if resume_from is not None:
        best_params, first_epoch, best_val = load_train_state(
            resume_from, params, state, plateau)

    val_rng = np.random.default_rng([config.seed, 0])
    val_batches = [
        _pretext_batch([val[i] for i in idx], config, cutoff, val_rng)
        for idx in iter_batches(len(val), config.batch_size)
    ]

    records = []
    for epoch in range(first_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = _epoch_lr(epoch, config, plateau)
        rng = np.random.default_rng([config.seed, 1 + epoch])
        skipped_before = state.skipped
        losses = []
        for idx in iter_batches(len(train), config.batch_size, rng=rng):
            batch = _pretext_batch([train[i] for i in idx], config, cutoff, rng)
            try:
                loss = _pretext_loss(params, batch, config)
                grads = _named_grads(params, ad.backward(loss.scalar))
            except FloatingPointError:
                state.skipped += 1
                continue
            losses.append(loss.item())
            adamw_step(params, grads, state, lr, config.weight_decay)
        if not losses:
            raise _diverged(config, records, best_params, epoch)

        try:
            with ad.no_grad():
                val_loss = float(np.mean([
                    _pretext_loss(params, b, config).item() for b in val_batches
                ]))
        except FloatingPointError:
            val_loss = np.inf  # exploded params: epoch cannot become the best
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        plateau.update(val_loss)
        records.append(MetricsRecord(
            epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss,
            lr=lr, skipped_steps=state.skipped - skipped_before,
            wall_time_s=time.perf_counter() - t0))
        if log is not None:
            log(records[-1])
        if config.state_path:
            save_train_state(config.state_path, params, best_params, state,
                             epoch + 1, best_val, plateau)

    return _finish(config, RunResult(
        params=best_params, final_params=params, start_params=start_params,
        records=records, state=state, best_val=best_val))


def run_finetune(config: TrainConfig, model_config: ModelConfig, frames,
                 init="scratch", resume_from=None, log=None) -> RunResult:
    """Supervised energy/force training; init is "scratch", a pretrained
    checkpoint path, or an in-memory ModelParams whose trunk is transferred.

    Validation force RMSE selects the best parameters each epoch; the test
    split is scored once at the end, from those best parameters.
    """
    if config.task not in SUPERVISED_TASKS:
        raise ValueError(f"run_finetune cannot run task {config.task!r}")
    if any(f.energy is None or f.forces is None for f in frames):
        raise ValueError("finetuning needs labeled frames")
    train, val, test = split_dataset(frames, seed=config.seed)
    cutoff = model_config.cutoff

    if isinstance(init, ModelParams):
        params = transfer_trunk(init, init_params(model_config, seed=config.seed))
    elif init == "scratch":
        params = init_params(model_config, seed=config.seed)
    else:
        params = transfer_trunk(load_params(init),
                                init_params(model_config, seed=config.seed))
    if resume_from is None:
        calibrate_output_scales(params, train)
    start_params = params.copy()
    state = init_adam_state(params)
    plateau = _PlateauTracker(config)
    best_params, best_val, first_epoch = params.copy(), np.inf, 0
    if resume_from is not None:
        best_params, first_epoch, best_val = load_train_state(
            resume_from, params, state, plateau)

    records = []
    for epoch in range(first_epoch, config.epochs):
        t0 = time.perf_counter()
        lr = _epoch_lr(epoch, config, plateau)
        rng = np.random.default_rng([config.seed, 1 + epoch])
        skipped_before = state.skipped
        losses = []
        for idx in iter_batches(len(train), config.batch_size, rng=rng):
            batch = collate_frames([train[i] for i in idx], cutoff)
            try:
                loss_value, _, grads = _supervised_grads(params, batch, config)
            except FloatingPointError:
                state.skipped += 1
                continue
            losses.append(loss_value)
            adamw_step(params, grads, state, lr, config.weight_decay)
        if not losses:
            raise _diverged(config, records, best_params, epoch)

        try:
            val_rec = evaluate(params, val, batch_size=config.batch_size,
                               w_force=config.w_force, w_energy=config.w_energy)
        except FloatingPointError:
            val_rec = MetricsRecord(epoch=epoch)  # exploded params
        if val_rec.val_force_rmse is not None and val_rec.val_force_rmse < best_val:
            best_val = val_rec.val_force_rmse
            best_params = params.copy()
        plateau.update(np.inf if val_rec.val_force_rmse is None
                       else val_rec.val_force_rmse)
        records.append(MetricsRecord(
            epoch=epoch, train_loss=float(np.mean(losses)),
            val_loss=val_rec.val_loss,
            val_force_rmse=val_rec.val_force_rmse,
            val_force_mae=val_rec.val_force_mae,
            val_energy_rmse=val_rec.val_energy_rmse,
            val_energy_mae=val_rec.val_energy_mae,
            lr=lr, skipped_steps=state.skipped - skipped_before,
            wall_time_s=time.perf_counter() - t0))
        if log is not None:
            log(records[-1])
        if config.state_path:
            save_train_state(config.state_path, params, best_params, state,
                             epoch + 1, best_val, plateau)

    test_record = evaluate(best_params, test, batch_size=config.batch_size,
                           w_force=config.w_force, w_energy=config.w_energy)
    return _finish(config, RunResult(
        params=best_params, final_params=params, start_params=start_params,
        records=records, state=state, best_val=best_val,
        test_record=test_record))
