"""Config-driven command line front end.

Every command is a function of (config file, flags, seed): outputs land in
a fresh run directory named by config hash plus timestamp, nothing existing
is overwritten, and the metrics files carry no timing, so repeating an
invocation reproduces them byte for byte.

Exit codes: 0 success, 2 config or user error, 3 numerical failure.
"""

from __future__ import annotations

import os

# Cap BLAS thread pools before numpy loads; single-threaded kernels keep
# reduction order, and therefore every metric byte, reproducible.
_threads = os.environ.get("NEURALPOT_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datagen import (
    KJMOL_TO_MEV, MASS_OF, BlowUpError, ForceField, GenConfig, MDState,
    SingularityError, compute_forces_energy, forcefield_for,
    generate_trajectory,
)
from .dataset import load_frames, save_frames, split_dataset, topology_from_arrays
from .geometry import Box
from .models import ModelConfig
from .trainer import (
    PRETRAIN_TASKS, SUPERVISED_TASKS, DivergenceError, MetricsRecord,
    TrainConfig, evaluate, run_finetune, run_pretrain, write_summary_json,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

CONFIG_VERSION = 1
_SECTIONS = ("datagen", "dataset", "model", "train", "eval")


class ConfigError(ValueError):
    """Bad config file or flags; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config schema

@dataclass(frozen=True)
class DatasetSection:
    path: str | None = None
    max_frames: int | None = None

    def __post_init__(self):
        if self.max_frames is not None and self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")


@dataclass(frozen=True)
class EvalSection:
    checkpoint: str | None = None
    split: str = "test"
    batch_size: int = 16

    def __post_init__(self):
        if self.split not in ("train", "val", "test", "all"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    datagen: GenConfig | None
    dataset: DatasetSection
    model: ModelConfig | None
    train: TrainConfig | None
    eval: EvalSection
    raw: dict


_FF_FIELDS = {f.name for f in dataclasses.fields(ForceField)}
_FF_SPECIES_DICTS = ("lj_eps", "lj_sigma", "charge")


def _normalized_ff_overrides(overrides, where: str) -> dict:
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}.ff_overrides must be an object")
    unknown = sorted(set(overrides) - _FF_FIELDS)
    if unknown:
        raise ConfigError(f"{where}.ff_overrides: unknown keys {unknown}")
    out = dict(overrides)
    for key in _FF_SPECIES_DICTS:
        if key in out:  # JSON object keys are strings; species are ints
            try:
                out[key] = {int(z): float(v) for z, v in out[key].items()}
            except (TypeError, ValueError, AttributeError):
                raise ConfigError(
                    f"{where}.ff_overrides.{key} must map species to numbers"
                ) from None
    return out


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = dict(data)
    if cls is GenConfig and "ff_overrides" in kwargs:
        kwargs["ff_overrides"] = _normalized_ff_overrides(
            kwargs["ff_overrides"], where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {doc['version']!r}")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"version"})
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")

    def section(name, cls, default):
        return (_build_section(cls, doc[name], name) if name in doc else default)

    return RunConfig(
        datagen=section("datagen", GenConfig, None),
        dataset=section("dataset", DatasetSection, DatasetSection()),
        model=section("model", ModelConfig, None),
        train=section("train", TrainConfig, None) if "train" in doc else None,
        eval=section("eval", EvalSection, EvalSection()),
        raw=doc,
    )


def _require(value, section: str, command: str):
    if value is None:
        raise ConfigError(f"{command} needs a {section!r} config section")
    return value


# ---------------------------------------------------------------------------
# run directories and shared plumbing

def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _make_run_dir(base, command: str, payload: dict) -> Path:
    root = Path(base)
    root.mkdir(parents=True, exist_ok=True)
    stem = f"{command}-{_config_hash(payload)}-{time.strftime('%Y%m%d-%H%M%S')}"
    for k in range(1000):
        candidate = root / (stem if k == 0 else f"{stem}.{k}")
        try:
            candidate.mkdir(exist_ok=False)
            return candidate
        except FileExistsError:
            continue
    raise ConfigError(f"cannot allocate a fresh run directory under {root}")


def _load_dataset(rc: RunConfig, command: str, labeled: bool):
    path = rc.dataset.path
    if path is None:
        raise ConfigError(f"{command} needs dataset.path")
    if not Path(path).is_file():
        raise ConfigError(f"dataset file not found: {path}")
    frames = load_frames(path)
    if rc.dataset.max_frames is not None:
        frames = frames[: rc.dataset.max_frames]
    if not frames:
        raise ConfigError(f"dataset {path} is empty")
    if labeled and any(f.energy is None or f.forces is None for f in frames):
        raise ConfigError(f"{command} needs energy/force labels on every frame")
    return frames


def _with_output_paths(cfg: TrainConfig, run_dir: Path) -> TrainConfig:
    return replace(
        cfg,
        checkpoint_path=cfg.checkpoint_path or str(run_dir / "checkpoint.bin"),
        metrics_path=cfg.metrics_path or str(run_dir / "metrics.csv"),
        state_path=cfg.state_path or str(run_dir / "train.state"),
    )


def _echo_config(rc: RunConfig, run_dir: Path) -> None:
    write_summary_json(rc.raw, run_dir / "config.json")


def _print_epoch(rec: MetricsRecord) -> None:
    parts = [f"epoch {rec.epoch:4d}", f"lr {rec.lr:.3g}"]
    if rec.train_loss is not None:
        parts.append(f"train {rec.train_loss:.6g}")
    if rec.val_loss is not None:
        parts.append(f"val {rec.val_loss:.6g}")
    if rec.val_force_rmse is not None:
        parts.append(f"F_rmse {rec.val_force_rmse:.6g}")
    if rec.skipped_steps:
        parts.append(f"skipped {rec.skipped_steps}")
    print("  ".join(parts), flush=True)


# ---------------------------------------------------------------------------
# gen-data

def _label_spot_check(frames, config: GenConfig, n_components: int = 6) -> float:
    """Worst relative error between stored forces and central differences of
    the generator energy, over a few random components of one frame."""
    frame = frames[len(frames) // 2]
    ff = forcefield_for(config)
    topo = topology_from_arrays(frame.mol_of_atom, frame.species)
    masses = np.array([MASS_OF[int(z)] for z in frame.species])

    def energy_at(pos):  # kJ/mol, converted to label units at the call site
        state = MDState(positions=pos, velocities=np.zeros_like(pos),
                        masses=masses, species=frame.species,
                        box=Box(frame.box_lengths))
        return compute_forces_energy(state, ff, topo)[1]

    rng = np.random.default_rng(0)
    picks = rng.choice(frame.positions.size,
                       size=min(n_components, frame.positions.size),
                       replace=False)
    h = 1e-5
    worst = 0.0
    for flat in picks:
        i, j = divmod(int(flat), 3)
        plus = frame.positions.copy()
        plus[i, j] += h
        minus = frame.positions.copy()
        minus[i, j] -= h
        fd = -(energy_at(plus) - energy_at(minus)) / (2 * h) * KJMOL_TO_MEV
        scale = max(1.0, abs(frame.forces[i, j]))
        worst = max(worst, abs(fd - frame.forces[i, j]) / scale)
    return worst


def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config)
    gen = _require(rc.datagen, "datagen", "gen-data")
    out = Path(args.out)
    if out.exists():
        raise ConfigError(f"refusing to overwrite existing file {out}")
    frames = generate_trajectory(gen, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_frames(out, frames)
    worst = _label_spot_check(frames, gen)
    status = "ok" if worst < 1e-6 else "SUSPECT"
    print(f"wrote {len(frames)} frames to {out}")
    print(f"label spot check: max rel err {worst:.3g} ({status})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain / finetune / evaluate

def cmd_pretrain(args) -> int:
    rc = load_run_config(args.config)
    model = _require(rc.model, "model", "pretrain")
    train = _require(rc.train, "train", "pretrain")
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if train.task not in PRETRAIN_TASKS:
        raise ConfigError(
            f"pretrain needs train.task in {PRETRAIN_TASKS}, got {train.task!r}")
    frames = _load_dataset(rc, "pretrain", labeled=False)

    payload = {"command": "pretrain", "config": rc.raw, "seed": train.seed}
    run_dir = _make_run_dir(args.out_dir, "pretrain", payload)
    _echo_config(rc, run_dir)
    train = _with_output_paths(train, run_dir)
    print(f"run directory: {run_dir}")

    result = run_pretrain(train, model, frames, log=_print_epoch)
    write_summary_json({
        "command": "pretrain",
        "config_hash": _config_hash(payload),
        "task": train.task,
        "seed": train.seed,
        "epochs": len(result.records),
        "best_val_loss": result.best_val,
        "final_train_loss": result.records[-1].train_loss,
        "skipped_steps": result.state.skipped,
        "checkpoint": "checkpoint.bin",
        "metrics": "metrics.csv",
    }, run_dir / "summary.json")
    print(f"best validation loss {result.best_val:.6g}; "
          f"checkpoint at {run_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = load_run_config(args.config)
    model = _require(rc.model, "model", "finetune")
    train = _require(rc.train, "train", "finetune")
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if train.task not in SUPERVISED_TASKS:
        raise ConfigError(
            f"finetune needs train.task in {SUPERVISED_TASKS}, got {train.task!r}")
    init = args.init
    if init != "scratch":
        if not Path(init).is_file():
            raise ConfigError(f"init checkpoint not found: {init}")
        task = "finetune"
    else:
        task = "scratch"
    train = replace(train, task=task)
    frames = _load_dataset(rc, "finetune", labeled=True)

    payload = {"command": "finetune", "config": rc.raw, "seed": train.seed,
               "init": init}
    run_dir = _make_run_dir(args.out_dir, "finetune", payload)
    _echo_config(rc, run_dir)
    train = _with_output_paths(train, run_dir)
    print(f"run directory: {run_dir}")

    result = run_finetune(train, model, frames, init=init, log=_print_epoch)
    test = result.test_record
    write_summary_json({
        "command": "finetune",
        "config_hash": _config_hash(payload),
        "task": train.task,
        "init": init,
        "seed": train.seed,
        "epochs": len(result.records),
        "best_val_force_rmse": result.best_val,
        "test_force_rmse": test.val_force_rmse,
        "test_force_mae": test.val_force_mae,
        "test_energy_rmse": test.val_energy_rmse,
        "test_energy_mae": test.val_energy_mae,
        "skipped_steps": result.state.skipped,
        "checkpoint": "checkpoint.bin",
        "metrics": "metrics.csv",
    }, run_dir / "summary.json")
    print(f"test force RMSE {test.val_force_rmse:.6g} meV/A, "
          f"energy RMSE {test.val_energy_rmse:.6g} meV; "
          f"checkpoint at {run_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc = load_run_config(args.config)
    ckpt = args.ckpt or rc.eval.checkpoint
    if ckpt is None:
        raise ConfigError("evaluate needs --ckpt or eval.checkpoint")
    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    frames = _load_dataset(rc, "evaluate", labeled=True)
    split = args.split or rc.eval.split
    if split != "all":
        seed = args.seed if args.seed is not None else (
            rc.train.seed if rc.train else 0)
        parts = dict(zip(("train", "val", "test"),
                         split_dataset(frames, seed=seed)))
        frames = parts[split]
    else:
        seed = None

    payload = {"command": "evaluate", "config": rc.raw, "ckpt": ckpt,
               "split": split, "seed": seed}
    run_dir = _make_run_dir(args.out_dir, "evaluate", payload)
    _echo_config(rc, run_dir)

    rec = evaluate(ckpt, frames, batch_size=rc.eval.batch_size)
    write_summary_json({
        "command": "evaluate",
        "config_hash": _config_hash(payload),
        "checkpoint": ckpt,
        "split": split,
        "split_seed": seed,
        "n_frames": len(frames),
        "force_rmse_mev_per_angstrom": rec.val_force_rmse,
        "force_mae_mev_per_angstrom": rec.val_force_mae,
        "energy_rmse_mev": rec.val_energy_rmse,
        "energy_mae_mev": rec.val_energy_mae,
        "loss": rec.val_loss,
    }, run_dir / "summary.json")
    print(f"run directory: {run_dir}")
    print(f"force  RMSE {rec.val_force_rmse:.6g} meV/A   "
          f"MAE {rec.val_force_mae:.6g} meV/A")
    print(f"energy RMSE {rec.val_energy_rmse:.6g} meV     "
          f"MAE {rec.val_energy_mae:.6g} meV")
    return EXIT_OK


# ---------------------------------------------------------------------------
# masking-ratio ablation

def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise ConfigError(f"{flag} must be a comma-separated number list") from None
    if not values:
        raise ConfigError(f"{flag} is empty")
    return values


def _parse_int_list(text: str, flag: str) -> list[int]:
    values = _parse_float_list(text, flag)
    if any(v != int(v) for v in values):
        raise ConfigError(f"{flag} must be a comma-separated integer list")
    return [int(v) for v in values]


def _best_record(records) -> MetricsRecord:
    return min(records, key=lambda r: (np.inf if r.val_force_rmse is None
                                       else r.val_force_rmse))


def cmd_ablate_ratio(args) -> int:
    rc = load_run_config(args.config)
    model = _require(rc.model, "model", "ablate-ratio")
    base = _require(rc.train, "train", "ablate-ratio")
    frames = _load_dataset(rc, "ablate-ratio", labeled=True)
    ratios = _parse_float_list(args.ratios, "--ratios")
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError("--ratios must lie in [0, 1]")
    seeds = _parse_int_list(args.seeds, "--seeds")
    pre_epochs = args.pretrain_epochs or base.epochs
    ft_epochs = args.finetune_epochs or base.epochs

    payload = {"command": "ablate-ratio", "config": rc.raw, "ratios": ratios,
               "seeds": seeds, "pretrain_epochs": pre_epochs,
               "finetune_epochs": ft_epochs}
    run_dir = _make_run_dir(args.out_dir, "ablate", payload)
    _echo_config(rc, run_dir)
    print(f"run directory: {run_dir}")

    clean = dict(checkpoint_path=None, metrics_path=None, state_path=None)
    rows, failures = [], []
    for ratio in ratios + ["scratch"]:
        for seed in seeds:
            tag = "scratch" if ratio == "scratch" else f"{ratio:g}"
            if ratio == 0:
                # no molecule gets masked, so pretraining has no targets
                note = "ratio 0 produces no masked targets; skipped"
                failures.append({"ratio": tag, "seed": seed, "error": note})
                rows.append((tag, seed, None, None, None))
                print(f"ratio {tag} seed {seed}: {note}", file=sys.stderr)
                continue
            try:
                if ratio == "scratch":
                    cfg = replace(base, task="scratch", seed=seed,
                                  epochs=ft_epochs, **clean)
                    result = run_finetune(cfg, model, frames, init="scratch")
                else:
                    pre_cfg = replace(base, task="mask-pretrain",
                                      mask_ratio=ratio, seed=seed,
                                      epochs=pre_epochs, **clean)
                    pre = run_pretrain(pre_cfg, model, frames)
                    ft_cfg = replace(base, task="finetune", seed=seed,
                                     epochs=ft_epochs, **clean)
                    result = run_finetune(ft_cfg, model, frames,
                                          init=pre.params)
            except (DivergenceError, FloatingPointError,
                    BlowUpError, ValueError) as exc:
                failures.append({"ratio": tag, "seed": seed, "error": str(exc)})
                rows.append((tag, seed, None, None, None))
                print(f"ratio {tag} seed {seed} failed: {exc}", file=sys.stderr)
                continue
            best = _best_record(result.records)
            rows.append((tag, seed, best.val_force_rmse, best.val_energy_rmse,
                         len(result.records)))
            print(f"ratio {tag} seed {seed}: force_rmse "
                  f"{best.val_force_rmse:.6g} energy_rmse "
                  f"{best.val_energy_rmse:.6g} ({len(result.records)} epochs)",
                  flush=True)

    csv_path = run_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("ratio", "seed", "force_rmse", "energy_rmse", "epochs"))
        for tag, seed, f_rmse, e_rmse, epochs in rows:
            writer.writerow((
                tag, seed,
                "" if f_rmse is None else f"{f_rmse:.17g}",
                "" if e_rmse is None else f"{e_rmse:.17g}",
                "" if epochs is None else epochs,
            ))
    write_summary_json({
        "command": "ablate-ratio",
        "config_hash": _config_hash(payload),
        "ratios": ratios,
        "seeds": seeds,
        "pretrain_epochs": pre_epochs,
        "finetune_epochs": ft_epochs,
        "rows": len(rows),
        "failures": failures,
        "csv": "ablation.csv",
    }, run_dir / "summary.json")
    print(f"wrote {len(rows)} rows to {csv_path} "
          f"({len(failures)} failed or skipped)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and entry point

def _add_common(sub, out_dir=True):
    sub.add_argument("--config", required=True, help="RunConfig JSON file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config's seed")
    if out_dir:
        sub.add_argument("--out-dir", default="runs",
                         help="parent directory for run outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuralpot",
        description="Data generation, pretraining, finetuning, evaluation "
                    "and ablation for GNN interatomic potentials.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data",
                       help="run the classical generator, write labeled frames")
    g.add_argument("--config", required=True, help="RunConfig JSON file")
    g.add_argument("--out", required=True, help="output dataset file")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised training")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="supervised energy/force training")
    _add_common(f)
    f.add_argument("--init", default="scratch",
                   help="'scratch' or a pretrained checkpoint to transfer from")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="score a checkpoint on labeled frames")
    _add_common(e)
    e.add_argument("--ckpt", default=None, help="checkpoint (or eval.checkpoint)")
    e.add_argument("--split", default=None,
                   choices=("train", "val", "test", "all"))
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate-ratio",
                       help="masking-ratio sweep plus scratch baseline")
    _add_common(a)
    a.add_argument("--ratios", default="0.25,0.5,0.9",
                   help="comma-separated masking ratios")
    a.add_argument("--seeds", default="0,1", help="comma-separated seeds")
    a.add_argument("--pretrain-epochs", type=int, default=None)
    a.add_argument("--finetune-epochs", type=int, default=None)
    a.set_defaults(func=cmd_ablate_ratio)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"last good checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, BlowUpError, SingularityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
