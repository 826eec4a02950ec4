"""Stage functions behind the command line: generate, train, attack, matrix, report.

Each stage is a pure function of its inputs and seed and leaves a
``manifest.json`` in its output directory recording the resolved
configuration, input file hashes and the code version.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .attacks import AttackConfig, default_attacks, run_attack
from .models import Checkpoint, build_discriminator, build_policy, load_checkpoint, save_checkpoint
from .rng import derive_seed
from .scenario import GeneratorConfig, generate_dataset
from .state import Dataset, read_dataset, write_dataset
from .training import ConfigError, TrainConfig, train_bc, train_irl

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
REPORT_FILE = "train_report.json"
MANIFEST_FILE = "manifest.json"
PER_SAMPLE_FILE = "per_sample.npz"
MATRIX_NAMES = {"bc_mlp": "bc_mlp", "bc_transformer": "bc_transformer", "irl_policy": "irl"}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def code_version() -> dict:
    """Package version plus a hash over the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest(),
            "python": platform.python_version(), "numpy": np.__version__}


def write_manifest(out_dir, command: str, config: dict, inputs: dict[str, str] | None = None,
                   outputs: list[str] | None = None, argv: list[str] | None = None) -> Path:
    out = Path(out_dir)
    doc = {
        "command": command,
        "argv": list(sys.argv if argv is None else argv),
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in (inputs or {}).items()},
        "outputs": sorted(outputs or []),
        "code": code_version(),
    }
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None


# ---------------------------------------------------------------- generate

def generator_config(doc: dict | None, seed: int | None = None) -> GeneratorConfig:
    doc = dict(doc or {})
    if seed is not None:
        doc["seed"] = seed
    known = {f.name for f in fields(GeneratorConfig)}
    errors = [f"{k}: unknown field" for k in sorted(set(doc) - known)]
    if errors:
        raise ConfigError(errors)
    try:
        cfg = GeneratorConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from None
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def run_generate(config: GeneratorConfig, out_dir) -> Dataset:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(config)
    write_dataset(dataset, out / DATASET_FILE)
    write_manifest(out, "generate", config.to_dict(), outputs=[DATASET_FILE])
    return dataset


# ---------------------------------------------------------------- train

def train_config(doc: dict | None, seed: int | None = None) -> TrainConfig:
    doc = dict(doc or {})
    if seed is not None:
        doc["seed"] = seed
    return TrainConfig.from_dict(doc)


def train_model(dataset: Dataset, config: TrainConfig):
    """Build the policy named by ``config.kind`` and train it."""
    policy = build_policy(config.kind, config.seed)
    if config.kind == "irl_policy":
        return train_irl(policy, build_discriminator(config.seed), dataset, config)
    return train_bc(policy, dataset, config)


def run_train(dataset_path, config: TrainConfig, out_dir) -> tuple[Checkpoint, dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_dataset(dataset_path)
    checkpoint, report = train_model(dataset, config)
    save_checkpoint(checkpoint, out / CHECKPOINT_FILE)
    report.checkpoint = CHECKPOINT_FILE
    doc = report.to_dict()
    (out / REPORT_FILE).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    write_manifest(out, "train", config.to_dict(), {"dataset": dataset_path}, [CHECKPOINT_FILE, REPORT_FILE])
    return checkpoint, doc


# ---------------------------------------------------------------- attack

def attack_config(doc: dict | None) -> AttackConfig:
    return AttackConfig.from_dict(dict(doc or {"kind": "fgsm"}))


def run_attack_cmd(checkpoint_path, dataset_path, config: AttackConfig, out_dir) -> dict:
    """Attack every sample; write the perturbed dataset and its metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = load_checkpoint(checkpoint_path)
    dataset = read_dataset(dataset_path)
    model = checkpoint.model.eval()
    adv_states = np.concatenate([
        run_attack(model, dataset.states[i:i + ev.EVAL_CHUNK], dataset.targets[i:i + ev.EVAL_CHUNK], config)
        for i in range(0, len(dataset), ev.EVAL_CHUNK)
    ]) if len(dataset) else dataset.states.copy()
    meta = dict(dataset.metadata)
    meta["attack"] = config.to_dict()
    attacked = Dataset(adv_states, dataset.targets, dataset.seq, dataset.t, dataset.crossing, meta)
    write_dataset(attacked, out / DATASET_FILE)
    clean_pred = model.predict(dataset.states)
    adv_pred = model.predict(adv_states)
    summary = {
        "kind": config.kind, "n_samples": len(dataset),
        "ade_clean": float(np.mean(ev.ade(clean_pred, dataset.targets))),
        "fde_clean": float(np.mean(ev.fde(clean_pred, dataset.targets))),
        "ade_adv": float(np.mean(ev.ade(adv_pred, dataset.targets))),
        "fde_adv": float(np.mean(ev.fde(adv_pred, dataset.targets))),
        "max_abs_perturbation": float(np.max(np.abs(adv_states - dataset.states))) if len(dataset) else 0.0,
    }
    (out / "attack_summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    write_manifest(out, "attack", config.to_dict(), {"checkpoint": checkpoint_path, "dataset": dataset_path},
                   [DATASET_FILE, "attack_summary.json"])
    return summary


# ---------------------------------------------------------------- matrix

@dataclass
class MatrixConfig:
    attacks: list[dict] = field(default_factory=lambda: [a.to_dict() for a in default_attacks()])
    eval_samples_per_crossing: int = 500

    def attack_configs(self) -> list[AttackConfig]:
        return [AttackConfig.from_dict(a) for a in self.attacks]

    @classmethod
    def from_dict(cls, doc: dict | None) -> "MatrixConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        errors = [f"{k}: unknown field" for k in sorted(set(doc) - known)]
        cfg = cls(**{k: v for k, v in doc.items() if k in known})
        if cfg.eval_samples_per_crossing < 1:
            errors.append(f"eval_samples_per_crossing: must be >= 1, got {cfg.eval_samples_per_crossing}")
        for i, a in enumerate(cfg.attacks):
            try:
                AttackConfig.from_dict(a)
            except ConfigError as exc:
                errors += [f"attacks[{i}].{e}" for e in exc.errors]
            except TypeError as exc:
                errors.append(f"attacks[{i}]: {exc}")
        if errors:
            raise ConfigError(errors)
        return cfg

    def to_dict(self) -> dict:
        return {"attacks": list(self.attacks), "eval_samples_per_crossing": self.eval_samples_per_crossing}


def eval_subset(dataset: Dataset, limit: int) -> Dataset:
    """At most ``limit`` samples, evenly spaced so every sequence contributes."""
    if len(dataset) <= limit:
        return dataset
    index = np.unique(np.round(np.linspace(0, len(dataset) - 1, limit)).astype(np.int64))
    return dataset.subset(index)


def split_by_crossing(datasets: list[Dataset], limit: int) -> dict[str, Dataset]:
    merged = Dataset.concat(datasets) if len(datasets) > 1 else datasets[0]
    return {c: eval_subset(merged.for_crossing(c), limit) for c in merged.crossings()}


def matrix_name(checkpoint: Checkpoint) -> str:
    return MATRIX_NAMES.get(checkpoint.model.kind, checkpoint.model.kind)


def run_matrix_cmd(checkpoint_paths: list, dataset_paths: list, config: MatrixConfig, out_dir,
                   jobs: int = 1) -> list[ev.CellResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = {}
    for p in checkpoint_paths:
        ck = load_checkpoint(p)
        checkpoints[matrix_name(ck)] = ck
    datasets = split_by_crossing([read_dataset(p) for p in dataset_paths], config.eval_samples_per_crossing)
    results = ev.run_matrix(checkpoints, datasets, config.attack_configs(), jobs=jobs)
    rows = [r.row for r in results]
    ev.write_rows_csv(rows, out / "matrix.csv")
    (out / "matrix.json").write_text(json.dumps(ev.rows_to_json(rows), indent=1), encoding="utf-8")
    ev.save_per_sample(results, out / PER_SAMPLE_FILE)
    inputs = {f"checkpoint{i}": p for i, p in enumerate(checkpoint_paths)}
    inputs.update({f"dataset{i}": p for i, p in enumerate(dataset_paths)})
    write_manifest(out, "matrix", config.to_dict(), inputs, ["matrix.csv", "matrix.json", PER_SAMPLE_FILE])
    return results


# ---------------------------------------------------------------- report

def run_report(matrix_dir, k: int, out_dir) -> tuple[list[ev.FailureCase], bool]:
    matrix_dir = Path(matrix_dir)
    per_sample = matrix_dir / PER_SAMPLE_FILE
    if not per_sample.exists():
        raise FileNotFoundError(f"{per_sample}: per-sample results not found (run the matrix command first)")
    results = ev.load_per_sample(per_sample)
    rows = ev.read_rows_json(matrix_dir / "matrix.json")
    failures, truncated = ev.rank_failures(results, k)
    written = ev.emit_report(rows, failures, out_dir)
    write_manifest(out_dir, "report", {"k": k, "truncated": truncated},
                   {"per_sample": per_sample, "matrix": matrix_dir / "matrix.json"},
                   [p.name for p in written])
    return failures, truncated


# ---------------------------------------------------------------- end to end

@dataclass
class PipelineConfig:
    """Everything for generate -> train x3 -> matrix -> report under one seed."""

    seed: int = 0
    generator: dict = field(default_factory=dict)
    heldout_sequences_per_crossing: int = 3
    train: dict = field(default_factory=dict)
    models: list[str] = field(default_factory=lambda: ["bc_mlp", "bc_transformer", "irl_policy"])
    matrix: dict = field(default_factory=dict)
    top_k: int = 9

    @classmethod
    def from_dict(cls, doc: dict | None) -> "PipelineConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        errors = [f"{k}: unknown field" for k in sorted(set(doc) - known)]
        cfg = cls(**{k: v for k, v in doc.items() if k in known})
        for sub, check in (("generator", lambda: generator_config(cfg.generator, cfg.seed)),
                           ("matrix", lambda: MatrixConfig.from_dict(cfg.matrix))):
            try:
                check()
            except ConfigError as exc:
                errors += [f"{sub}.{e}" for e in exc.errors]
        for kind in cfg.models:
            try:
                train_config(dict(cfg.train, kind=kind), cfg.seed)
            except ConfigError as exc:
                errors += [f"train.{e}" for e in exc.errors]
        if cfg.heldout_sequences_per_crossing < 1:
            errors.append("heldout_sequences_per_crossing: must be >= 1")
        if cfg.top_k < 1:
            errors.append("top_k: must be >= 1")
        if errors:
            raise ConfigError(sorted(set(errors)))
        return cfg

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def run_pipeline(config: PipelineConfig, out_dir, jobs: int = 1) -> dict:
    """Run every stage into sub-directories of ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = generator_config(config.generator, config.seed)
    held = generator_config(dict(config.generator, sequences_per_crossing=config.heldout_sequences_per_crossing,
                                 sample_stride=1),
                            derive_seed(config.seed, "heldout"))
    run_generate(gen, out / "train_data")
    run_generate(held, out / "heldout_data")
    checkpoints = []
    for kind in config.models:
        cfg = train_config(dict(config.train, kind=kind), config.seed)
        run_train(out / "train_data" / DATASET_FILE, cfg, out / f"model_{kind}")
        checkpoints.append(out / f"model_{kind}" / CHECKPOINT_FILE)
    run_matrix_cmd(checkpoints, [out / "heldout_data" / DATASET_FILE], MatrixConfig.from_dict(config.matrix),
                   out / "matrix", jobs=jobs)
    run_report(out / "matrix", config.top_k, out / "report")
    write_manifest(out, "pipeline", config.to_dict())
    return {"report": out / "report", "matrix": out / "matrix"}
