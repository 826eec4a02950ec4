"""Displacement metrics, the crossing x model x attack matrix, and failure ranking."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, default_attacks, run_attack
from .autodiff import ShapeError
from .models import Checkpoint
from .state import HORIZON, TARGET_CHANNELS, Dataset

MODEL_ORDER = ("bc_mlp", "bc_transformer", "irl")
CSV_COLUMNS = ("crossing", "model", "attack", "ade_clean", "fde_clean", "ade_adv", "fde_adv",
               "delta_ade", "delta_fde", "n_samples")
METRIC_COLUMNS = CSV_COLUMNS[3:9]
EVAL_CHUNK = 256


class MatrixError(RuntimeError):
    """A matrix cell could not be evaluated."""


def integrate_deltas(trajectory: np.ndarray) -> np.ndarray:
    """Positions from per-step (dx, dy): cumulative sum along the horizon axis."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim < 2 or traj.shape[-1] != TARGET_CHANNELS:
        raise ShapeError(f"integrate_deltas: expected (..., H, 4), got {traj.shape}")
    return np.cumsum(traj[..., :2], axis=-2)


def displacement_errors(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-step Euclidean position error, shape (..., H)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = integrate_deltas(pred) - integrate_deltas(target)
    return np.hypot(diff[..., 0], diff[..., 1])


def ade(pred, target) -> float | np.ndarray:
    """Mean displacement over the horizon; per sample for batched input."""
    return displacement_errors(pred, target).mean(axis=-1)


def fde(pred, target) -> float | np.ndarray:
    """Displacement at the last step; per sample for batched input."""
    return displacement_errors(pred, target)[..., -1]


@dataclass
class EvalRow:
    crossing: str
    model: str
    attack: str
    ade_clean: float
    fde_clean: float
    ade_adv: float
    fde_adv: float
    delta_ade: float
    delta_fde: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CellResult:
    """A matrix row plus the per-sample numbers behind it."""

    row: EvalRow
    sample_ids: list[str]
    ade_clean: np.ndarray
    fde_clean: np.ndarray
    ade_adv: np.ndarray
    fde_adv: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    target: np.ndarray


def evaluate_cell(checkpoint: Checkpoint, dataset: Dataset, attack: AttackConfig,
                  model_name: str, crossing: str) -> CellResult:
    if len(dataset) == 0:
        raise MatrixError(f"cell ({crossing}, {model_name}, {attack.kind}): empty evaluation set")
    model = checkpoint.model.eval()
    clean_pred, adv_pred = [], []
    for start in range(0, len(dataset), EVAL_CHUNK):
        s = dataset.states[start:start + EVAL_CHUNK]
        t = dataset.targets[start:start + EVAL_CHUNK]
        clean = model.predict(s)
        clean_pred.append(clean)
        if attack.kind == "clean":
            adv_pred.append(clean.copy())
        else:
            adv_pred.append(model.predict(run_attack(model, s, t, attack)))
    clean_pred = np.concatenate(clean_pred)
    adv_pred = np.concatenate(adv_pred)
    target = dataset.targets
    a_c, f_c = ade(clean_pred, target), fde(clean_pred, target)
    a_a, f_a = ade(adv_pred, target), fde(adv_pred, target)
    row = EvalRow(crossing, model_name, attack.kind,
                  float(a_c.mean()), float(f_c.mean()), float(a_a.mean()), float(f_a.mean()),
                  0.0, 0.0, len(dataset))
    row.delta_ade = row.ade_adv - row.ade_clean
    row.delta_fde = row.fde_adv - row.fde_clean
    return CellResult(row, dataset.sample_ids(), a_c, f_c, a_a, f_a, clean_pred, adv_pred, target)


def _cell_job(args):
    return evaluate_cell(*args)


def run_matrix(checkpoints: dict[str, Checkpoint], datasets: dict[str, Dataset],
               attacks: list[AttackConfig] | None = None, jobs: int = 1) -> list[CellResult]:
    """Evaluate every (crossing, model, attack) cell, crossing-major.

    ``checkpoints`` maps model names (``bc_mlp``, ``bc_transformer``, ``irl``)
    to checkpoints and ``datasets`` maps crossing ids to held-out sets.
    """
    attacks = default_attacks() if attacks is None else list(attacks)
    models = [m for m in MODEL_ORDER if m in checkpoints] + sorted(set(checkpoints) - set(MODEL_ORDER))
    cells = []
    for crossing in sorted(datasets):
        for name in models:
            if checkpoints.get(name) is None:
                raise MatrixError(f"cell ({crossing}, {name}): missing checkpoint")
            for attack in attacks:
                cells.append((checkpoints[name], datasets[crossing], attack, name, crossing))
    if jobs <= 1:
        return [evaluate_cell(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell_job, cells))


@dataclass
class FailureCase:
    sample_id: str
    crossing: str
    model: str
    attack: str
    delta_fde: float
    expert: np.ndarray
    clean: np.ndarray
    adversarial: np.ndarray

    def plot_data(self) -> dict:
        return {"expert": self.expert.tolist(), "clean": self.clean.tolist(),
                "adversarial": self.adversarial.tolist()}


def rank_failures(results: list[CellResult], k: int) -> tuple[list[FailureCase], bool]:
    """Top-k (sample, cell) pairs by per-sample delta FDE.

    Ties are broken by sample id, then by crossing, model and attack. Returns
    the cases and whether fewer than k were available.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    entries = []
    for res in results:
        r = res.row
        delta = res.fde_adv - res.fde_clean
        for i, sid in enumerate(res.sample_ids):
            entries.append((-float(delta[i]), sid, r.crossing, r.model, r.attack, res, i))
    entries.sort(key=lambda e: e[:5])
    cases = []
    for neg, sid, crossing, model, attack, res, i in entries[:k]:
        cases.append(FailureCase(sid, crossing, model, attack, -neg,
                                 integrate_deltas(res.target[i]),
                                 integrate_deltas(res.clean_pred[i]),
                                 integrate_deltas(res.adv_pred[i])))
    return cases, len(entries) < k


def _fmt(value) -> str:
    return f"{value:.3f}" if isinstance(value, float) else str(value)


def write_rows_csv(rows: list[EvalRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            d = r.to_dict()
            writer.writerow([_fmt(d[c]) for c in CSV_COLUMNS])


def rows_to_json(rows: list[EvalRow]) -> dict:
    return {"columns": list(CSV_COLUMNS), "rows": [r.to_dict() for r in rows]}


def read_rows_json(path) -> list[EvalRow]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EvalRow(**r) for r in doc["rows"]]


def save_per_sample(results: list[CellResult], path) -> None:
    """Per-sample arrays of every cell, enough to rank failures later."""
    arrays = {}
    index = []
    for n, res in enumerate(results):
        r = res.row
        index.append({"crossing": r.crossing, "model": r.model, "attack": r.attack, "n": r.n_samples})
        arrays[f"c{n}_ids"] = np.array(res.sample_ids)
        for name in ("ade_clean", "fde_clean", "ade_adv", "fde_adv", "clean_pred", "adv_pred", "target"):
            arrays[f"c{n}_{name}"] = getattr(res, name)
    arrays["index"] = np.array(json.dumps(index))
    np.savez_compressed(path, **arrays)


def load_per_sample(path) -> list[CellResult]:
    with np.load(path, allow_pickle=False) as data:
        index = json.loads(str(data["index"]))
        results = []
        for n, meta in enumerate(index):
            get = lambda name: data[f"c{n}_{name}"]  # noqa: E731
            a_c, f_c, a_a, f_a = get("ade_clean"), get("fde_clean"), get("ade_adv"), get("fde_adv")
            row = EvalRow(meta["crossing"], meta["model"], meta["attack"], float(a_c.mean()), float(f_c.mean()),
                          float(a_a.mean()), float(f_a.mean()), 0.0, 0.0, int(meta["n"]))
            row.delta_ade = row.ade_adv - row.ade_clean
            row.delta_fde = row.fde_adv - row.fde_clean
            results.append(CellResult(row, [str(s) for s in get("ids")], a_c, f_c, a_a, f_a,
                                      get("clean_pred"), get("adv_pred"), get("target")))
    return results


def emit_report(rows: list[EvalRow], failures: list[FailureCase], out_dir) -> list[Path]:
    """CSV (3 decimals), full-precision JSON twin, and one plot-data file per failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "matrix.csv", out / "matrix.json"]
    write_rows_csv(rows, written[0])
    written[1].write_text(json.dumps(rows_to_json(rows), indent=1), encoding="utf-8")
    summary = []
    for rank, case in enumerate(failures, start=1):
        path = out / f"failure_{rank:02d}.json"
        path.write_text(json.dumps(case.plot_data()), encoding="utf-8")
        written.append(path)
        summary.append({"rank": rank, "file": path.name, "sample_id": case.sample_id, "crossing": case.crossing,
                        "model": case.model, "attack": case.attack, "delta_fde": case.delta_fde})
    if failures:
        index = out / "failures.json"
        index.write_text(json.dumps(summary, indent=1), encoding="utf-8")
        written.append(index)
    return written


def ordering_violations(rows: list[EvalRow]) -> list[str]:
    """Cells breaking delta_fde(pgd) > delta_fde(fgsm) > 0, or a nonzero clean delta."""
    by_key = {(r.crossing, r.model, r.attack): r for r in rows}
    problems = []
    for (crossing, model, attack), r in sorted(by_key.items()):
        if attack == "clean" and (r.delta_ade != 0.0 or r.delta_fde != 0.0):
            problems.append(f"{crossing}/{model}: clean delta not zero")
    for crossing, model in sorted({(c, m) for c, m, _ in by_key}):
        f = by_key.get((crossing, model, "fgsm"))
        p = by_key.get((crossing, model, "pgd"))
        if f is None or p is None:
            continue
        if not f.delta_fde > 0.0:
            problems.append(f"{crossing}/{model}: fgsm delta_fde {f.delta_fde:.6f} <= 0")
        if not p.delta_fde > f.delta_fde:
            problems.append(f"{crossing}/{model}: pgd delta_fde {p.delta_fde:.6f} <= fgsm {f.delta_fde:.6f}")
    return problems


def finite_rows(rows: list[EvalRow]) -> bool:
    return all(math.isfinite(getattr(r, c)) for r in rows for c in METRIC_COLUMNS)
