import json
import math

import numpy as np
import pytest

from trajrobust import evaluation as ev
from trajrobust.attacks import AttackConfig, default_attacks
from trajrobust.autodiff import ShapeError
from trajrobust.models import Checkpoint, build_policy
from trajrobust.scenario import GeneratorConfig, generate_dataset


def brute_force(pred, target):
    # independent loop-based reference
    px = py = tx = ty = 0.0
    errs = []
    for k in range(len(pred)):
        px += pred[k][0]
        py += pred[k][1]
        tx += target[k][0]
        ty += target[k][1]
        errs.append(math.sqrt((px - tx) ** 2 + (py - ty) ** 2))
    return sum(errs) / len(errs), errs[-1]


@pytest.fixture(scope="module")
def datasets():
    ds = generate_dataset(GeneratorConfig(sequences_per_crossing=1, seed=41))
    return {c: ds.for_crossing(c).subset(range(0, 180, 12)) for c in ds.crossings()}


@pytest.fixture(scope="module")
def checkpoints():
    return {"bc_mlp": Checkpoint(build_policy("bc_mlp", seed=1)),
            "bc_transformer": Checkpoint(build_policy("bc_transformer", seed=1)),
            "irl": Checkpoint(build_policy("irl_policy", seed=2))}


@pytest.fixture(scope="module")
def results(checkpoints, datasets):
    return ev.run_matrix(checkpoints, datasets, [AttackConfig("clean"), AttackConfig("fgsm"),
                                                 AttackConfig("pgd", steps=3)])


def test_integrate_deltas_examples():
    assert not ev.integrate_deltas(np.zeros((20, 4))).any()
    rows = np.tile([1.0, 0.0, 0.3, 2.0], (20, 1))
    assert np.array_equal(ev.integrate_deltas(rows), np.stack([np.arange(1, 21), np.zeros(20)], axis=1))
    r = np.random.default_rng(0).normal(size=(20, 4))
    assert np.allclose(ev.integrate_deltas(r)[-1], r[:, :2].sum(axis=0), atol=1e-12)
    with pytest.raises(ShapeError):
        ev.integrate_deltas(np.zeros((20, 3)))


def test_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, t = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
        a, f = brute_force(p, t)
        assert abs(ev.ade(p, t) - a) <= 1e-12
        assert abs(ev.fde(p, t) - f) <= 1e-12


def test_hand_example_h2():
    # position errors 1 m then 2 m
    pred = np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]])
    target = np.zeros((2, 4))
    assert ev.ade(pred, target) == 1.5
    assert ev.fde(pred, target) == 2.0


def test_identical_and_biased_predictions():
    t = np.random.default_rng(2).normal(size=(20, 4))
    assert ev.ade(t, t) == 0.0 and ev.fde(t, t) == 0.0
    biased = t.copy()
    biased[:, 0] += 0.05
    assert ev.fde(biased, t) == pytest.approx(1.0, abs=1e-12)


def test_batched_metrics_per_sample():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=(5, 20, 4)), rng.normal(size=(5, 20, 4))
    assert ev.ade(p, t).shape == (5,)
    assert np.array_equal(ev.fde(p, t), np.array([ev.fde(p[i], t[i]) for i in range(5)]))


def test_matrix_has_27_rows_in_fixed_order(results):
    rows = [r.row for r in results]
    assert len(rows) == 27
    keys = [(r.crossing, r.model, r.attack) for r in rows]
    assert keys == [(c, m, a) for c in ("crossing1", "crossing2", "crossing3")
                    for m in ("bc_mlp", "bc_transformer", "irl") for a in ("clean", "fgsm", "pgd")]


def test_row_invariants(results):
    for res in results:
        r = res.row
        assert abs(r.delta_ade - (r.ade_adv - r.ade_clean)) <= 1e-9
        assert abs(r.delta_fde - (r.fde_adv - r.fde_clean)) <= 1e-9
        assert r.n_samples == 15
        if r.attack == "clean":
            assert r.ade_adv == r.ade_clean and r.delta_ade == 0.0 and r.delta_fde == 0.0
    assert ev.finite_rows([r.row for r in results])


def test_clean_columns_constant_within_model(results):
    by = {}
    for res in results:
        by.setdefault((res.row.crossing, res.row.model), set()).add(res.row.ade_clean)
    assert all(len(v) == 1 for v in by.values())


def test_missing_checkpoint_names_cell(datasets):
    with pytest.raises(ev.MatrixError, match="crossing1, irl"):
        ev.run_matrix({"bc_mlp": Checkpoint(build_policy("bc_mlp")), "irl": None}, datasets, default_attacks())


def test_empty_eval_set_names_cell(datasets):
    empty = datasets["crossing1"].subset([])
    with pytest.raises(ev.MatrixError, match="empty"):
        ev.evaluate_cell(Checkpoint(build_policy("bc_mlp")), empty, AttackConfig("clean"), "bc_mlp", "crossing1")


def test_parallel_matrix_is_bitwise_identical(checkpoints, datasets, results):
    par = ev.run_matrix(checkpoints, datasets, [AttackConfig("clean"), AttackConfig("fgsm"),
                                                AttackConfig("pgd", steps=3)], jobs=2)
    assert json.dumps(ev.rows_to_json([r.row for r in par])) == json.dumps(ev.rows_to_json([r.row for r in results]))


def test_rank_failures_top9(results):
    cases, truncated = ev.rank_failures(results, 9)
    assert len(cases) == 9 and not truncated
    deltas = [c.delta_fde for c in cases]
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))
    everything = np.concatenate([r.fde_adv - r.fde_clean for r in results])
    assert deltas[0] == everything.max()
    for c in cases:
        assert set(c.plot_data()) == {"expert", "clean", "adversarial"}
        assert np.array(c.plot_data()["adversarial"]).shape == (20, 2)


def test_rank_failures_all_clean_is_deterministic(results):
    clean = [r for r in results if r.row.attack == "clean"]
    a, _ = ev.rank_failures(clean, 5)
    b, _ = ev.rank_failures(list(reversed(clean)), 5)
    assert all(c.delta_fde == 0.0 for c in a)
    assert [(c.sample_id, c.crossing, c.model) for c in a] == [(c.sample_id, c.crossing, c.model) for c in b]
    assert [c.sample_id for c in a] == sorted(c.sample_id for c in a)


def test_rank_failures_truncation(checkpoints, datasets):
    one = datasets["crossing2"].subset([0])
    res = [ev.evaluate_cell(checkpoints["bc_mlp"], one, AttackConfig("fgsm"), "bc_mlp", "crossing2")]
    cases, truncated = ev.rank_failures(res, 3)
    assert len(cases) == 1 and truncated
    with pytest.raises(ValueError):
        ev.rank_failures(res, 0)


def test_emit_report(results, tmp_path):
    rows = [r.row for r in results]
    cases, _ = ev.rank_failures(results, 9)
    written = ev.emit_report(rows, cases, tmp_path)
    lines = (tmp_path / "matrix.csv").read_text().splitlines()
    assert lines[0] == ",".join(ev.CSV_COLUMNS)
    assert len(lines) == 28
    assert all(len(cell.split(".")[-1]) == 3 for cell in lines[1].split(",")[3:9])
    assert ev.read_rows_json(tmp_path / "matrix.json") == rows
    assert len([p for p in written if p.name.startswith("failure_")]) == 9
    doc = json.loads((tmp_path / "failure_01.json").read_text())
    assert list(doc) == ["expert", "clean", "adversarial"]


def test_per_sample_roundtrip(results, tmp_path):
    ev.save_per_sample(results, tmp_path / "p.npz")
    back = ev.load_per_sample(tmp_path / "p.npz")
    assert [r.row for r in back] == [r.row for r in results]
    a, _ = ev.rank_failures(results, 9)
    b, _ = ev.rank_failures(back, 9)
    assert [(c.sample_id, c.delta_fde) for c in a] == [(c.sample_id, c.delta_fde) for c in b]


def test_ordering_violations_reports_cells():
    mk = lambda attack, d: ev.EvalRow("crossing1", "bc_mlp", attack, 0.1, 0.2, 0.1 + d, 0.2 + d, d, d, 5)  # noqa: E731
    assert ev.ordering_violations([mk("clean", 0.0), mk("fgsm", 0.1), mk("pgd", 0.3)]) == []
    problems = ev.ordering_violations([mk("clean", 0.0), mk("fgsm", 0.3), mk("pgd", 0.1)])
    assert problems == ["crossing1/bc_mlp: pgd delta_fde 0.100000 <= fgsm 0.300000"]
