"""The eight acceptance criteria, each run at its stated tolerance.

Models are trained once per session at the library defaults (50 epochs,
batch 128) on 10 sequences per crossing (5,400 samples) and evaluated on
held-out sequences from an independent seed. Each test records one PASS/FAIL
line that is repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from trajrobust import autodiff as ad
from trajrobust import evaluation as ev
from trajrobust import pipeline as pl
from trajrobust.attacks import AttackConfig, default_attacks, fgsm, pgd, run_attack
from trajrobust.models import POLICY_KINDS, Checkpoint, build_discriminator, build_policy
from trajrobust.rng import SplitMix64, derive_seed
from trajrobust.scenario import GeneratorConfig, generate_dataset
from trajrobust.training import TrainConfig, discriminator_accuracy, train_irl, uniform_noise_trajectories

from gradcheck import (TOLERANCE, check_function, fixed_dropout, model_input_error, model_param_error,
                       primitive_cases)

SEED = 0
TRAIN_SEQUENCES = 60
TRAIN_STRIDE = 6
HELDOUT_SEQUENCES = 3
EVAL_PER_CROSSING = 500
TRAIN_LIMIT_S = 15 * 60
MATRIX_LIMIT_S = 10 * 60
GRAD_LIMIT_S = 60

_trained: dict = {}


@pytest.fixture(scope="session")
def train_data():
    return generate_dataset(GeneratorConfig(sequences_per_crossing=TRAIN_SEQUENCES, seed=SEED,
                                            sample_stride=TRAIN_STRIDE))


@pytest.fixture(scope="session")
def heldout():
    return generate_dataset(GeneratorConfig(sequences_per_crossing=HELDOUT_SEQUENCES,
                                            seed=derive_seed(SEED, "heldout")))


def trained(kind, train_data, **overrides):
    """Checkpoint, report and wall time of a default training run, cached per session."""
    key = (kind, tuple(sorted(overrides.items())))
    if key not in _trained:
        cfg = TrainConfig(kind=kind, seed=SEED, **overrides)
        start = time.perf_counter()
        ck, report = pl.train_model(train_data, cfg)
        _trained[key] = (ck, report, time.perf_counter() - start)
    return _trained[key]


def clean_metrics(model, data):
    pred = np.concatenate([model.predict(data.states[i:i + 256]) for i in range(0, len(data), 256)])
    return float(ev.ade(pred, data.targets).mean()), float(ev.fde(pred, data.targets).mean())


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_soundness(acceptance_line):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, build, arrays in primitive_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), check_function(build, arrays))

    mlp = build_policy("bc_mlp", seed=11)
    tf = build_policy("bc_transformer", seed=12).train()
    disc = build_discriminator(seed=13)
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        s, t = rng.normal(size=(2, 97)), rng.normal(size=(2, 20, 4)) * 0.1
        coords = rng.choice(2 * 97, 10, replace=False)
        worst["model:bc_mlp"] = max(worst.get("model:bc_mlp", 0.0), model_input_error(mlp, s, t, coords),
                                    model_param_error(mlp, mlp.params, s, t, rng))
        fwd = fixed_dropout(tf, seed)
        worst["model:bc_transformer"] = max(worst.get("model:bc_transformer", 0.0),
                                            model_input_error(fwd, s, t, coords[:6]),
                                            model_param_error(fwd, tf.params, s, t, rng, n_params=4, per_param=2))
        traj = rng.normal(size=(2, 80))
        labels = np.array([1.0, 0.0])
        worst["model:discriminator"] = max(worst.get("model:discriminator", 0.0), check_function(
            lambda x, y: ad.bce_with_logits(disc(x, y), labels), [s, traj],
            coords=[coords, rng.choice(160, 10, replace=False)]))
    elapsed = time.perf_counter() - start
    max_err = max(worst.values())
    ok = max_err < TOLERANCE and elapsed < GRAD_LIMIT_S
    acceptance_line(1, "gradient soundness", ok,
                    f"{len(worst)} checks x 20 instances, max rel err {max_err:.1e} < 1e-4, {elapsed:.1f} s < 60 s")
    bad = {k: v for k, v in worst.items() if v >= TOLERANCE}
    assert not bad, bad
    assert elapsed < GRAD_LIMIT_S


# ---------------------------------------------------------------- 2

def test_criterion_2_attack_soundness(heldout, acceptance_line):
    rng = np.random.default_rng(2)
    idx = rng.choice(len(heldout), 1000, replace=False)
    states, targets = heldout.states[idx], heldout.targets[idx]
    # random raw states too, since attacks must accept arbitrary 97-vectors
    states[::5] = rng.normal(size=(200, 97)) * 10
    max_excess = -np.inf
    fgsm_pgd_equal = True
    identity = True
    count = 0
    for kind in POLICY_KINDS:
        model = build_policy(kind, seed=21).eval()
        n = 1000 if kind != "bc_transformer" else 250
        s, t = states[:n], targets[:n]
        for cfg in (AttackConfig("fgsm"), AttackConfig("pgd")):
            adv = np.concatenate([run_attack(model, s[i:i + 250], t[i:i + 250], cfg) for i in range(0, n, 250)])
            max_excess = max(max_excess, float(np.max(np.abs(adv - s)) - cfg.epsilon))
            count += n
        sub, tsub = s[:200], t[:200]
        fgsm_pgd_equal &= np.array_equal(fgsm(model, sub, tsub, 0.05), pgd(model, sub, tsub, 0.05, 0.05, 1))
        for cfg in (AttackConfig("fgsm", epsilon=0.0), AttackConfig("pgd", epsilon=0.0)):
            identity &= np.array_equal(run_attack(model, sub, tsub, cfg), sub)
    ok = max_excess <= 1e-12 and fgsm_pgd_equal and identity
    acceptance_line(2, "attack soundness", ok,
                    f"{count} attacked samples, max(|s'-s|_inf - eps) = {max_excess:.1e}; "
                    f"FGSM == PGD-1 bitwise: {fgsm_pgd_equal}; eps=0 identity: {identity}")
    assert max_excess <= 1e-12
    assert fgsm_pgd_equal and identity


# ---------------------------------------------------------------- 3

@pytest.mark.parametrize("kind", ["bc_mlp", "bc_transformer"])
def test_criterion_3_clean_accuracy(kind, train_data, heldout, acceptance_line):
    assert len(train_data) >= 5000 and len(train_data.crossings()) == 3
    ck, report, wall = trained(kind, train_data)
    a, f = clean_metrics(ck.model, heldout)
    ok = a < 0.10 and f < 0.20 and wall < TRAIN_LIMIT_S
    line = (f"{kind}: held-out ADE {a:.4f} (< 0.10), FDE {f:.4f} (< 0.20) on {len(heldout)} samples; "
            f"train {wall / 60:.1f} min (< 15) for 50 epochs on {len(train_data)} samples")
    key = 3
    prev = _trained.get("c3")
    both_ok = ok and (prev is None or prev[0])
    detail = line if prev is None else f"{prev[1]} | {line}"
    _trained["c3"] = (both_ok, detail)
    acceptance_line(key, "clean accuracy", both_ok, detail)
    assert a < 0.10, f"ADE {a:.4f}"
    assert f < 0.20, f"FDE {f:.4f}"
    assert wall < TRAIN_LIMIT_S, f"training took {wall:.0f} s"


# ---------------------------------------------------------------- 4, 5

@pytest.fixture(scope="session")
def matrix(train_data, heldout):
    checkpoints = {pl.MATRIX_NAMES[k]: trained(k, train_data)[0] for k in POLICY_KINDS}
    datasets = pl.split_by_crossing([heldout], EVAL_PER_CROSSING)
    start = time.perf_counter()
    results = ev.run_matrix(checkpoints, datasets, default_attacks())
    return results, time.perf_counter() - start


def test_criterion_4_attack_ordering(matrix, acceptance_line):
    results, elapsed = matrix
    rows = [r.row for r in results]
    problems = ev.ordering_violations(rows)
    n_samples = {r.n_samples for r in rows}
    ok = len(rows) == 27 and not problems and elapsed < MATRIX_LIMIT_S and n_samples == {EVAL_PER_CROSSING}
    pgd_f = [r.delta_fde for r in rows if r.attack == "pgd"]
    fgsm_f = [r.delta_fde for r in rows if r.attack == "fgsm"]
    acceptance_line(4, "attack ordering", ok,
                    f"{len(rows)} cells, {len(problems)} violations; dFDE fgsm {min(fgsm_f):.3f}-{max(fgsm_f):.3f}, "
                    f"pgd {min(pgd_f):.3f}-{max(pgd_f):.3f}; matrix {elapsed:.0f} s (< 600)")
    assert len(rows) == 27
    assert not problems, problems
    assert n_samples == {EVAL_PER_CROSSING}
    assert elapsed < MATRIX_LIMIT_S


def test_criterion_5_terminal_amplification(matrix, acceptance_line):
    rows = [r.row for r in matrix[0] if r.row.attack == "pgd"]
    mean_fde = float(np.mean([r.delta_fde for r in rows]))
    mean_ade = float(np.mean([r.delta_ade for r in rows]))
    violating = [f"{r.crossing}/{r.model}" for r in rows if not r.delta_ade <= r.delta_fde]
    ok = mean_fde > mean_ade
    acceptance_line(5, "terminal amplification", ok,
                    f"PGD mean dFDE {mean_fde:.3f} > mean dADE {mean_ade:.3f}; cells with dADE > dFDE: {violating or 'none'}")
    assert mean_fde > mean_ade


# ---------------------------------------------------------------- 6

def brute_force_metrics(pred, target):
    px = py = tx = ty = 0.0
    errors = []
    for k in range(len(pred)):
        px, py = px + pred[k][0], py + pred[k][1]
        tx, ty = tx + target[k][0], ty + target[k][1]
        errors.append(math.sqrt((px - tx) ** 2 + (py - ty) ** 2))
    return sum(errors) / len(errors), errors[-1]


def test_criterion_6_metric_oracle(acceptance_line):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        p, t = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
        a, f = brute_force_metrics(p, t)
        worst = max(worst, abs(ev.ade(p, t) - a), abs(ev.fde(p, t) - f))
    hand_pred = np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    hand_ade, hand_fde = ev.ade(hand_pred, np.zeros((2, 4))), ev.fde(hand_pred, np.zeros((2, 4)))
    ok = worst <= 1e-12 and hand_ade == 1.5 and hand_fde == 2.0
    acceptance_line(6, "metric oracle", ok,
                    f"100 random pairs, max |diff| {worst:.1e} <= 1e-12; H=2 example ADE {hand_ade}, FDE {hand_fde}")
    assert worst <= 1e-12
    assert hand_ade == 1.5 and hand_fde == 2.0


# ---------------------------------------------------------------- 7

def logistic_oracle(x_train, y_train, x_test, y_test, steps=300, lr=0.5):
    """Plain gradient-descent logistic regression on standardized features."""
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-9
    xtr, xte = (x_train - mu) / sd, (x_test - mu) / sd
    w, b = np.zeros(xtr.shape[1]), 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xtr @ w + b)))
        w -= lr * xtr.T @ (p - y_train) / len(y_train)
        b -= lr * float(np.mean(p - y_train))
    return float(np.mean(((xte @ w + b) > 0) == (y_test > 0.5)))


def disc_logits(disc, states, trajectories):
    with ad.frozen(disc.parameters()):
        return disc(states, trajectories.reshape(len(states), -1)).data.ravel()


def test_criterion_7_irl_reduction(train_data, heldout, acceptance_line):
    bc_ck, bc_report, _ = trained("bc_mlp", train_data)
    cfg = TrainConfig(kind="irl_policy", seed=SEED, lambda_adv=0.0, lambda_smooth=0.0)
    irl_ck, irl_report = train_irl(build_policy("irl_policy", SEED), build_discriminator(SEED), train_data, cfg)
    same_curve = irl_report.bc_loss == bc_report.bc_loss
    same_params = all(np.array_equal(irl_ck.model.params[k].data, bc_ck.model.params[k].data)
                      for k in bc_ck.model.params)

    # separability oracle first: random trajectories must be linearly separable from expert ones
    noise_rng = SplitMix64.named(SEED, "acceptance/noise")
    tr_noise = uniform_noise_trajectories(train_data.targets, 2000, noise_rng)
    te_noise = uniform_noise_trajectories(heldout.targets, len(heldout), noise_rng)
    tr_expert = train_data.targets[np.linspace(0, len(train_data) - 1, 2000).astype(int)]
    oracle = logistic_oracle(np.concatenate([tr_expert, tr_noise]).reshape(4000, -1),
                             np.r_[np.ones(2000), np.zeros(2000)],
                             np.concatenate([heldout.targets, te_noise]).reshape(2 * len(heldout), -1),
                             np.r_[np.ones(len(heldout)), np.zeros(len(heldout))])

    irl_default, _, _ = trained("irl_policy", train_data)
    acc = discriminator_accuracy(irl_default.discriminator, heldout.states, heldout.targets, te_noise)
    # diagnostic only: how far apart the two logit populations are, regardless of threshold
    z_exp, z_noise = (disc_logits(irl_default.discriminator, heldout.states, t) for t in (heldout.targets, te_noise))
    ranking = float(np.mean(np.searchsorted(np.sort(z_noise), z_exp) / len(z_noise)))
    ok = same_curve and same_params and acc > 0.9
    acceptance_line(7, "IRL reduction", ok,
                    f"lambda=0 loss curve == BC-MLP bitwise over {len(bc_report.bc_loss)} epochs: {same_curve}, "
                    f"params equal: {same_params}; discriminator held-out acc {acc:.3f} > 0.9 "
                    f"(logistic oracle {oracle:.3f}; expert logits {z_exp.min():.2f}..{z_exp.max():.2f}, "
                    f"noise {z_noise.min():.2f}..{z_noise.max():.2f}, P(expert > noise) {ranking:.3f})")
    assert oracle > 0.9
    assert same_curve and same_params
    assert acc > 0.9


# ---------------------------------------------------------------- 8

def test_criterion_8_reproducibility(tmp_path, acceptance_line):
    cfg = pl.PipelineConfig.from_dict({
        "seed": 8,
        "generator": {"sequences_per_crossing": 1, "frames": 60},
        "heldout_sequences_per_crossing": 1,
        "train": {"epochs": 2, "batch_size": 32},
        "matrix": {"eval_samples_per_crossing": 20},
    })
    paths = [pl.run_pipeline(cfg, tmp_path / run)["report"] for run in ("first", "second")]
    names = sorted(p.name for p in paths[0].iterdir() if p.name != pl.MANIFEST_FILE)
    identical = all((paths[0] / n).read_bytes() == (paths[1] / n).read_bytes() for n in names)
    lines = (paths[0] / "matrix.csv").read_text().splitlines()
    header_ok = lines[0].split(",") == list(ev.CSV_COLUMNS)
    doc = json.loads((paths[0] / "matrix.json").read_text())
    ok = identical and header_ok and len(lines) - 1 == 27 and len(doc["rows"]) == 27
    acceptance_line(8, "reproducibility", ok,
                    f"{len(names)} report files bitwise identical across re-runs: {identical}; "
                    f"CSV columns {'ok' if header_ok else 'WRONG'}, {len(lines) - 1} rows")
    assert identical
    assert header_ok
    assert len(lines) - 1 == 27 and len(doc["rows"]) == 27
