import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajrobust import attacks as at
from trajrobust.attacks import AttackConfig, AttackError, attack_loss, fgsm, pgd, run_attack
from trajrobust.autodiff import Tensor
from trajrobust.models import POLICY_KINDS, build_policy
from trajrobust.scenario import GeneratorConfig, generate_dataset
from trajrobust.training import ConfigError, TrainConfig, train_bc

from gradcheck import TOLERANCE, check_function

EPS = 0.05


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(GeneratorConfig(sequences_per_crossing=1, seed=31))
    return ds.subset(np.arange(0, len(ds), 4))


@pytest.fixture(scope="module")
def trained(data):
    ck, _ = train_bc(build_policy("bc_mlp", seed=1), data, TrainConfig(epochs=5, seed=1, batch_size=32))
    return ck.model


@pytest.fixture(scope="module")
def policies():
    return {k: build_policy(k, seed=2).eval() for k in POLICY_KINDS}


def test_loss_zero_at_target():
    t = np.random.default_rng(0).normal(size=(20, 4))
    assert attack_loss(Tensor(t), t).item() == 0.0


def test_loss_closed_form_for_constant_bias():
    pred = np.zeros((20, 4))
    pred[:, 0] = 0.1
    expected = sum((0.1 * k) ** 2 for k in range(1, 21)) / (20 * 2)
    assert attack_loss(Tensor(pred), np.zeros((20, 4))).item() == pytest.approx(expected, rel=1e-14)
    # delta space ignores the accumulation
    assert attack_loss(Tensor(pred), np.zeros((20, 4)), "deltas").item() == pytest.approx(0.01 / 2, rel=1e-14)


@pytest.mark.parametrize("space", ["positions", "deltas"])
def test_loss_gradient_matches_finite_differences(space):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        target = rng.normal(size=(3, 20, 4))
        err = check_function(lambda p: attack_loss(p, target, space), [rng.normal(size=(3, 20, 4))])
        assert err < TOLERANCE


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_zero_epsilon_is_identity(policies, data, kind):
    s, t = data.states[:16], data.targets[:16]
    for cfg in (AttackConfig("fgsm", epsilon=0.0), AttackConfig("pgd", epsilon=0.0)):
        out = run_attack(policies[kind], s, t, cfg)
        assert np.array_equal(out, s) and out is not s


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_fgsm_equals_one_step_pgd(policies, data, kind):
    s, t = data.states[:32], data.targets[:32]
    a = fgsm(policies[kind], s, t, EPS)
    b = pgd(policies[kind], s, t, EPS, alpha=EPS, steps=1)
    assert np.array_equal(a, b)


def test_fgsm_moves_every_coordinate_with_nonzero_gradient(trained, data):
    s, t = data.states[:20], data.targets[:20]
    g = at.input_gradient(trained, s, t)
    adv = fgsm(trained, s, t, EPS)
    moved = np.abs(adv - s)
    assert np.all(moved <= EPS + 1e-12)
    assert np.allclose(moved[g != 0], EPS, rtol=0, atol=1e-12)
    assert np.all(moved[g == 0] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5), st.floats(1e-3, 0.3), st.integers(1, 6))
def test_linf_soundness(seed, eps, alpha, steps):
    model = build_policy("bc_mlp", seed=seed % 7).eval()
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=(8, 97)) * 5, rng.normal(size=(8, 20, 4))
    for cfg in (AttackConfig("fgsm", eps), AttackConfig("pgd", eps, alpha, steps)):
        adv = run_attack(model, s, t, cfg)
        assert np.max(np.abs(adv - s)) <= eps + 1e-12


def test_constant_output_model_is_not_moved(data):
    model = build_policy("bc_mlp").eval()
    model.params["layers.2.weight"].data[...] = 0.0
    s, t = data.states[:4], data.targets[:4]
    assert np.array_equal(fgsm(model, s, t, EPS), s)
    assert np.array_equal(pgd(model, s, t, EPS, 0.01, 10), s)


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_attack_purity(policies, data, kind):
    model = policies[kind]
    before = model.state_dict()
    s = data.states[:8].copy()
    keep = s.copy()
    run_attack(model, s, data.targets[:8], AttackConfig("pgd", steps=3))
    assert np.array_equal(s, keep)
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert all(p.grad is None for p in model.parameters())


def test_pgd_loss_at_least_fgsm_loss_on_trained_mlp(trained, data):
    s, t = data.states, data.targets

    def loss(x):
        return np.mean([attack_loss(Tensor(trained.predict(x[i:i + 1])), t[i:i + 1]).item() for i in range(len(x))])

    adv_f = fgsm(trained, s, t, EPS)
    adv_p = pgd(trained, s, t, EPS, 0.01, 10)
    assert loss(adv_p) >= loss(adv_f) > loss(s)


def test_batched_attack_matches_per_sample(trained, data):
    s, t = data.states[:6], data.targets[:6]
    batched = pgd(trained, s, t, EPS, 0.01, 4)
    single = np.stack([pgd(trained, s[i], t[i], EPS, 0.01, 4) for i in range(6)])
    assert np.array_equal(batched, single)


def test_single_state_attack_shape(trained, data):
    assert fgsm(trained, data.states[0], data.targets[0], EPS).shape == (97,)


def test_non_finite_gradient_raises(trained, data, monkeypatch):
    monkeypatch.setattr(at.ad, "grad_wrt_input", lambda *a, **k: np.full((2, 97), np.nan))
    with pytest.raises(AttackError, match="non-finite"):
        fgsm(trained, data.states[:2], data.targets[:2], EPS)


def test_config_defaults_and_validation():
    assert AttackConfig("pgd") == AttackConfig("pgd", 0.05, 0.01, 10, "positions")
    with pytest.raises(ConfigError) as info:
        AttackConfig.from_dict({"kind": "pgd", "epsilon": -1.0, "alpha": 0.0, "steps": 0})
    assert len(info.value.errors) == 3
    with pytest.raises(ConfigError):
        AttackConfig.from_dict({"kind": "cw"})
    assert [c.kind for c in at.default_attacks()] == ["clean", "fgsm", "pgd"]
