"""FGSM and l-infinity PGD on the raw 97-dim state.

Every coordinate is attackable, mask entries included, and no per-feature
scaling is applied: ``epsilon`` is in the raw units of each feature. Attacks
are untargeted and maximise the position-space MSE against the ground-truth
future.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .training import ConfigError

ATTACK_KINDS = ("clean", "fgsm", "pgd")
LOSS_SPACES = ("positions", "deltas")


class AttackError(ArithmeticError):
    """Input gradient was NaN or inf."""


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "clean"
    epsilon: float = 0.05
    alpha: float = 0.01
    steps: int = 10
    loss_space: str = "positions"

    def validate(self) -> list[str]:
        errors = []
        if self.kind not in ATTACK_KINDS:
            errors.append(f"kind: expected one of {ATTACK_KINDS}, got {self.kind!r}")
        if not self.epsilon >= 0:
            errors.append(f"epsilon: must be >= 0, got {self.epsilon}")
        if self.kind == "pgd":
            if not self.alpha > 0:
                errors.append(f"alpha: must be > 0 for pgd, got {self.alpha}")
            if self.steps < 1:
                errors.append(f"steps: must be >= 1 for pgd, got {self.steps}")
        if self.loss_space not in LOSS_SPACES:
            errors.append(f"loss_space: expected one of {LOSS_SPACES}, got {self.loss_space!r}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        cfg = cls(**doc)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg


def default_attacks() -> list[AttackConfig]:
    return [AttackConfig("clean"), AttackConfig("fgsm"), AttackConfig("pgd")]


def attack_loss(prediction, target, space: str = "positions") -> Tensor:
    """MSE between XY trajectories.

    ``positions`` integrates (dx, dy) along the horizon first; ``deltas``
    compares the per-step (dx, dy) directly. Works on (20, 4) or (B, 20, 4).
    """
    pred = ad.as_tensor(prediction)[..., :2]
    tgt = np.asarray(ad.as_tensor(target).data)[..., :2]
    if space == "positions":
        axis = pred.ndim - 2
        pred = ad.cumsum(pred, axis=axis)
        tgt = np.cumsum(tgt, axis=axis)
    elif space != "deltas":
        raise ValueError(f"unknown attack loss space {space!r}")
    return ad.mse(pred, tgt)


def input_gradient(model, states: np.ndarray, targets: np.ndarray, space: str = "positions") -> np.ndarray:
    """Gradient of the attack loss with respect to the states.

    A batch uses the mean loss over samples; samples do not interact, so each
    row is that sample's own gradient scaled by 1/B, which leaves its sign
    unchanged.
    """
    x = Tensor(np.array(states, dtype=np.float64), requires_grad=True)
    grad = ad.grad_wrt_input(model, x, targets, lambda p, t: attack_loss(p, t, space))
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))
        raise AttackError(f"non-finite input gradient at {len(bad)} coordinate(s), first {bad[0].tolist()}")
    return grad


def fgsm(model, state: np.ndarray, target: np.ndarray, epsilon: float, space: str = "positions") -> np.ndarray:
    """``s + eps * sign(grad)``; returns a new array."""
    state = np.asarray(state, dtype=np.float64)
    if epsilon == 0:
        return state.copy()
    grad = input_gradient(model, state, target, space)
    return state + epsilon * np.sign(grad)


def pgd(model, state: np.ndarray, target: np.ndarray, epsilon: float, alpha: float, steps: int,
        space: str = "positions") -> np.ndarray:
    """Sign-gradient ascent from the clean state, clipped to the eps-box after each step."""
    state = np.asarray(state, dtype=np.float64)
    if epsilon == 0:
        return state.copy()
    low, high = state - epsilon, state + epsilon
    x = state.copy()
    for _ in range(steps):
        grad = input_gradient(model, x, target, space)
        x = np.minimum(np.maximum(x + alpha * np.sign(grad), low), high)
    return x


def run_attack(model, states: np.ndarray, targets: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Attacked copy of ``states`` (a single state or a batch)."""
    errors = config.validate()
    if errors:
        raise ConfigError(errors)
    model.eval()
    if config.kind == "clean":
        return np.array(states, dtype=np.float64)
    if config.kind == "fgsm":
        return fgsm(model, states, targets, config.epsilon, config.loss_space)
    return pgd(model, states, targets, config.epsilon, config.alpha, config.steps, config.loss_space)
