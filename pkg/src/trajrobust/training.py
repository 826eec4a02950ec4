"""Offline training: behaviour cloning and the GAIL-style alternating update.

Both loops share seeded mini-batching. Each epoch draws one permutation of
the training set from the ``shuffle`` stream; Transformer dropout masks come
from the ``dropout`` stream. Neither stream is touched by the discriminator,
so IRL with both extra weights at zero follows the BC trajectory exactly.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .models import Checkpoint, Discriminator, Module, Policy
from .rng import SplitMix64
from .state import Dataset

log = logging.getLogger(__name__)

GENERATOR_LOSSES = ("non_saturating", "minimax")
STARVED_EPOCHS = 5


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated field."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class TrainConfig:
    kind: str = "bc_mlp"
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    disc_learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lambda_adv: float = 0.1
    lambda_smooth: float = 0.01
    disc_steps: int = 1
    generator_loss: str = "non_saturating"

    def validate(self) -> list[str]:
        errors = []
        if self.kind not in ("bc_mlp", "bc_transformer", "irl_policy"):
            errors.append(f"kind: unknown model kind {self.kind!r}")
        if self.epochs < 0:
            errors.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size: must be >= 1, got {self.batch_size}")
        for name in ("learning_rate", "disc_learning_rate", "adam_eps"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"{name}: must lie in [0, 1), got {getattr(self, name)}")
        for name in ("lambda_adv", "lambda_smooth"):
            if not getattr(self, name) >= 0:
                errors.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.disc_steps < 1:
            errors.append(f"disc_steps: must be >= 1, got {self.disc_steps}")
        if self.generator_loss not in GENERATOR_LOSSES:
            errors.append(f"generator_loss: expected one of {GENERATOR_LOSSES}, got {self.generator_loss!r}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        cfg = cls(**doc)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg


@dataclass
class TrainReport:
    kind: str
    epochs: int
    bc_loss: list[float] = field(default_factory=list)
    adv_loss: list[float] = field(default_factory=list)
    smooth_loss: list[float] = field(default_factory=list)
    disc_loss: list[float] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)
    total_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias correction, updating ``Tensor.data`` in place."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def smoothness_penalty(trajectory) -> Tensor:
    """Mean over the horizon of the squared 2-D second difference of (dx, dy).

    Accepts a single (20, 4) trajectory or a (B, 20, 4) batch; the batch
    version also averages over samples.
    """
    traj = ad.as_tensor(trajectory)
    xy = traj[..., :2]
    second = xy[..., 2:, :] - xy[..., 1:-1, :] * 2.0 + xy[..., :-2, :]
    return ad.mean(ad.tsum(second * second, axis=-1))


def generator_loss(logits: Tensor, kind: str = "non_saturating") -> Tensor:
    if kind == "non_saturating":
        # -mean(log D)
        return ad.bce_with_logits(logits, np.ones(logits.shape))
    # mean(log(1 - D)), the literal minimax objective
    return ad.scale(ad.bce_with_logits(logits, np.zeros(logits.shape)), -1.0)


def _batches(n: int, batch_size: int, shuffle: SplitMix64):
    order = shuffle.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value: float, epoch: int, batch: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value}) at epoch {epoch}, batch {batch}")


def _meta(model: Module, config: TrainConfig, dataset: Dataset, report: TrainReport) -> dict:
    final = report.total_loss[-1] if report.total_loss else None
    return {"kind": model.kind, "seed": config.seed, "epochs": config.epochs, "final_loss": final,
            "dataset_fingerprint": dataset.fingerprint(), "n_train": len(dataset), "config": config.to_dict()}


def _require(dataset: Dataset, config: TrainConfig, kinds: tuple[str, ...], model: Policy) -> None:
    errors = config.validate()
    if errors:
        raise ConfigError(errors)
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model.kind not in kinds:
        raise ValueError(f"model kind {model.kind!r} not trainable here; expected one of {kinds}")


def train_bc(model: Policy, dataset: Dataset, config: TrainConfig) -> tuple[Checkpoint, TrainReport]:
    """Adam on the SmoothL1 loss over all 80 outputs."""
    _require(dataset, config, ("bc_mlp", "bc_transformer"), model)
    ad.keep_freed_memory()
    report = TrainReport(kind=model.kind, epochs=config.epochs)
    shuffle = SplitMix64.named(config.seed, "shuffle")
    model.dropout_rng = SplitMix64.named(config.seed, "dropout")
    opt = Adam(model.parameters(), config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
    start = time.perf_counter()
    model.train()
    for epoch in range(config.epochs):
        total = 0.0
        for b, idx in enumerate(_batches(len(dataset), config.batch_size, shuffle)):
            try:
                model.zero_grad()
                loss = ad.smooth_l1(model(dataset.states[idx]), dataset.targets[idx])
                _check_finite(loss.item(), epoch, b, "BC loss")
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            opt.step()
            total += loss.item() * len(idx)
        mean_loss = total / len(dataset)
        report.bc_loss.append(mean_loss)
        report.total_loss.append(mean_loss)
        log.info("%s epoch %d/%d loss %.6f", model.kind, epoch + 1, config.epochs, mean_loss)
    model.eval()
    report.wall_time = time.perf_counter() - start
    return Checkpoint(model, _meta(model, config, dataset, report)), report


def _disc_step(disc: Discriminator, opt: Adam, states: np.ndarray, expert: np.ndarray,
               generated: np.ndarray) -> tuple[float, float]:
    """One BCE step on expert (label 1) and policy (label 0) pairs."""
    n = len(states)
    both_states = np.concatenate([states, states])
    both_traj = np.concatenate([expert.reshape(n, -1), generated.reshape(n, -1)])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    disc.zero_grad()
    logits = disc(both_states, both_traj)
    loss = ad.bce_with_logits(logits, labels)
    loss.backward()
    opt.step()
    accuracy = float(np.mean((logits.data > 0.0) == (labels > 0.5)))
    return loss.item(), accuracy


def train_irl(policy: Policy, discriminator: Discriminator, dataset: Dataset,
              config: TrainConfig) -> tuple[Checkpoint, TrainReport]:
    """Alternate a discriminator step and a policy step on every batch.

    Policy loss is ``L_BC + lambda_adv * L_gen + lambda_smooth * L_smooth``;
    a term whose weight is zero is not built at all.
    """
    _require(dataset, config, ("irl_policy",), policy)
    ad.keep_freed_memory()
    report = TrainReport(kind=policy.kind, epochs=config.epochs)
    shuffle = SplitMix64.named(config.seed, "shuffle")
    policy.dropout_rng = SplitMix64.named(config.seed, "dropout")
    betas = (config.beta1, config.beta2)
    p_opt = Adam(policy.parameters(), config.learning_rate, betas, config.adam_eps)
    d_opt = Adam(discriminator.parameters(), config.disc_learning_rate, betas, config.adam_eps)
    start = time.perf_counter()
    policy.train()
    discriminator.train()
    starved = 0
    for epoch in range(config.epochs):
        sums = dict(bc=0.0, adv=0.0, smooth=0.0, disc=0.0, acc=0.0, total=0.0)
        for b, idx in enumerate(_batches(len(dataset), config.batch_size, shuffle)):
            states, targets = dataset.states[idx], dataset.targets[idx]
            try:
                policy.zero_grad()
                pred = policy(states)
                with ad.frozen(policy.parameters()):
                    for _ in range(config.disc_steps):
                        d_loss, d_acc = _disc_step(discriminator, d_opt, states, targets, pred.data)
                _check_finite(d_loss, epoch, b, "discriminator loss")

                bc = ad.smooth_l1(pred, targets)
                loss = bc
                adv_value = smooth_value = 0.0
                # backward runs inside the freeze so no gradient reaches the discriminator
                with ad.frozen(discriminator.parameters()):
                    if config.lambda_adv > 0:
                        adv = generator_loss(discriminator(states, pred), config.generator_loss)
                        adv_value = adv.item()
                        loss = loss + ad.scale(adv, config.lambda_adv)
                    if config.lambda_smooth > 0:
                        smooth = smoothness_penalty(pred)
                        smooth_value = smooth.item()
                        loss = loss + ad.scale(smooth, config.lambda_smooth)
                    _check_finite(loss.item(), epoch, b, "policy loss")
                    loss.backward()
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            p_opt.step()
            w = len(idx)
            sums["bc"] += bc.item() * w
            sums["adv"] += adv_value * w
            sums["smooth"] += smooth_value * w
            sums["disc"] += d_loss * w
            sums["acc"] += d_acc * w
            sums["total"] += loss.item() * w
        n = len(dataset)
        report.bc_loss.append(sums["bc"] / n)
        report.adv_loss.append(sums["adv"] / n)
        report.smooth_loss.append(sums["smooth"] / n)
        report.disc_loss.append(sums["disc"] / n)
        report.disc_accuracy.append(sums["acc"] / n)
        report.total_loss.append(sums["total"] / n)
        starved = starved + 1 if sums["acc"] / n == 1.0 else 0
        if starved == STARVED_EPOCHS:
            msg = f"discriminator accuracy pinned at 1.0 for {STARVED_EPOCHS} epochs (generator starved) at epoch {epoch}"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report.warnings.append(msg)
        log.info("irl epoch %d/%d bc %.6f adv %.4f disc %.4f acc %.3f", epoch + 1, config.epochs,
                 report.bc_loss[-1], report.adv_loss[-1], report.disc_loss[-1], report.disc_accuracy[-1])
    policy.eval()
    discriminator.eval()
    report.wall_time = time.perf_counter() - start
    return Checkpoint(policy, _meta(policy, config, dataset, report), discriminator), report


def uniform_noise_trajectories(reference: np.ndarray, count: int, rng: SplitMix64) -> np.ndarray:
    """(count, 20, 4) i.i.d. trajectories, channel c uniform on [-m_c, m_c].

    m_c is the largest magnitude of channel c in ``reference``, so the noise
    spans the same scale as real trajectories without their structure.
    """
    bound = np.abs(reference).max(axis=(0, 1))
    u = rng.uniform_array((count,) + reference.shape[1:])
    return bound * (2.0 * u - 1.0)


def discriminator_accuracy(disc: Discriminator, states: np.ndarray, expert: np.ndarray,
                           other: np.ndarray) -> float:
    """Balanced accuracy of ``logit > 0`` for expert pairs and ``<= 0`` for the rest."""
    n = len(states)
    with ad.frozen(disc.parameters()):
        real = disc(states, expert.reshape(n, -1)).data
        fake = disc(states, other.reshape(n, -1)).data
    return 0.5 * (float(np.mean(real > 0.0)) + float(np.mean(fake <= 0.0)))
