"""Trajectory policies (BC-MLP, BC-Transformer, IRL policy) and the IRL discriminator.

Every policy maps a (B, 97) state batch to a (B, 20, 4) trajectory batch; a
single 97-vector maps to a single 20x4 trajectory.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import SplitMix64
from .state import HORIZON, NUM_OBJECTS, OBJECT_DIM, STATE_DIM, TARGET_CHANNELS

OUTPUT_DIM = HORIZON * TARGET_CHANNELS
POLICY_KINDS = ("bc_mlp", "bc_transformer", "irl_policy")


class CheckpointError(ValueError):
    """Unreadable checkpoint or unknown architecture."""


class Module:
    """Named parameter container with train/eval mode."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.training = False
        self.dropout_rng: SplitMix64 | None = None

    def add_param(self, name: str, shape, rng: SplitMix64 | None, bound: float | None = None,
                  fill: float | None = None) -> Tensor:
        if fill is not None:
            data = np.full(shape, fill, dtype=np.float64)
        else:
            data = rng.uniform_array(shape, -bound, bound)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self) -> "Module":
        self.training = True
        return self

    def eval(self) -> "Module":
        self.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, values: dict) -> None:
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter keys differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.size != p.data.size:
                raise CheckpointError(f"parameter {name}: expected {p.data.size} values, got {arr.size}")
            p.data = arr.reshape(p.data.shape).copy()

    def _linear(self, prefix: str, fan_in: int, fan_out: int, rng: SplitMix64):
        bound = math.sqrt(1.0 / fan_in)
        self.add_param(f"{prefix}.weight", (fan_in, fan_out), rng, bound)
        self.add_param(f"{prefix}.bias", (fan_out,), rng, bound)

    def _apply_linear(self, prefix: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def _layer_norm(self, prefix: str, dim: int):
        self.add_param(f"{prefix}.gamma", (dim,), None, fill=1.0)
        self.add_param(f"{prefix}.beta", (dim,), None, fill=0.0)

    def _apply_layer_norm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])


def _as_batch(state, dim: int, what: str) -> tuple[Tensor, bool]:
    state = ad.as_tensor(state)
    if state.ndim == 1:
        if state.shape[0] != dim:
            raise ShapeError(f"{what}: expected {dim} inputs, got {state.shape[0]}")
        return ad.reshape(state, (1, dim)), True
    if state.ndim != 2 or state.shape[1] != dim:
        raise ShapeError(f"{what}: expected (batch, {dim}) input, got {state.shape}")
    return state, False


class Policy(Module):
    kind = ""

    def __call__(self, state) -> Tensor:
        batch, single = _as_batch(state, STATE_DIM, self.kind)
        flat = self.forward_flat(batch)
        if single:
            return ad.reshape(flat, (HORIZON, TARGET_CHANNELS))
        return ad.reshape(flat, (batch.shape[0], HORIZON, TARGET_CHANNELS))

    def forward_flat(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, states: np.ndarray) -> np.ndarray:
        """Eval-time forward pass on raw arrays, no graph recorded."""
        with ad.frozen(self.parameters()):
            return self(np.asarray(states, dtype=np.float64)).data

    def arch(self) -> dict:
        raise NotImplementedError


class MLPPolicy(Policy):
    """97 -> 512 -> ReLU -> 512 -> ReLU -> 80, reshaped to 20x4."""

    kind = "bc_mlp"

    def __init__(self, rng: SplitMix64, hidden=(512, 512), kind: str = "bc_mlp"):
        super().__init__()
        self.kind = kind
        self.hidden = tuple(hidden)
        dims = (STATE_DIM,) + self.hidden + (OUTPUT_DIM,)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            self._linear(f"layers.{i}", fan_in, fan_out, rng)
        self.n_layers = len(dims) - 1

    def forward_flat(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = self._apply_linear(f"layers.{i}", x)
            if i < self.n_layers - 1:
                x = ad.relu(x)
        return x

    def arch(self) -> dict:
        return {"kind": self.kind, "input_dim": STATE_DIM, "hidden": list(self.hidden),
                "horizon": HORIZON, "channels": TARGET_CHANNELS}


class TransformerPolicy(Policy):
    """Object-tokenised pre-norm Transformer encoder with a CLS regression head.

    Tokens: CLS, ego (4 -> d), lane (3 -> d), ten object slots (shared 8 -> d
    projection plus a learned per-slot embedding) and the mask (10 -> d).
    """

    kind = "bc_transformer"
    n_tokens = 3 + NUM_OBJECTS + 1

    def __init__(self, rng: SplitMix64, d_model: int = 192, n_heads: int = 8, n_layers: int = 4,
                 d_ff: int = 768, dropout: float = 0.1, cls_only_last: bool = True):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model, self.n_heads, self.n_layers, self.d_ff = d_model, n_heads, n_layers, d_ff
        self.dropout = dropout
        # the head reads only the CLS token, so the last layer only needs its row
        self.cls_only_last = cls_only_last
        self.last_attention: list[np.ndarray] = []
        emb = math.sqrt(1.0 / d_model)
        self.add_param("cls", (1, 1, d_model), rng, emb)
        self._linear("ego_proj", 4, d_model, rng)
        self._linear("lane_proj", 3, d_model, rng)
        self._linear("obj_proj", OBJECT_DIM, d_model, rng)
        self.add_param("slot_embed", (NUM_OBJECTS, d_model), rng, emb)
        self._linear("mask_proj", NUM_OBJECTS, d_model, rng)
        for i in range(n_layers):
            p = f"blocks.{i}"
            self._layer_norm(f"{p}.ln1", d_model)
            for name in ("q", "k", "v", "o"):
                self._linear(f"{p}.attn.{name}", d_model, d_model, rng)
            self._layer_norm(f"{p}.ln2", d_model)
            self._linear(f"{p}.ff1", d_model, d_ff, rng)
            self._linear(f"{p}.ff2", d_ff, d_model, rng)
        self._layer_norm("ln_final", d_model)
        self._linear("head", d_model, OUTPUT_DIM, rng)

    def tokenize(self, x: Tensor) -> Tensor:
        """(B, 97) -> (B, 14, d_model)."""
        x, _ = _as_batch(x, STATE_DIM, "tokenize")
        b, d = x.shape[0], self.d_model
        cls = ad.add(Tensor(np.zeros((b, 1, d))), self.params["cls"])
        ego = ad.reshape(self._apply_linear("ego_proj", x[:, 0:4]), (b, 1, d))
        lane = ad.reshape(self._apply_linear("lane_proj", x[:, 4:7]), (b, 1, d))
        objs = ad.reshape(x[:, 7:87], (b, NUM_OBJECTS, OBJECT_DIM))
        objs = self._apply_linear("obj_proj", objs) + self.params["slot_embed"]
        mask = ad.reshape(self._apply_linear("mask_proj", x[:, 87:97]), (b, 1, d))
        return ad.concat([cls, ego, lane, objs, mask], axis=1)

    def _attention(self, prefix: str, h: Tensor, q_rows: int | None) -> Tensor:
        b, t, d = h.shape
        nh, hd = self.n_heads, d // self.n_heads
        hq = h if q_rows is None else h[:, :q_rows]
        tq = hq.shape[1]

        def heads(z, n):
            return ad.transpose(ad.reshape(z, (b, n, nh, hd)), (0, 2, 1, 3))

        q = heads(self._apply_linear(f"{prefix}.q", hq), tq)
        k = heads(self._apply_linear(f"{prefix}.k", h), t)
        v = heads(self._apply_linear(f"{prefix}.v", h), t)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        weights = ad.softmax(scores)
        self.last_attention.append(weights.data)
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, tq, d))
        return self._apply_linear(f"{prefix}.o", ctx)

    def _block(self, i: int, x: Tensor, last: bool) -> Tensor:
        p = f"blocks.{i}"
        rows = 1 if (last and self.cls_only_last) else None
        resid = x if rows is None else x[:, :rows]
        a = self._attention(f"{p}.attn", self._apply_layer_norm(f"{p}.ln1", x), rows)
        x = resid + ad.dropout(a, self.dropout, self.dropout_rng, self.training)
        f = self._apply_linear(f"{p}.ff2", ad.relu(self._apply_linear(f"{p}.ff1", self._apply_layer_norm(f"{p}.ln2", x))))
        return x + ad.dropout(f, self.dropout, self.dropout_rng, self.training)

    def forward_flat(self, x: Tensor) -> Tensor:
        self.last_attention = []
        h = self.tokenize(x)
        for i in range(self.n_layers):
            h = self._block(i, h, last=i == self.n_layers - 1)
        cls = ad.reshape(h[:, 0:1], (h.shape[0], self.d_model))
        return self._apply_linear("head", self._apply_layer_norm("ln_final", cls))

    def arch(self) -> dict:
        return {"kind": self.kind, "input_dim": STATE_DIM, "d_model": self.d_model, "n_heads": self.n_heads,
                "n_layers": self.n_layers, "d_ff": self.d_ff, "dropout": self.dropout,
                "n_tokens": self.n_tokens, "horizon": HORIZON, "channels": TARGET_CHANNELS}


class Discriminator(Module):
    """State branch 97->256 and trajectory branch 80->256, joint head 512->256->1."""

    def __init__(self, rng: SplitMix64, hidden: int = 256):
        super().__init__()
        self.hidden = hidden
        self._linear("state_branch", STATE_DIM, hidden, rng)
        self._linear("traj_branch", OUTPUT_DIM, hidden, rng)
        self._linear("joint.0", 2 * hidden, hidden, rng)
        self._linear("joint.1", hidden, 1, rng)

    def __call__(self, state, trajectory) -> Tensor:
        s, single = _as_batch(state, STATE_DIM, "discriminator state")
        traj = ad.as_tensor(trajectory)
        if traj.data.size != s.shape[0] * OUTPUT_DIM:
            raise ShapeError(f"discriminator: trajectory shape {traj.shape} for {s.shape[0]} state(s)")
        traj = ad.reshape(traj, (s.shape[0], OUTPUT_DIM))
        hs = ad.relu(self._apply_linear("state_branch", s))
        ht = ad.relu(self._apply_linear("traj_branch", traj))
        h = ad.relu(self._apply_linear("joint.0", ad.concat([hs, ht], axis=1)))
        logit = ad.reshape(self._apply_linear("joint.1", h), (s.shape[0],))
        return ad.reshape(logit, ()) if single else logit

    def arch(self) -> dict:
        return {"kind": "discriminator", "state_dim": STATE_DIM, "trajectory_dim": OUTPUT_DIM, "hidden": self.hidden}


# ---------------------------------------------------------------- construction

def init_stream(seed: int, kind: str) -> SplitMix64:
    return SplitMix64.named(seed, f"init/{kind}")


def build_policy(kind: str, seed: int = 0, **overrides) -> Policy:
    """Freshly initialised policy. ``irl_policy`` shares the BC-MLP init stream."""
    if kind == "bc_mlp":
        return MLPPolicy(init_stream(seed, "bc_mlp"), **overrides)
    if kind == "irl_policy":
        return MLPPolicy(init_stream(seed, "bc_mlp"), kind="irl_policy", **overrides)
    if kind == "bc_transformer":
        return TransformerPolicy(init_stream(seed, "bc_transformer"), **overrides)
    raise CheckpointError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


def build_discriminator(seed: int = 0, hidden: int = 256) -> Discriminator:
    return Discriminator(init_stream(seed, "discriminator"), hidden)


def _from_arch(arch: dict) -> Module:
    kind = arch.get("kind")
    rng = SplitMix64(0)
    if kind in ("bc_mlp", "irl_policy"):
        return MLPPolicy(rng, hidden=tuple(arch["hidden"]), kind=kind)
    if kind == "bc_transformer":
        return TransformerPolicy(rng, d_model=arch["d_model"], n_heads=arch["n_heads"],
                                 n_layers=arch["n_layers"], d_ff=arch["d_ff"], dropout=arch["dropout"])
    if kind == "discriminator":
        return Discriminator(rng, hidden=arch["hidden"])
    raise CheckpointError(f"unknown architecture kind {kind!r}")


def expected_parameter_count(arch: dict) -> int:
    """Parameter count implied by an architecture descriptor."""
    kind = arch["kind"]
    if kind in ("bc_mlp", "irl_policy"):
        dims = [STATE_DIM] + list(arch["hidden"]) + [OUTPUT_DIM]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if kind == "bc_transformer":
        d, f, n = arch["d_model"], arch["d_ff"], arch["n_layers"]
        embed = d + (4 * d + d) + (3 * d + d) + (OBJECT_DIM * d + d) + NUM_OBJECTS * d + (NUM_OBJECTS * d + d)
        block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
        return embed + n * block + 2 * d + (d * OUTPUT_DIM + OUTPUT_DIM)
    if kind == "discriminator":
        h = arch["hidden"]
        return (STATE_DIM * h + h) + (OUTPUT_DIM * h + h) + (2 * h * h + h) + (h + 1)
    raise CheckpointError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------- checkpoints

class Checkpoint:
    """A policy, its optional discriminator, and training metadata."""

    def __init__(self, model: Policy, meta: dict | None = None, discriminator: Discriminator | None = None):
        self.model = model
        self.meta = dict(meta or {})
        self.discriminator = discriminator

    def to_json(self) -> dict:
        arch = self.model.arch()
        params = {k: v.ravel().tolist() for k, v in self.model.state_dict().items()}
        if self.discriminator is not None:
            arch["discriminator"] = self.discriminator.arch()
            for k, v in self.discriminator.state_dict().items():
                params[f"discriminator.{k}"] = v.ravel().tolist()
        return {"arch": arch, "params": params, "meta": self.meta}

    @classmethod
    def from_json(cls, doc: dict) -> "Checkpoint":
        try:
            arch = dict(doc["arch"])
            params = doc["params"]
            meta = doc.get("meta", {})
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint missing field: {exc}") from None
        disc_arch = arch.pop("discriminator", None)
        model = _from_arch(arch)
        if not isinstance(model, Policy):
            raise CheckpointError(f"checkpoint arch {arch.get('kind')!r} is not a policy")
        own = {k: v for k, v in params.items() if not k.startswith("discriminator.")}
        model.load_state_dict(own)
        disc = None
        if disc_arch is not None:
            disc = _from_arch(disc_arch)
            disc.load_state_dict({k[len("discriminator."):]: v for k, v in params.items()
                                  if k.startswith("discriminator.")})
        model.eval()
        return cls(model, meta, disc)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint.to_json()), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return Checkpoint.from_json(doc)
