"""Gated-attention MIL classifier used for both teacher and student."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .seeding import derive_seed

PARAM_NAMES = ("W_embed", "b_embed", "attn_V", "attn_U", "attn_w", "W_cls", "b_cls")

PRESETS = {
    "small": {"d_embed": 512, "d_attn": 256},
    "big": {"d_embed": 768, "d_attn": 384},
}


@dataclass(frozen=True)
class MILArch:
    d_in: int = 1024
    d_embed: int = 512
    d_attn: int = 256
    n_classes: int = 2
    dropout_rate: float = 0.25

    def __post_init__(self):
        for f in ("d_in", "d_embed", "d_attn", "n_classes"):
            if getattr(self, f) < 1:
                raise ValueError(f"MILArch.{f} must be >= 1, got {getattr(self, f)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def preset(cls, name: str, d_in: int = 1024, n_classes: int = 2, dropout_rate: float = 0.25) -> "MILArch":
        if name not in PRESETS:
            raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(d_in=d_in, n_classes=n_classes, dropout_rate=dropout_rate, **PRESETS[name])

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "W_embed": (self.d_in, self.d_embed),
            "b_embed": (1, self.d_embed),
            "attn_V": (self.d_embed, self.d_attn),
            "attn_U": (self.d_embed, self.d_attn),
            "attn_w": (self.d_attn, 1),
            "W_cls": (self.d_embed, self.n_classes),
            "b_cls": (1, self.n_classes),
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MILParams:
    W_embed: np.ndarray
    b_embed: np.ndarray
    attn_V: np.ndarray
    attn_U: np.ndarray
    attn_w: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray

    def copy(self) -> "MILParams":
        return MILParams(*(np.array(a, copy=True) for _, a in param_list(self)))

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {n: a.shape for n, a in param_list(self)}


@dataclass
class MILOutputs:
    attention: T.Node
    bag_feature: T.Node
    probs: T.Node
    logits_raw: T.Node


def param_list(params: MILParams) -> list[tuple[str, np.ndarray]]:
    """Named tensors in the fixed order used by the optimizer and checkpoints."""
    return [(name, getattr(params, name)) for name in PARAM_NAMES]


def glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(arch: MILArch, seed: int) -> MILParams:
    """Glorot-uniform weights, zero biases; a pure function of ``(arch, seed)``."""
    rng = np.random.default_rng(derive_seed(seed, "mil.init"))
    tensors = {}
    for name, shape in arch.shapes().items():
        tensors[name] = np.zeros(shape) if name.startswith("b_") else glorot(rng, shape)
    return MILParams(**tensors)


def check_params(params: MILParams, arch: MILArch) -> None:
    expected = arch.shapes()
    for name, arr in param_list(params):
        if arr.shape != expected[name]:
            raise T.ShapeError(f"{name} has shape {arr.shape}, architecture expects {expected[name]}")


def forward(params: MILParams, bag: np.ndarray, train_flag: bool, tape: T.Tape,
            rng: np.random.Generator | None = None, dropout_rate: float = 0.25,
            frozen: bool = False) -> MILOutputs:
    """Run one bag through the classifier, recording on ``tape``.

    ``frozen`` binds the weights as constants, so nothing upstream of the
    outputs receives gradient (used for teachers).
    """
    d_in = params.W_embed.shape[0]
    if bag.ndim != 2 or bag.shape[1] != d_in or bag.shape[0] < 1:
        raise T.ShapeError(f"bag of shape {bag.shape} does not match d_in={d_in}")
    bind = tape.constant if frozen else tape.param
    p = {name: bind(arr, name=name) for name, arr in param_list(params)}
    x = tape.constant(bag) if bag.dtype == np.float64 else tape.constant(bag.astype(np.float64))

    emb = T.relu(T.add_row(T.matmul(x, p["W_embed"]), p["b_embed"]))
    emb = T.dropout(emb, dropout_rate, train_flag, rng)
    gate_v = T.dropout(T.tanh(T.matmul(emb, p["attn_V"])), dropout_rate, train_flag, rng)
    gate_u = T.dropout(T.sigmoid(T.matmul(emb, p["attn_U"])), dropout_rate, train_flag, rng)
    scores = T.matmul(T.hadamard(gate_v, gate_u), p["attn_w"])  # n x 1
    attention = T.softmax_row(T.transpose(scores))  # 1 x n
    bag_feature = T.matmul(attention, emb)
    logits = T.add_row(T.matmul(bag_feature, p["W_cls"]), p["b_cls"])
    return MILOutputs(attention, bag_feature, T.softmax_row(logits), logits)


def predict(params: MILParams, bag: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities (1 x c) for one bag."""
    return forward(params, bag, False, T.Tape(), frozen=True).probs.value


def save_checkpoint(directory: str | Path, params: MILParams, arch: MILArch, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    meta = {"arch": arch.to_dict(), "seed": seed, **(extra or {})}
    return checkpoint.save(directory, "mil", meta, param_list(params))


def load_checkpoint(directory: str | Path) -> tuple[MILParams, MILArch, dict]:
    manifest, tensors = checkpoint.load(directory, "mil")
    try:
        arch = MILArch(**manifest["arch"])
    except (KeyError, TypeError) as exc:
        raise checkpoint.CheckpointError(f"{directory}: bad arch record ({exc})") from exc
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise checkpoint.CheckpointError(f"{directory}: missing tensors {missing}")
    params = MILParams(**{n: tensors[n] for n in PARAM_NAMES})
    try:
        check_params(params, arch)
    except T.ShapeError as exc:
        raise checkpoint.CheckpointError(f"{directory}: {exc}") from exc
    return params, arch, manifest
