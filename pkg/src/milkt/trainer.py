"""Adam, the per-bag training loop, early stopping and best-epoch selection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels, milb
from . import tensor as T
from .metrics import EvalResult, evaluate
from .model import MILArch, MILOutputs, MILParams, forward, init_params, param_list, predict
from .seeding import derive_seed
from .transfer import (
    DEFAULT_GATE_DIM,
    DEFAULT_HEADS,
    MHFAParams,
    PTSConfig,
    TransferError,
    TransferSetting,
    init_mhfa,
    init_student_from_teacher,
    pca_reduce,
    pts_array,
    transfer_loss,
)

__all__ = ["OptimState", "adam_step", "TrainConfig", "RunRecord", "EarlyStopping", "FrozenTeacher",
           "train_run", "evaluate_bags"]

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.tensor = name


@dataclass
class OptimState:
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update, in place."""
    for name, g in grads.items():
        # a finite sum rules out NaN/Inf entries; only scan when it is not
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step_count += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adam_update(p, g, state.m[name], state.v[name], lr=state.lr,
                            weight_decay=state.weight_decay, beta1=state.beta1, beta2=state.beta2,
                            eps=state.eps, step=state.step_count)


@dataclass
class TrainConfig:
    setting: TransferSetting
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    lr: float = 2e-4
    weight_decay: float = 1e-5
    heads: int = DEFAULT_HEADS
    d_gate: int = DEFAULT_GATE_DIM
    pts: PTSConfig = field(default_factory=PTSConfig)

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.setting.student_arch is None:
            raise ValueError("the transfer setting must name a student architecture")

    @property
    def alpha(self) -> float:
        return self.setting.alpha


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    init: str = "glorot"
    test: EvalResult | None = None
    wall_time: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def jsonl_lines(self) -> list[str]:
        """Epoch records then one summary record; wall time is left out so reruns compare byte-equal."""
        lines = [json.dumps({"type": "epoch", "epoch": i + 1, "train_loss": tl, "val_loss": vl})
                 for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss))]
        lines.append(json.dumps({
            "type": "summary", "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
            "epochs_run": len(self.val_loss), "init": self.init,
            "test": self.test.to_dict() if self.test else None,
        }))
        return lines

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.jsonl_lines()) + "\n")


class EarlyStopping:
    """Strict-improvement patience rule; ties keep the earlier epoch."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.waited = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch; returns (improved, stop)."""
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch, self.waited = val_loss, self.epoch, 0
            return True, False
        self.waited += 1
        return False, self.waited >= self.patience


class FrozenTeacher:
    """Read-only teacher wrapper; counts parameter reads for instrumentation."""

    def __init__(self, params: MILParams, arch: MILArch):
        self._params = params
        self.arch = arch
        self.reads = 0

    @property
    def params(self) -> MILParams:
        self.reads += 1
        return self._params


@dataclass
class _TeacherView:
    attention: np.ndarray
    bag_feature: np.ndarray
    probs: np.ndarray
    logits_raw: np.ndarray

    def on(self, tape: T.Tape) -> MILOutputs:
        return MILOutputs(tape.constant(self.attention), tape.constant(self.bag_feature),
                          tape.constant(self.probs), tape.constant(self.logits_raw))


def _teacher_views(teacher: FrozenTeacher, bags) -> dict[str, _TeacherView]:
    params = teacher.params
    views = {}
    for bag in bags:
        out = forward(params, bag.instances, False, T.Tape(), frozen=True)
        views[bag.bag_id] = _TeacherView(out.attention.value, out.bag_feature.value,
                                         out.probs.value, out.logits_raw.value)
    return views


def _fit_projection(teacher: FrozenTeacher, train, views: dict[str, _TeacherView], d_s: int,
                    pts: PTSConfig, seed: int) -> np.ndarray:
    feats = np.vstack([pts_array(views[b.bag_id].bag_feature, pts) for b in train])
    if feats.shape[0] < d_s:
        # too few bags for a d_s-dim basis: fall back to instance embeddings,
        # the rows that bag features are convex combinations of
        p = teacher.params
        rows = [np.maximum(b.instances @ p.W_embed + p.b_embed, 0.0) for b in train]
        feats = pts_array(np.vstack(rows), pts)
    return pca_reduce(feats, d_s, seed=seed)


def _named(student: MILParams, mhfa: MHFAParams | None) -> dict[str, np.ndarray]:
    named = dict(param_list(student))
    if mhfa is not None:
        named.update({f"mhfa.{n}": a for n, a in mhfa.named_tensors()})
    return named


def train_run(train: list, val: list, cfg: TrainConfig, teacher: FrozenTeacher | None = None,
              test: list | None = None, on_epoch: Callable[[int, MILParams, RunRecord], None] | None = None,
              ) -> tuple[MILParams, MHFAParams | None, RunRecord]:
    """Train one student; returns the best-validation-epoch parameters.

    One Adam step per bag, bag order reshuffled every epoch. Validation loss
    is the full objective (task plus transfer term) in eval mode. The
    selected parameters are rounded to float32 so they match what a
    checkpoint write/read would give back. ``on_epoch`` sees the live
    student after every epoch and must not modify it.
    """
    if not train or not val:
        raise ValueError("train and validation splits must be non-empty")
    setting = cfg.setting
    arch = setting.student_arch
    method = setting.method
    needs_teacher = method != "none"
    if needs_teacher and teacher is None:
        raise TransferError(f"method {method!r} needs a teacher")
    start = time.perf_counter()
    record = RunRecord()

    student = None
    if method in ("finetune", "mhfa"):
        student = init_student_from_teacher(teacher.params, arch)
        record.init = "teacher" if student is not None else "glorot_fallback"
    if student is None:
        student = init_params(arch, derive_seed(cfg.seed, "student"))

    views: dict[str, _TeacherView] = {}
    mhfa = projection = None
    if setting.uses_teacher_signal:
        views = _teacher_views(teacher, list(train) + list(val))
        d_t = teacher.arch.d_embed
        if method == "mhfa":
            mhfa = init_mhfa(d_t, arch.d_embed, cfg.heads, seed=derive_seed(cfg.seed, "mhfa"),
                             d_gate=cfg.d_gate, pts=cfg.pts)
        elif method == "feature_pts" and d_t != arch.d_embed:
            projection = _fit_projection(teacher, train, views, arch.d_embed, cfg.pts, cfg.seed)

    params = _named(student, mhfa)
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def objective(bag, tape: T.Tape, train_flag: bool, rng=None) -> T.Node:
        out = forward(student, bag.instances, train_flag, tape, rng, arch.dropout_rate)
        task = T.cross_entropy_loss(out.probs, bag.label)
        t_out = views[bag.bag_id].on(tape) if views else None
        return transfer_loss(setting, t_out, out, task, mhfa=mhfa, projection=projection, pts=cfg.pts)

    best = (np.inf, student.copy(), mhfa.copy() if mhfa else None)
    stopper = EarlyStopping(cfg.patience)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, f"epoch{epoch}")).permutation(len(train))
        drop_rng = np.random.default_rng(derive_seed(cfg.seed, f"dropout{epoch}"))
        losses = []
        for i in order:
            tape = T.Tape()
            loss = objective(train[i], tape, True, drop_rng)
            T.backward(tape, loss)
            adam_step(params, {n: tape.grad_of(a) for n, a in params.items()}, state)
            losses.append(float(loss.value[0, 0]))
        val_loss = float(np.mean([objective(b, T.Tape(), False).value[0, 0] for b in val]))
        record.train_loss.append(float(np.mean(losses)))
        record.val_loss.append(val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, record.train_loss[-1], val_loss)
        if on_epoch is not None:
            on_epoch(epoch, student, record)
        improved, stop = stopper.update(val_loss)
        if improved:
            best = (val_loss, student.copy(), mhfa.copy() if mhfa else None)
            record.best_epoch = epoch
        if stop:
            break

    best_student = MILParams(*(milb.f32_roundtrip(a) for _, a in param_list(best[1])))
    best_mhfa = best[2]
    if best_mhfa is not None:
        for h in best_mhfa.heads:
            h.W_Q, h.W_K, h.W_V = (milb.f32_roundtrip(a) for a in (h.W_Q, h.W_K, h.W_V))
        pool = best_mhfa.pool
        pool.W_V_gate, pool.W_U_gate, pool.w_gate = (
            milb.f32_roundtrip(a) for a in (pool.W_V_gate, pool.W_U_gate, pool.w_gate))
    if test:
        record.test = evaluate_bags(best_student, test)
    record.wall_time = time.perf_counter() - start
    return best_student, best_mhfa, record


def evaluate_bags(params: MILParams, bags) -> EvalResult:
    return evaluate([predict(params, b.instances) for b in bags], [b.label for b in bags])
