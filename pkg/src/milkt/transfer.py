"""Knowledge-transfer signals between a frozen teacher and a student MIL model.

The adaptation head (MHFA) maps a teacher bag feature ``h_t`` (1 x d_t) to
the student feature space (1 x d_s) in three steps: power-temperature
scaling, ``m`` single-token attention heads stacked into an m x d_s matrix,
and gated-attention pooling over the heads.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .model import MILArch, MILOutputs, MILParams, glorot, param_list
from .seeding import derive_seed

METHODS = ("none", "finetune", "logit", "attention", "feature_pts", "mhfa")
DEFAULT_ALPHA = 0.1
DEFAULT_HEADS = 8
DEFAULT_GATE_DIM = 256


class TransferError(ValueError):
    """Teacher/student/method combination is not usable."""


@dataclass(frozen=True)
class PTSConfig:
    T: float = 0.1
    t: float = 3.0

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"PTS temperature must be > 0, got {self.T}")
        if self.t < 1:
            raise ValueError(f"PTS power must be >= 1, got {self.t}")


@dataclass
class SHAParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray


@dataclass
class GatedPoolParams:
    W_V_gate: np.ndarray
    W_U_gate: np.ndarray
    w_gate: np.ndarray


@dataclass
class MHFAParams:
    heads: list[SHAParams]
    pool: GatedPoolParams
    pts: PTSConfig = field(default_factory=PTSConfig)

    @property
    def m(self) -> int:
        return len(self.heads)

    @property
    def dims(self) -> dict[str, int]:
        h = self.heads[0]
        return {"m": self.m, "d_t": h.W_Q.shape[0], "d_k": h.W_Q.shape[1],
                "d_s": h.W_V.shape[1], "d_gate": self.pool.W_V_gate.shape[1]}

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, h in enumerate(self.heads):
            out += [(f"head{i}.W_Q", h.W_Q), (f"head{i}.W_K", h.W_K), (f"head{i}.W_V", h.W_V)]
        out += [("pool.W_V_gate", self.pool.W_V_gate), ("pool.W_U_gate", self.pool.W_U_gate),
                ("pool.w_gate", self.pool.w_gate)]
        return out

    def copy(self) -> "MHFAParams":
        heads = [SHAParams(h.W_Q.copy(), h.W_K.copy(), h.W_V.copy()) for h in self.heads]
        pool = GatedPoolParams(self.pool.W_V_gate.copy(), self.pool.W_U_gate.copy(), self.pool.w_gate.copy())
        return MHFAParams(heads, pool, self.pts)


@dataclass(frozen=True)
class TransferSetting:
    method: str = "none"
    alpha: float = DEFAULT_ALPHA
    source_tag: str = ""
    target_tag: str = ""
    teacher_arch: MILArch | None = None
    student_arch: MILArch | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise TransferError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.alpha < 0:
            raise TransferError(f"alpha must be >= 0, got {self.alpha}")
        if self.method in ("none",) or self.teacher_arch is None or self.student_arch is None:
            return
        ta, sa = self.teacher_arch, self.student_arch
        if ta.d_in != sa.d_in:
            raise TransferError(f"teacher expects d_in={ta.d_in} but the target data has d_in={sa.d_in}")
        if self.method == "logit" and ta.n_classes != sa.n_classes:
            raise TransferError(
                f"logit transfer needs equal class counts (teacher {ta.n_classes}, student {sa.n_classes})")

    @property
    def uses_teacher_signal(self) -> bool:
        return self.method in ("logit", "attention", "feature_pts", "mhfa")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ----------------------------------------------------------------- operations


def pts_normalise(h: T.Node, cfg: PTSConfig = PTSConfig()) -> T.Node:
    """sign(h) * |h / T| ** (1 / t), elementwise."""
    mag = T.pow_const(T.abs_(T.scale_const(h, 1.0 / cfg.T)), 1.0 / cfg.t)
    return T.hadamard(T.sign(h), mag)


def pts_array(h: np.ndarray, cfg: PTSConfig = PTSConfig()) -> np.ndarray:
    return np.sign(h) * np.power(np.abs(h * (1.0 / cfg.T)), 1.0 / cfg.t)


def sha_forward(h: T.Node, p: SHAParams) -> T.Node:
    """One attention head over the single teacher token.

    The query-key product is a 1x1 score (no key axis to softmax over),
    scaled by 1/sqrt(d_t), that multiplies the value row.
    """
    d_t = h.shape[1]
    if p.W_Q.shape[0] != d_t or p.W_K.shape != p.W_Q.shape or p.W_V.shape[0] != d_t:
        raise T.ShapeError(
            f"SHA weights W_Q{p.W_Q.shape} W_K{p.W_K.shape} W_V{p.W_V.shape} do not fit input width {d_t}")
    tape = h.tape
    q = T.matmul(h, tape.param(p.W_Q))
    k = T.matmul(h, tape.param(p.W_K))
    v = T.matmul(h, tape.param(p.W_V))
    score = T.scale_const(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_t))
    return T.matmul(score, v)


def mha_forward(h: T.Node, heads: list[SHAParams]) -> T.Node:
    if not heads:
        raise T.ShapeError("MHA needs at least one head")
    ref = (heads[0].W_Q.shape, heads[0].W_V.shape)
    for i, hp in enumerate(heads):
        if (hp.W_Q.shape, hp.W_V.shape) != ref or hp.W_K.shape != hp.W_Q.shape:
            raise T.ShapeError(f"head {i} shapes differ from head 0")
    return T.concat_rows([sha_forward(h, hp) for hp in heads])


def gated_pool(H: T.Node, p: GatedPoolParams) -> T.Node:
    """Gated-attention pooling of the m rows of ``H`` into one row.

    Scores are formed per row through ``w_gate`` first; softmax then runs
    over the m scalar scores.
    """
    d = H.shape[1]
    if p.W_V_gate.shape[0] != d or p.W_U_gate.shape != p.W_V_gate.shape or \
            p.w_gate.shape != (p.W_V_gate.shape[1], 1):
        raise T.ShapeError(f"gated-pool weights do not fit rows of width {d}")
    tape = H.tape
    gv = T.tanh(T.matmul(H, tape.param(p.W_V_gate)))
    gu = T.sigmoid(T.matmul(H, tape.param(p.W_U_gate)))
    scores = T.matmul(T.hadamard(gv, gu), tape.param(p.w_gate))  # m x 1
    weights = T.softmax_row(T.transpose(scores))  # 1 x m
    return T.matmul(weights, H)


def mhfa_forward(h_t: T.Node, params: MHFAParams) -> T.Node:
    """Adapted teacher feature; the teacher feature itself is detached."""
    h_norm = pts_normalise(T.detach(h_t), params.pts)
    return gated_pool(mha_forward(h_norm, params.heads), params.pool)


def default_key_dim(d_s: int, m: int) -> int:
    return max(8, math.ceil(d_s / m))


def init_mhfa(d_t: int, d_s: int, m: int = DEFAULT_HEADS, seed: int = 0, d_k: int | None = None,
              d_gate: int = DEFAULT_GATE_DIM, pts: PTSConfig = PTSConfig()) -> MHFAParams:
    if m < 1:
        raise ValueError(f"number of heads must be >= 1, got {m}")
    d_k = default_key_dim(d_s, m) if d_k is None else d_k
    rng = np.random.default_rng(derive_seed(seed, "mhfa.init"))
    heads = [SHAParams(glorot(rng, (d_t, d_k)), glorot(rng, (d_t, d_k)), glorot(rng, (d_t, d_s)))
             for _ in range(m)]
    pool = GatedPoolParams(glorot(rng, (d_s, d_gate)), glorot(rng, (d_s, d_gate)), glorot(rng, (d_gate, 1)))
    return MHFAParams(heads, pool, pts)


def transfer_loss(setting: TransferSetting, teacher_out: MILOutputs | None, student_out: MILOutputs,
                  task_loss: T.Node, mhfa: MHFAParams | None = None,
                  projection: np.ndarray | None = None, pts: PTSConfig = PTSConfig()) -> T.Node:
    """Task loss plus ``alpha`` times the RSS between matched teacher/student signals.

    Teacher quantities are detached. ``projection`` (d_t x d_s) reduces the
    normalised teacher feature for ``feature_pts`` when widths differ.
    """
    term = transfer_term(setting, teacher_out, student_out, mhfa, projection, pts)
    return task_loss if term is None else T.add(term, task_loss)


def transfer_term(setting: TransferSetting, teacher_out: MILOutputs | None, student_out: MILOutputs,
                  mhfa: MHFAParams | None = None, projection: np.ndarray | None = None,
                  pts: PTSConfig = PTSConfig()) -> T.Node | None:
    """``alpha * RSS(target, pred)``, or ``None`` for methods without a transfer signal."""
    method = setting.method
    if method in ("none", "finetune"):
        return None
    if teacher_out is None:
        raise TransferError(f"method {method!r} needs teacher outputs")
    if method == "logit":
        pt, ps = teacher_out.probs, student_out.probs
        if pt.shape != ps.shape:
            raise TransferError(f"logit transfer: class counts differ ({pt.shape[1]} vs {ps.shape[1]})")
        target, pred = T.detach(pt), ps
    elif method == "attention":
        at, as_ = teacher_out.attention, student_out.attention
        if at.shape != as_.shape:
            raise TransferError(f"attention transfer: instance counts differ ({at.shape[1]} vs {as_.shape[1]})")
        target, pred = T.detach(at), as_
    elif method == "feature_pts":
        target = pts_normalise(T.detach(teacher_out.bag_feature), pts)
        if projection is not None:
            target = T.matmul(target, target.tape.constant(projection))
        pred = student_out.bag_feature
        if target.shape != pred.shape:
            raise TransferError(
                f"feature transfer: teacher width {target.shape[1]} vs student {pred.shape[1]}; fit a projection")
        target = T.detach(target)
    else:  # mhfa
        if mhfa is None:
            raise TransferError("method 'mhfa' needs MHFA parameters")
        target, pred = mhfa_forward(teacher_out.bag_feature, mhfa), student_out.bag_feature
        if target.shape != pred.shape:
            raise TransferError(f"MHFA output width {target.shape[1]} vs student {pred.shape[1]}")
    return T.scale_const(T.rss_loss(target, pred), setting.alpha)


def init_student_from_teacher(teacher: MILParams, student_arch: MILArch) -> MILParams | None:
    """Deep copy of the teacher when every tensor shape matches, else ``None``."""
    if teacher.shapes() != student_arch.shapes():
        return None
    return teacher.copy()


def pca_reduce(fit_data: np.ndarray, d_s: int, iterations: int = 200, tol: float = 1e-9,
               seed: int = 0) -> np.ndarray:
    """Top-``d_s`` principal directions (d_t x d_s) by power iteration with deflation."""
    X = np.asarray(fit_data, dtype=np.float64)
    N, d_t = X.shape
    if N < d_s:
        raise TransferError(f"PCA needs at least d_s={d_s} samples, got {N}")
    if d_s > d_t:
        raise TransferError(f"cannot reduce width {d_t} to a larger {d_s}")
    Xc = X - X.mean(axis=0, keepdims=True)
    C = Xc.T @ Xc / max(N - 1, 1)
    rng = np.random.default_rng(derive_seed(seed, "pca.init"))
    comps = np.zeros((d_t, d_s))
    for j in range(d_s):
        v = rng.normal(size=d_t)
        # start orthogonal to what is already found so a rank-deficient
        # remainder still yields an orthonormal completion
        v -= comps[:, :j] @ (comps[:, :j].T @ v)
        v /= np.linalg.norm(v)
        for _ in range(iterations):
            w = C @ v
            w -= comps[:, :j] @ (comps[:, :j].T @ w)
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                break
            w /= norm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        comps[:, j] = v
        lam = v @ C @ v
        C = C - lam * np.outer(v, v)
    return comps


def save_mhfa(directory: str | Path, params: MHFAParams) -> Path:
    meta = {**params.dims, "T": params.pts.T, "t": params.pts.t}
    return checkpoint.save(directory, "mhfa", meta, params.named_tensors())


def load_mhfa(directory: str | Path) -> MHFAParams:
    manifest, tensors = checkpoint.load(directory, "mhfa")
    try:
        m = int(manifest["m"])
        heads = [SHAParams(tensors[f"head{i}.W_Q"], tensors[f"head{i}.W_K"], tensors[f"head{i}.W_V"])
                 for i in range(m)]
        pool = GatedPoolParams(tensors["pool.W_V_gate"], tensors["pool.W_U_gate"], tensors["pool.w_gate"])
        pts = PTSConfig(T=manifest["T"], t=manifest["t"])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{directory}: missing entry {exc}") from exc
    return MHFAParams(heads, pool, pts)

