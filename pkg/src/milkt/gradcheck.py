"""Finite-difference verification of every differentiable path.

Three suites: ``tensor-core`` (each primitive, full central differences on
small operands), ``mil`` (classifier cross-entropy at default width) and
``mhfa`` (task loss plus alpha * RSS(MHFA(h_t), h_s) at default widths).
The wide suites check a seeded sample of entries per tensor.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable

import numpy as np

from . import tensor as T
from .model import MILArch, MILParams, forward, init_params, param_list
from .seeding import derive_seed
from .tensor import Tape, backward, finite_difference_gradient, relative_error
from .transfer import DEFAULT_ALPHA, MHFAParams, init_mhfa, mhfa_forward

SCOPES = ("tensor-core", "mil", "mhfa")
THRESHOLD = 1e-4
STEP = 1e-5


@contextlib.contextmanager
def injected_fault(op: str | None):
    """Corrupt one primitive's backward for the duration of the block."""
    if op is None:
        yield
        return
    T._FAULTY_OPS.add(op)
    try:
        yield
    finally:
        T._FAULTY_OPS.discard(op)


def _check(build: Callable[[Tape, T.Node], T.Node], x: np.ndarray, coords=None) -> float:
    tape = Tape()
    leaf = tape.param(np.array(x, dtype=np.float64))
    backward(tape, build(tape, leaf))

    def f(v):
        t = Tape()
        return build(t, t.constant(v)).value[0, 0]

    return relative_error(leaf.grad, finite_difference_gradient(f, x, STEP, coords))


def tensor_core_suite(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(derive_seed(seed, "gradcheck.tensor"))
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    C = rng.normal(size=(3, 4))
    W = rng.normal(size=(3, 4))
    Wt = rng.normal(size=(4, 3))
    row = rng.normal(size=(1, 4))
    pos = rng.uniform(0.3, 2.0, size=(3, 4))
    away = np.where(np.abs(A) < 0.05, 0.5, A)  # off the relu/abs kinks

    def weighted(tape, node, w=W):
        return T.sum_all(T.hadamard(node, tape.constant(w)))

    k = lambda tape, v: tape.constant(v)
    cases = {
        "matmul": (lambda tape, x: T.sum_all(T.matmul(x, k(tape, B))), A),
        "matmul[rhs]": (lambda tape, x: T.sum_all(T.matmul(k(tape, A), x)), B),
        "add": (lambda tape, x: weighted(tape, T.add(x, k(tape, C))), A),
        "sub": (lambda tape, x: weighted(tape, T.sub(k(tape, C), x)), A),
        "add_row": (lambda tape, x: weighted(tape, T.add_row(k(tape, C), x)), row),
        "hadamard": (lambda tape, x: weighted(tape, T.hadamard(x, k(tape, C))), A),
        "tanh": (lambda tape, x: weighted(tape, T.tanh(x)), A),
        "sigmoid": (lambda tape, x: weighted(tape, T.sigmoid(x)), A),
        "relu": (lambda tape, x: weighted(tape, T.relu(x)), away),
        "abs": (lambda tape, x: weighted(tape, T.abs_(x)), away),
        "pow_const": (lambda tape, x: weighted(tape, T.pow_const(x, 1.0 / 3.0)), pos),
        "scale_const": (lambda tape, x: weighted(tape, T.scale_const(x, -0.7)), A),
        "transpose": (lambda tape, x: weighted(tape, T.transpose(x), Wt), A),
        "softmax_row": (lambda tape, x: weighted(tape, T.softmax_row(x)), A),
        "concat_rows": (lambda tape, x: weighted(
            tape, T.concat_rows([T.scale_const(x, 1.0), k(tape, C[1:2]), T.tanh(x)])), row),
        "rss_loss": (lambda tape, x: T.rss_loss(x, k(tape, C[:1])), row),
        "cross_entropy": (lambda tape, x: T.cross_entropy_loss(T.softmax_row(x), 2), row),
    }
    return {name: _check(build, x) for name, (build, x) in cases.items()}


def _sample_coords(rng: np.random.Generator, shape: tuple[int, int], k: int) -> list[tuple[int, int]]:
    total = shape[0] * shape[1]
    flat = rng.choice(total, size=min(k, total), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]


def _tensor_errors(loss_of: Callable[[], float], tensors: list[tuple[str, np.ndarray]],
                   grads: dict[str, np.ndarray], rng: np.random.Generator, k: int) -> dict[str, float]:
    """Finite-difference check of ``k`` sampled entries of each tensor, perturbed in place."""
    errors = {}
    for name, arr in tensors:
        coords = _sample_coords(rng, arr.shape, k)
        num = np.full(arr.shape, np.nan)
        for idx in coords:
            orig = arr[idx]
            arr[idx] = orig + STEP
            fp = loss_of()
            arr[idx] = orig - STEP
            fm = loss_of()
            arr[idx] = orig
            num[idx] = (fp - fm) / (2 * STEP)
        errors[name] = relative_error(grads[name], num)
    return errors


def _bag(rng: np.random.Generator, n: int, d_in: int) -> np.ndarray:
    return rng.normal(size=(n, d_in)) + 0.3


def mil_suite(seed: int = 0, arch: MILArch | None = None, n: int = 24, samples: int = 6) -> dict[str, float]:
    arch = arch or MILArch.preset("small", n_classes=3)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck.mil"))
    params = init_params(arch, seed)
    params.b_embed[:] = rng.normal(scale=0.05, size=params.b_embed.shape)
    params.b_cls[:] = rng.normal(scale=0.05, size=params.b_cls.shape)
    bag, label = _bag(rng, n, arch.d_in), 1

    def loss_on(tape):
        return T.cross_entropy_loss(forward(params, bag, False, tape).probs, label)

    tape = Tape()
    backward(tape, loss_on(tape))
    tensors = param_list(params)
    grads = {name: tape.grad_of(arr).copy() for name, arr in tensors}
    errs = _tensor_errors(lambda: loss_on(Tape()).value[0, 0], tensors, grads, rng, samples)
    return {f"mil.{k}": v for k, v in errs.items()}


def mhfa_objective(student: MILParams, mhfa: MHFAParams, h_t: np.ndarray, bag: np.ndarray, label: int,
                   alpha: float, tape: Tape) -> T.Node:
    out = forward(student, bag, False, tape)
    task = T.cross_entropy_loss(out.probs, label)
    target = mhfa_forward(tape.constant(h_t), mhfa)
    return T.add(T.scale_const(T.rss_loss(target, out.bag_feature), alpha), task)


def mhfa_suite(seed: int = 0, d_t: int = 768, student_arch: MILArch | None = None, m: int = 8,
               d_gate: int = 256, n: int = 24, samples: int = 4) -> dict[str, float]:
    sa = student_arch or MILArch.preset("small", n_classes=2)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck.mhfa"))
    student = init_params(sa, derive_seed(seed, "student"))
    mhfa = init_mhfa(d_t, sa.d_embed, m, seed=seed, d_gate=d_gate)
    # a teacher-like bag feature: convex mix of non-negative embeddings
    h_t = np.abs(rng.normal(scale=0.5, size=(1, d_t)))
    bag, label = _bag(rng, n, sa.d_in), 1

    def loss_on(tape):
        return mhfa_objective(student, mhfa, h_t, bag, label, DEFAULT_ALPHA, tape)

    tape = Tape()
    backward(tape, loss_on(tape))
    tensors = [(f"student.{k}", v) for k, v in param_list(student)] + \
              [(f"mhfa.{k}", v) for k, v in mhfa.named_tensors()]
    grads = {name: tape.grad_of(arr).copy() for name, arr in tensors}
    return _tensor_errors(lambda: loss_on(Tape()).value[0, 0], tensors, grads, rng, samples)


def run(scope: str = "all", seed: int = 0, fault: str | None = None) -> dict[str, float]:
    """Per-check maximum relative error for the requested scope."""
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    scopes = SCOPES if scope == "all" else (scope,)
    results: dict[str, float] = {}
    with injected_fault(fault):
        for s in scopes:
            if s == "tensor-core":
                results.update({f"tensor.{k}": v for k, v in tensor_core_suite(seed).items()})
            elif s == "mil":
                results.update(mil_suite(seed))
            else:
                results.update(mhfa_suite(seed))
    return results


def failures(results: dict[str, float], threshold: float = THRESHOLD) -> list[str]:
    return [k for k, v in results.items() if not (math.isfinite(v) and v < threshold)]
