"""Nonlinear least-squares solvers.

``solve_gd``, ``solve_gn`` and ``solve_lm`` are plain reference solvers that
work on forward values only. ``solve_gradlm`` is the differentiable
Levenberg-Marquardt variant: the damp/undamp switch is replaced by two
logistic gates, so the unrolled solve is one recorded computation whose
output can be differentiated with respect to the initial guess, the data
feeding the residual function and the gating parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

from .autodiff import Tape, Tensor, as_tensor, no_grad, sigmoid, solve, stack, where

logger = logging.getLogger(__name__)

Number = Union[float, Tensor]
RIDGE = 1e-10
_COND_LIMIT = 1e13


@dataclass
class LeastSquaresProblem:
    """Minimise ``sum(r(x)**2)``.

    ``residual_fn`` maps a k-vector tensor to an m-vector tensor. If
    ``jacobian_fn`` is omitted the Jacobian is built from central
    differences of ``residual_fn``; those are recorded operations too, so
    the solve stays differentiable without second-order autodiff.

    ``linearize`` is an optional hook for problems whose residual depends on
    a data association (ICP, say). It is called once per iteration at the
    current iterate and its result is passed as a second argument to
    ``residual_fn`` and ``jacobian_fn``, so the current and lookahead costs
    are compared under the same association.
    """

    residual_fn: Callable[..., Tensor]
    x0: Tensor
    jacobian_fn: Optional[Callable[..., Tensor]] = None
    fd_step: float = 1e-6
    linearize: Optional[Callable[[Tensor], Any]] = None

    def __post_init__(self):
        self.x0 = as_tensor(self.x0)

    def context(self, x: Tensor):
        return None if self.linearize is None else self.linearize(x)

    def residual(self, x: Tensor, ctx=None) -> Tensor:
        if self.linearize is None:
            return self.residual_fn(x)
        return self.residual_fn(x, self.linearize(x) if ctx is None else ctx)

    def jacobian(self, x: Tensor, ctx=None) -> Tensor:
        if self.linearize is not None and ctx is None:
            ctx = self.linearize(x)
        if self.jacobian_fn is not None:
            return self.jacobian_fn(x) if self.linearize is None else self.jacobian_fn(x, ctx)
        k = x.shape[0]
        cols = []
        for i in range(k):
            e = np.zeros(k)
            e[i] = self.fd_step
            cols.append((self.residual(x + e, ctx) - self.residual(x - e, ctx)) / (2 * self.fd_step))
        return stack(cols, axis=1)


@dataclass
class GatingParams:
    """Damping range and logistic falloff for the differentiable LM.

    ``step_steepness`` controls the iterate gate. ``relative`` feeds both gates
    with the cost change divided by the current cost, which makes the
    defaults independent of the residual scale; with ``relative=False`` the
    raw difference of squared norms is used.

    With ``schedule="absolute"`` the gate output is the next damping value.
    ``schedule="multiplicative"`` instead scales the current damping by the
    gate output (so ``lambda_min``/``lambda_max`` bound the per-step factor),
    which gives the gate a memory of repeated failures.
    """

    lambda_min: Number = 1e-6
    lambda_max: Number = 1e2
    D: Number = 100.0
    sigma: Number = 10.0
    lambda_init: float = 1e-2
    step_steepness: Number = 100.0
    relative: bool = True
    compat_qx_sign: bool = False
    schedule: str = "absolute"

    def __post_init__(self):
        if self.schedule not in ("absolute", "multiplicative"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        lo, hi = _val(self.lambda_min), _val(self.lambda_max)
        if not 0 < lo < hi:
            raise ValueError("need 0 < lambda_min < lambda_max")
        if not _val(self.D) > 0 or not _val(self.sigma) > 0:
            raise ValueError("D and sigma must be positive")


def _val(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


@dataclass
class SolverTrace:
    iterates: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    x: Optional[Tensor] = None  # final iterate; recorded for solve_gradlm
    cost: Optional[Tensor] = None  # cost at the final iterate

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def q_lambda(r0: Number, r1: Number, p: GatingParams):
    """Next damping coefficient from current and lookahead costs."""
    diff = as_tensor(r1) - r0
    span = as_tensor(p.lambda_max) - p.lambda_min
    return span / (1.0 + p.D * (-(as_tensor(p.sigma) * diff)).exp()) + p.lambda_min


def q_x_weight(r0: Number, r1: Number, p: GatingParams):
    """Fraction of the proposed step that is taken.

    Improvement (``r1 < r0``) drives the weight toward 1. With
    ``compat_qx_sign`` the reversed form ``1 / (1 + exp(-(r1 - r0)))``
    is used instead, which favours worsening steps.
    """
    diff = as_tensor(r1) - r0
    if p.compat_qx_sign:
        return sigmoid(diff)
    return sigmoid(-(as_tensor(p.step_steepness) * diff))


def _guarded_solve(A: Tensor, b: Tensor, trace: SolverTrace, it: int) -> Tensor:
    Ad = A.data
    singular = not np.all(np.isfinite(Ad))
    if not singular:
        try:
            singular = np.linalg.cond(Ad) > _COND_LIMIT
        except np.linalg.LinAlgError:
            singular = True
    if singular:
        trace.warnings.append(f"iteration {it}: singular normal equations, ridge {RIDGE:g} added")
        A = A + RIDGE * np.eye(A.shape[0])
    return solve(A, b)


def _normal_equations(problem: LeastSquaresProblem, x: Tensor, ctx=None):
    r = problem.residual(x, ctx)
    J = problem.jacobian(x, ctx)
    JtJ = J.T @ J
    g = J.T @ r
    return r, J, JtJ, g


def _cost(r: Tensor) -> Tensor:
    return (r * r).sum()


def solve_gd(problem: LeastSquaresProblem, max_iters: int, step: float = 1.0) -> SolverTrace:
    """Gradient descent ``x <- x - step * J^T r``."""
    _check_iters(max_iters)
    trace = SolverTrace()
    with no_grad():
        x = Tensor(problem.x0.data.copy())
        trace.iterates.append(x.data.copy())
        for _ in range(max_iters):
            ctx = problem.context(x)
            r = problem.residual(x, ctx)
            trace.residual_norms.append(float(_cost(r).data))
            J = problem.jacobian(x, ctx)
            x = Tensor(x.data - step * (J.data.T @ r.data))
            trace.iterates.append(x.data.copy())
        trace.residual_norms.append(float(_cost(problem.residual(x)).data))
    trace.x = x
    return trace


def solve_gn(problem: LeastSquaresProblem, max_iters: int) -> SolverTrace:
    """Gauss-Newton: solve ``(J^T J) dx = -J^T r`` each iteration."""
    _check_iters(max_iters)
    trace = SolverTrace()
    with no_grad():
        x = Tensor(problem.x0.data.copy())
        trace.iterates.append(x.data.copy())
        for it in range(max_iters):
            r, _, JtJ, g = _normal_equations(problem, x)
            trace.residual_norms.append(float(_cost(r).data))
            dx = _guarded_solve(JtJ, -g, trace, it)
            x = Tensor(x.data + dx.data)
            trace.iterates.append(x.data.copy())
        trace.residual_norms.append(float(_cost(problem.residual(x)).data))
    trace.x = x
    return trace


def solve_lm(
    problem: LeastSquaresProblem,
    max_iters: int,
    lambda_init: float = 1e-2,
    up: float = 10.0,
    down: float = 0.1,
    lambda_min: float = 1e-10,
    lambda_max: float = 1e10,
    schedule: str = "multiplicative",
) -> SolverTrace:
    """Classic Levenberg-Marquardt with Marquardt scaling ``lambda * diag(J^T J)``.

    ``schedule="multiplicative"`` scales lambda by ``down`` after an
    improvement and by ``up`` (reverting the step) otherwise.
    ``schedule="two-level"`` jumps between ``lambda_min`` and ``lambda_max``,
    the hard limit of the differentiable gate.
    """
    _check_iters(max_iters)
    if schedule not in ("multiplicative", "two-level"):
        raise ValueError(f"unknown schedule {schedule!r}")
    trace = SolverTrace()
    lam = lambda_init
    with no_grad():
        x = Tensor(problem.x0.data.copy())
        ctx = problem.context(x)
        r, _, JtJ, g = _normal_equations(problem, x, ctx)
        cost = float(_cost(r).data)
        trace.iterates.append(x.data.copy())
        for it in range(max_iters):
            trace.residual_norms.append(cost)
            trace.lambdas.append(lam)
            A = JtJ + lam * np.diag(np.diag(JtJ.data))
            dx = _guarded_solve(A, -g, trace, it)
            x_try = Tensor(x.data + dx.data)
            cost_try = float(_cost(problem.residual(x_try, ctx)).data)
            improved = cost_try < cost
            if improved:
                x = x_try
                ctx = problem.context(x)
                r, _, JtJ, g = _normal_equations(problem, x, ctx)
                cost = float(_cost(r).data)
            if schedule == "two-level":
                lam = lambda_min if improved else lambda_max
            else:
                lam = min(max(lam * (down if improved else up), lambda_min), lambda_max)
            trace.iterates.append(x.data.copy())
        trace.residual_norms.append(cost)
    trace.x = x
    return trace


def solve_gradlm(
    problem: LeastSquaresProblem,
    max_iters: int,
    gating: Optional[GatingParams] = None,
    callback: Optional[Callable[[int, Tensor], None]] = None,
) -> SolverTrace:
    """Differentiable LM; every operation is recorded on the active tape.

    Each iteration proposes the damped step ``dx``, evaluates the lookahead
    cost ``r1`` at ``x + dx``, sets the next damping with :func:`q_lambda`
    and moves to ``x + q_x_weight * dx``. The number of iterations is fixed.
    """
    _check_iters(max_iters)
    p = gating or GatingParams()
    trace = SolverTrace()
    x = problem.x0
    lam: Number = Tensor(p.lambda_init)
    trace.iterates.append(x.data.copy())
    for it in range(max_iters):
        ctx = problem.context(x)
        r, _, JtJ, g = _normal_equations(problem, x, ctx)
        c0 = _cost(r)
        diag = Tensor(np.eye(JtJ.shape[0])) * JtJ
        dx = _guarded_solve(JtJ + lam * diag, -g, trace, it)
        c1 = _cost(problem.residual(x + dx, ctx))
        if p.relative:
            scale = where(c0.data > 0, c0, 1.0)
            d0, d1 = Tensor(0.0), (c1 - c0) / scale
        else:
            d0, d1 = c0, c1
        trace.residual_norms.append(float(c0.data))
        trace.lambdas.append(float(as_tensor(lam).data))
        q = q_lambda(d0, d1, p)
        lam = q if p.schedule == "absolute" else lam * q
        x = x + q_x_weight(d0, d1, p) * dx
        trace.iterates.append(x.data.copy())
        if callback is not None:
            callback(it, x)
    trace.cost = _cost(problem.residual(x))
    trace.residual_norms.append(float(trace.cost.data))
    trace.x = x
    for w in trace.warnings[:1]:
        logger.debug("solve_gradlm: %s (%d total)", w, len(trace.warnings))
    return trace


def _check_iters(max_iters: int) -> None:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")


__all__ = [
    "GatingParams",
    "LeastSquaresProblem",
    "SolverTrace",
    "Tape",
    "q_lambda",
    "q_x_weight",
    "solve_gd",
    "solve_gn",
    "solve_gradlm",
    "solve_lm",
]
