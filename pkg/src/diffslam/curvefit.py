"""Curve-fitting benchmark comparing GD, GN, LM and the differentiable LM.

Three 3-parameter families ``p = (a, t, w)``::

    exponential  f(x) = a exp(-(x - t)^2 / (2 w^2))
    sine         f(x) = sin(a x + t x + w)
    sinc         f(x) = sinc(a x + t x + w),  sinc(z) = sin(z) / z

Ground-truth parameters and initial guesses are drawn uniformly from
[-6, 6]. In the sine and sinc families only ``a + t`` is identifiable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad, stack, where
from .gradlm import GatingParams, LeastSquaresProblem, solve_gd, solve_gn, solve_gradlm, solve_lm

FAMILIES = ("exponential", "sine", "sinc")
SOLVERS = ("GD", "GN", "LM", "gradLM")
BUDGETS = (10, 50, 100)
CSV_FIELDS = ("family", "solver", "max_iters", "mse_a", "mse_t", "mse_w", "mse_f")
_W2_EPS = 1e-12
_SINC_EPS = 1e-4


def _sinc_parts(z: Tensor):
    """sinc(z) and its derivative, safe at z = 0."""
    small = np.abs(z.data) < _SINC_EPS
    zs = where(small, 1.0, z)
    s = where(small, 1.0 - z * z / 6.0, zs.sin() / zs)
    ds = where(small, -z / 3.0, (zs * zs.cos() - zs.sin()) / (zs * zs))
    return s, ds


def curve(family: str, params, x) -> Tensor:
    """Evaluate a family at sample points ``x`` (recorded)."""
    p = as_tensor(params)
    a, t, w = p[0], p[1], p[2]
    x = as_tensor(x)
    if family == "exponential":
        return a * (-((x - t) * (x - t)) / (2.0 * (w * w + _W2_EPS))).exp()
    z = (a + t) * x + w
    if family == "sine":
        return z.sin()
    if family == "sinc":
        return _sinc_parts(z)[0]
    raise ValueError(f"unknown family {family!r}")


def curve_jacobian(family: str, params, x) -> Tensor:
    """Analytic N x 3 Jacobian of :func:`curve` with respect to (a, t, w)."""
    p = as_tensor(params)
    a, t, w = p[0], p[1], p[2]
    x = as_tensor(x)
    if family == "exponential":
        w2 = w * w + _W2_EPS
        d = x - t
        E = (-(d * d) / (2.0 * w2)).exp()
        return stack([E, a * E * d / w2, a * E * d * d * w / (w2 * w2)], axis=1)
    z = (a + t) * x + w
    if family == "sine":
        c = z.cos()
    elif family == "sinc":
        c = _sinc_parts(z)[1]
    else:
        raise ValueError(f"unknown family {family!r}")
    return stack([c * x, c * x, c], axis=1)


def make_problem(family: str, p_gt, p0, x) -> LeastSquaresProblem:
    x = np.asarray(x, dtype=float)
    y = curve(family, Tensor(p_gt), x).data
    return LeastSquaresProblem(
        residual_fn=lambda p: curve(family, p, x) - y,
        x0=Tensor(p0),
        jacobian_fn=lambda p: curve_jacobian(family, p, x),
    )


@dataclass
class SuiteConfig:
    n_instances: int = 100
    budgets: Sequence[int] = BUDGETS
    seed: int = 0
    n_points: int = 100
    x_range: tuple = (-6.0, 6.0)
    param_range: tuple = (-6.0, 6.0)
    gd_step: float = 1e-3
    gating: GatingParams = field(default_factory=GatingParams)


def sample_instances(family: str, cfg: SuiteConfig):
    """Seeded ground-truth parameters and initial guesses, each n x 3."""
    offset = FAMILIES.index(family)
    rng = np.random.default_rng([cfg.seed, offset])
    lo, hi = cfg.param_range
    p_gt = rng.uniform(lo, hi, size=(cfg.n_instances, 3))
    p0 = rng.uniform(lo, hi, size=(cfg.n_instances, 3))
    return p_gt, p0


def _run_solver(name: str, problem: LeastSquaresProblem, iters: int, cfg: SuiteConfig):
    if name == "GD":
        return solve_gd(problem, iters, step=cfg.gd_step)
    if name == "GN":
        return solve_gn(problem, iters)
    if name == "LM":
        return solve_lm(problem, iters)
    if name == "gradLM":
        with no_grad():
            return solve_gradlm(problem, iters, cfg.gating)
    raise ValueError(f"unknown solver {name!r}")


def curve_suite(family: str, cfg: SuiteConfig = SuiteConfig(), solvers: Iterable[str] = SOLVERS,
                p_gt=None, p0=None) -> list[dict]:
    """Fit every instance with every solver; one row per (solver, budget).

    Solves run for ``max(budgets)`` iterations; iteration counts are fixed
    (no early stopping), so the iterate after ``b`` steps is exactly the
    result of a ``b``-iteration solve. Errors are means over instances; the
    function-space error is also averaged over the sample points.
    """
    if cfg.n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if p_gt is None or p0 is None:
        p_gt, p0 = sample_instances(family, cfg)
    x = np.linspace(*cfg.x_range, cfg.n_points)
    budgets = sorted(set(int(b) for b in cfg.budgets))
    rows = []
    for solver in solvers:
        errs = {b: [] for b in budgets}
        for gt, init in zip(p_gt, p0):
            problem = make_problem(family, gt, init, x)
            trace = _run_solver(solver, problem, budgets[-1], cfg)
            f_gt = curve(family, Tensor(gt), x).data
            for b in budgets:
                p = trace.iterates[b]
                f = curve(family, Tensor(p), x).data
                errs[b].append(np.concatenate([(p - gt) ** 2, [np.mean((f - f_gt) ** 2)]]))
        for b in budgets:
            e = np.nan_to_num(np.mean(errs[b], axis=0), nan=np.inf)
            rows.append(dict(family=family, solver=solver, max_iters=b, mse_a=float(e[0]),
                             mse_t=float(e[1]), mse_w=float(e[2]), mse_f=float(e[3])))
    return rows


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            row["max_iters"] = int(row["max_iters"])
            for k in ("mse_a", "mse_t", "mse_w", "mse_f"):
                row[k] = float(row[k])
            out.append(row)
        return out
