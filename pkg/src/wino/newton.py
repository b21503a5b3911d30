"""Newton's method with incremental load stepping and warm-start seeding.

The solver works on a system object exposing ``residual(U, load_scale)``,
``residual_and_tangent(U, load_scale)`` and ``dof``; loads (body force,
tractions, pressure amplitudes) scale linearly with the load factor while
Dirichlet data stays fixed.  A warm start replaces both the load ramp and the
zero initial iterate: nodal predictions are copied into the dof vector and
missing auxiliary channels are filled from the stress of the predicted
displacement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import LiftSystem, TractionSystem
from .elements import Q4, element_nodes, grad_matrix
from .linalg import KrylovConfig, dense_lu, gmres
from .material import InvertedElementError, Material, piola
from .mesh import GridField

__all__ = ["NewtonConfig", "SolveReport", "newton_solve", "nows_seed"]


@dataclass
class NewtonConfig:
    tol_abs: float = 1e-10
    tol_rel: float = 1e-8
    max_newton: int = 25
    load_steps: tuple = (1.0,)
    linear: object = "lu"          # "lu" | "dense_lu" | KrylovConfig (GMRES)
    line_search: bool = False
    max_halvings: int = 8
    track_full_load: bool = True

    def __post_init__(self):
        steps = tuple(self.load_steps)
        if not steps or abs(steps[-1] - 1.0) > 1e-12:
            raise ValueError("load_steps must end at 1.0")
        if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] <= 0:
            raise ValueError("load_steps must be strictly increasing in (0, 1]")
        self.load_steps = steps


@dataclass
class SolveReport:
    newton_iters: int = 0
    krylov_per_step: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)   # (step index, |R|)
    full_load_residuals: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    failure: str = ""

    @property
    def total_krylov(self) -> int:
        return int(sum(self.krylov_per_step))


def _linear_solve(J, rhs, linear):
    """Returns (solution, inner iteration count)."""
    if isinstance(linear, KrylovConfig):
        res = gmres(J, rhs, cfg=linear)
        if not res.converged and res.flag == "stagnation":
            # stagnation is flagged, not fatal: use the best iterate
            return res.x, res.iterations
        if not np.all(np.isfinite(res.x)):
            raise FloatingPointError("non-finite Krylov solution")
        return res.x, res.iterations
    if linear == "dense_lu":
        return dense_lu(J.toarray(), rhs), 0
    if linear == "lu":
        return spla.splu(J.tocsc()).solve(rhs), 0
    raise ValueError(f"unknown linear solver {linear!r}")


def newton_solve(system, U0: np.ndarray | None, cfg: NewtonConfig):
    """Solve R(U) = 0, optionally ramping loads through cfg.load_steps.

    Each load step converges when |R| <= max(tol_abs, tol_rel * |R0|) with R0
    the residual at the step's start; the converged state seeds the next
    step.  Residual histories are recorded per iterate, plus the residual at
    full load for staircase comparisons across load-stepping strategies.
    """
    t0 = time.perf_counter()
    dof = system.dof
    U = dof.initial_vector() if U0 is None else np.asarray(U0, dtype=np.float64).copy()
    U[dof.constrained] = dof.values[dof.constrained]
    report = SolveReport()

    for step, alpha in enumerate(cfg.load_steps):
        try:
            R = system.residual(U, alpha)
        except InvertedElementError as exc:
            report.failure = f"inverted element at load step {step}: {exc}"
            report.wall_time = time.perf_counter() - t0
            return U, report
        rnorm = np.linalg.norm(R)
        tol = max(cfg.tol_abs, cfg.tol_rel * rnorm)
        report.residual_history.append((step, rnorm))
        if cfg.track_full_load:
            report.full_load_residuals.append(_full_load_norm(system, U, alpha, rnorm))

        it = 0
        while rnorm > tol:
            if it >= cfg.max_newton:
                report.failure = f"newton limit at load step {step}"
                report.wall_time = time.perf_counter() - t0
                return U, report
            _, J = system.residual_and_tangent(U, alpha)
            try:
                delta, kiters = _linear_solve(J, -R, cfg.linear)
            except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
                report.failure = f"linear solver failed: {exc}"
                report.wall_time = time.perf_counter() - t0
                return U, report
            report.krylov_per_step.append(kiters)

            s = 1.0
            accepted = False
            for _ in range(cfg.max_halvings + 1):
                try:
                    Rn = system.residual(U + s * delta, alpha)
                except InvertedElementError:
                    s *= 0.5
                    continue
                if not np.all(np.isfinite(Rn)):
                    s *= 0.5
                    continue
                if cfg.line_search and np.linalg.norm(Rn) >= rnorm and s > 2 ** -cfg.max_halvings:
                    s *= 0.5
                    continue
                accepted = True
                break
            if not accepted:
                report.failure = f"line search failed at load step {step}"
                report.wall_time = time.perf_counter() - t0
                return U, report

            U = U + s * delta
            R = Rn
            rnorm = np.linalg.norm(R)
            it += 1
            report.newton_iters += 1
            report.residual_history.append((step, rnorm))
            if cfg.track_full_load:
                report.full_load_residuals.append(
                    _full_load_norm(system, U, alpha, rnorm))

    report.converged = True
    report.wall_time = time.perf_counter() - t0
    return U, report


def _full_load_norm(system, U, alpha, rnorm):
    if alpha == 1.0:
        return rnorm
    return np.linalg.norm(system.residual(U, 1.0))


# ---------------------------------------------------------------------------
# warm starts

def _nodal_gradient(mesh, cls, u_full: np.ndarray) -> np.ndarray:
    """Average per-cell corner gradients of u onto nodes, (n_nodes, 2, 2)."""
    hx, hy = mesh.h
    ref = element_nodes(Q4)
    Bc = grad_matrix(Q4, hx, hy, ref[:, 0], ref[:, 1])  # (4, 2, 4)
    corners = mesh.cell_corners()[cls.active_cells]     # (nA, 4)
    uc = u_full[corners]                                # (nA, 4, 2)
    # grad at corner a of each cell: d u_i / d x_j = B[a, j, b] u[b, i]
    g = np.einsum("ajb,nbi->naij", Bc, uc)
    acc = np.zeros((mesh.n_nodes, 2, 2))
    cnt = np.zeros(mesh.n_nodes)
    np.add.at(acc, corners.ravel(), g.reshape(-1, 2, 2))
    np.add.at(cnt, corners.ravel(), 1.0)
    cnt[cnt == 0] = 1.0
    return acc / cnt[:, None, None]


def nows_seed(prediction: GridField, system) -> np.ndarray:
    """Initial dof vector from predicted nodal fields.

    Lift branch: channels ``w_x``, ``w_y``.  Traction branch: ``u_x``,
    ``u_y`` and optionally ``y_xx ... y_yy`` and ``p_x``, ``p_y``; missing
    auxiliary channels default to the consistency values y = -P(F(u)) at
    nodes and p = 0.  Constrained dofs are overwritten by their prescribed
    values.
    """
    dof = system.dof
    mesh = dof.mesh
    if (prediction.mesh.nx, prediction.mesh.ny) != (mesh.nx, mesh.ny):
        raise ValueError("prediction grid does not match the system mesh")
    U = np.zeros(dof.n_dofs)

    if isinstance(system, LiftSystem):
        w = np.stack([prediction.flat("w_x"), prediction.flat("w_y")], axis=1)
        U[:dof.off_y] = w[dof.u_nodes].ravel()
    elif isinstance(system, TractionSystem):
        u = np.stack([prediction.flat("u_x"), prediction.flat("u_y")], axis=1)
        U[:dof.off_y] = u[dof.u_nodes].ravel()
        names = ("y_xx", "y_xy", "y_yx", "y_yy")
        if all(n in prediction for n in names):
            y = np.stack([prediction.flat(n) for n in names], axis=1)
        else:
            grads = _nodal_gradient(mesh, system.ctx.cls, u)
            F = np.eye(2) + grads[dof.y_nodes]
            y_band = -piola(system.mat, F).reshape(len(dof.y_nodes), 4)
            y = np.zeros((mesh.n_nodes, 4))
            y[dof.y_nodes] = y_band
        U[dof.off_y:dof.off_p] = y[dof.y_nodes].ravel()
        if all(n in prediction for n in ("p_x", "p_y")):
            p = np.stack([prediction.flat("p_x"), prediction.flat("p_y")], axis=1)
            U[dof.off_p:] = p[dof.p_nodes].ravel()
    else:
        raise TypeError(f"unsupported system type {type(system).__name__}")

    U[dof.constrained] = dof.values[dof.constrained]
    return U
