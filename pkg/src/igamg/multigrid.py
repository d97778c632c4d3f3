"""V/W-cycle multigrid with exact coarsest solve, stationary and PCG drivers.

Coarse operators come from the Galerkin triple product of the finest
assembled matrix, which (by the fixed finest-level penalty) coincides with
direct re-discretization.  The stationary solver iterates cycles until
||A u - f|| / ||f|| <= eps; the PCG driver uses one cycle from a zero
initial correction as the preconditioner.
"""

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import assembly
from . import linsolve
from . import smoothers as sm

__all__ = ["CycleConfig", "SolveReport", "MultigridSolver"]


@dataclass(frozen=True)
class CycleConfig:
    """Knobs of the multigrid cycle and the outer iteration."""

    smoother: str = "gs"  # 'gs' | 'scms' | 'hyb'
    mu: int = 1  # 1 = V-cycle, 2 = W-cycle
    nu: int = 1  # smoothing steps per level
    nu_schedule: str = "constant"  # 'constant' | 'theory'
    tau: float = 1.0
    delta: float = 0.12
    sigma: float = 5.0
    tol: float = 1e-8
    max_iters: int = 500
    interior_policy: str = "product"

    def __post_init__(self):
        if self.mu not in (1, 2):
            raise ValueError("cycle index mu must be 1 (V) or 2 (W)")
        if self.nu < 0 or self.tol <= 0:
            raise ValueError("invalid smoothing step count or tolerance")
        if self.smoother in ("scms", "hyb") and (self.tau <= 0 or self.delta <= 0):
            raise ValueError("scms/hybrid require positive damping and scaling")

    def steps_at(self, level, finest):
        if self.nu_schedule == "constant":
            return self.nu
        gap = finest - level
        return self.nu * 2 ** gap * (1 + gap) ** 2


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    diverged: bool
    residuals: list
    wall_seconds: float
    n_dofs: int
    method: str
    config: dict

    @property
    def final_residual(self):
        return self.residuals[-1] if self.residuals else 0.0

    def to_json(self):
        return json.dumps(
            {
                "iterations": self.iterations,
                "converged": self.converged,
                "diverged": self.diverged,
                "final_residual": self.final_residual,
                "wall_seconds": self.wall_seconds,
                "n_dofs": self.n_dofs,
                "method": self.method,
                "config": self.config,
            }
        )


class MultigridSolver:
    """Assembled level hierarchy plus smoothers; runs cycles and solves."""

    def __init__(self, hier, config=CycleConfig()):
        self.hier = hier
        self.config = config
        self.finest = hier.L
        asm = assembly.assemble_level(hier, hier.L, sigma=config.sigma)
        self.assembled_finest = asm
        self.A = [None] * (hier.L + 1)
        self.A[hier.L] = asm.A
        self.P = [None] * (hier.L + 1)
        for level in range(hier.L, 0, -1):
            self.P[level] = assembly.prolongation(hier, level)
            self.A[level - 1] = (
                self.P[level].T @ self.A[level] @ self.P[level]
            ).tocsr()
        self.coarse_solver = linsolve.factorize(self.A[0], spd=True)
        self.smoother = [None] * (hier.L + 1)
        for level in range(1, hier.L + 1):
            self.smoother[level] = sm.build_smoother(
                config.smoother,
                self.A[level],
                hier,
                level,
                tau=config.tau,
                delta=config.delta,
                interior_policy=config.interior_policy,
            )
        self.coarse_calls = 0

    @property
    def n_dofs(self):
        return self.A[self.finest].shape[0]

    def cycle(self, level, f, u=None):
        """One multigrid cycle on `level`; returns the updated iterate."""
        if level < 1:
            raise ValueError("cycles act on levels >= 1")
        cfg = self.config
        A = self.A[level]
        u = np.zeros_like(f) if u is None else u
        steps = cfg.steps_at(level, self.finest)
        u = self.smoother[level].pre_smooth(A, u, f, steps)
        r = self.P[level].T @ (f - A @ u)
        if level == 1:
            self.coarse_calls += 1
            u = u + self.P[level] @ self.coarse_solver(r)
        else:
            for _ in range(cfg.mu):
                correction = self.cycle(level - 1, r)
                u = u + self.P[level] @ correction
                if cfg.mu > 1:
                    r = self.P[level].T @ (f - A @ u)
        u = self.smoother[level].post_smooth(A, u, f, steps)
        return u

    def preconditioner(self):
        """One cycle from zero initial correction, as a linear operator."""
        return lambda r: self.cycle(self.finest, r)

    def check_preconditioner_spd(self, rtol=1e-8, seed=20240801):
        """Symmetry of the cycle on a random vector pair (PCG prerequisite)."""
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(self.n_dofs)
        s = rng.standard_normal(self.n_dofs)
        Br, Bs = self.cycle(self.finest, r), self.cycle(self.finest, s)
        lhs, rhs = s @ Br, r @ Bs
        scale = max(abs(lhs), abs(rhs), 1e-30)
        if abs(lhs - rhs) > rtol * scale:
            raise ValueError(
                "multigrid preconditioner is not symmetric "
                f"({abs(lhs - rhs) / scale:.2e} relative); "
                "use symmetric smoothing orders"
            )
        if r @ Br <= 0 or s @ Bs <= 0:
            raise ValueError("multigrid preconditioner is not positive definite")

    def _report(self, its, converged, diverged, residuals, t0, method):
        return SolveReport(
            iterations=its,
            converged=converged,
            diverged=diverged,
            residuals=residuals,
            wall_seconds=time.perf_counter() - t0,
            n_dofs=self.n_dofs,
            method=method,
            config=asdict(self.config),
        )

    def _iterate(self, f, step, method):
        """Shared driver: run `step` until the relative residual is below tol.

        Divergence (10 consecutive residual increases) or hitting the
        iteration cap is flagged on the report, mirroring the '--' entries
        of iteration-count tables.
        """
        cfg = self.config
        t0 = time.perf_counter()
        normf = np.linalg.norm(f)
        if normf == 0.0:
            return self._report(0, True, False, [], t0, method)
        u = np.zeros_like(f)
        residuals = []
        increases = 0
        for it in range(1, cfg.max_iters + 1):
            u, rel = step(u)
            rel = rel / normf
            if residuals and rel > residuals[-1]:
                increases += 1
            else:
                increases = 0
            residuals.append(rel)
            if rel <= cfg.tol:
                return self._report(it, True, False, residuals, t0, method)
            if increases >= 10 or not np.isfinite(rel):
                return self._report(it, False, True, residuals, t0, method)
        return self._report(cfg.max_iters, False, True, residuals, t0, method)

    def solve_stationary(self, f):
        """Plain stationary iteration: repeat cycles from u = 0."""
        A = self.A[self.finest]

        def step(u):
            u = self.cycle(self.finest, f, u)
            return u, np.linalg.norm(f - A @ u)

        return self._iterate(f, step, "stationary")

    def solve_direct(self, f):
        """Cycle-preconditioned gradient iteration with exact line search.

        This is the 'direct' application of the multigrid solver in the
        sense of the reference iteration counts: each step applies one
        cycle to the residual and takes the energy-optimal step length.
        """
        A = self.A[self.finest]
        state = {"r": f.copy()}

        def step(u):
            r = state["r"]
            z = self.cycle(self.finest, r)
            Az = A @ z
            zAz = z @ Az
            if not np.isfinite(zAz) or zAz <= 0.0:
                return u, np.inf
            alpha = (r @ z) / zAz
            u = u + alpha * z
            state["r"] = r - alpha * Az
            return u, np.linalg.norm(state["r"])

        return self._iterate(f, step, "direct")

    def solve_pcg(self, f):
        """PCG on the finest operator with one cycle as the preconditioner."""
        cfg = self.config
        t0 = time.perf_counter()
        if np.linalg.norm(f) == 0.0:
            return self._report(0, True, False, [], t0, "pcg")
        self.check_preconditioner_spd()
        _, its, history = linsolve.cg(
            self.A[self.finest],
            f,
            preconditioner=self.preconditioner(),
            tol=cfg.tol,
            max_iters=cfg.max_iters,
        )
        converged = bool(history and history[-1] <= cfg.tol)
        return self._report(its, converged, not converged, history, t0, "pcg")

    def solve(self, f, mode="direct"):
        if mode in ("direct", "d"):
            return self.solve_direct(f)
        if mode in ("pcg", "cg"):
            return self.solve_pcg(f)
        if mode in ("stationary", "richardson"):
            return self.solve_stationary(f)
        raise ValueError(f"unknown iteration mode {mode!r}")
