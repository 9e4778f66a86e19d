"""Independent numerical oracles used to validate the pathwise formulas.

Nothing here feeds the estimator; these are slower, structurally different
computations of the same quantities:

  fd_malliavin      re-simulation under a bumped Brownian increment
  kde_score         gradient of a Gaussian kernel density estimate
  fokker_planck_1d  Crank-Nicolson solve of the forward density PDE (m = 1)
  duality_report    Monte Carlo check of E[X_T^i delta(u_k)] = delta_ik
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

from .estimator import PathHarvest, harvest_paths, resolve_mode, silverman_bandwidth
from .malliavin import compute_bundle_batch
from .models import SdeModel
from .paths import BrownianPath, TimeGrid, simulate_variation_batch

FD_TARGETS = ("state", "firstvar", "invvar", "gamma")


def _fd_extract(batch, target: str, s: int | None, cond_threshold: float):
    if target == "state":
        return batch.X[:, -1]
    if target == "firstvar":
        return batch.Y[:, -1]
    if target == "invvar":
        return batch.Yinv[:, s]
    if target == "gamma":
        return compute_bundle_batch(batch, cond_threshold=cond_threshold).gamma
    raise ValueError(f"unknown target '{target}' (want one of {FD_TARGETS})")


def fd_malliavin(
    target: str,
    model: SdeModel,
    grid: TimeGrid,
    w: BrownianPath,
    i: int,
    l: int,
    eps: float,
    x0,
    s: int | None = None,
    cond_threshold: float = 1e8,
) -> np.ndarray:
    """Central-difference bump oracle for the pathwise derivative formulas.

    Re-simulates with the (i, l) increment shifted by +-eps and returns the
    centered difference of the target quantity (X_T, Y_T, Yinv_s or gamma).
    The invvar target requires the node s. Refuses if a bumped path blows up.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if target == "invvar" and s is None:
        raise ValueError("invvar target requires the observation node s")
    if not 0 <= i < grid.steps:
        raise IndexError(f"bump node {i} outside [0, {grid.steps})")
    inc = np.stack([w.increments, w.increments])
    inc[0, i, l] += eps
    inc[1, i, l] -= eps
    batch = simulate_variation_batch(model, grid, inc, x0)
    if not np.all(batch.valid):
        raise RuntimeError(f"bumped path blew up (target {target}, node {i}, eps {eps})")
    vals = _fd_extract(batch, target, s, cond_threshold)
    return (vals[0] - vals[1]) / (2.0 * eps)


def fd_malliavin_probes(
    target: str,
    model: SdeModel,
    grid: TimeGrid,
    probes: list,
    eps: float,
    x0,
    cond_threshold: float = 1e8,
) -> list:
    """Batched bump oracle: probes are (w, i, l) or (w, i, l, s) tuples.

    All +-bumped paths are simulated as one block; returns one centered
    difference per probe (None where the bumped simulation blew up).
    """
    rows = []
    for probe in probes:
        w, i, l = probe[0], probe[1], probe[2]
        plus = w.increments.copy()
        minus = w.increments.copy()
        plus[i, l] += eps
        minus[i, l] -= eps
        rows += [plus, minus]
    batch = simulate_variation_batch(model, grid, np.stack(rows), x0)
    out = []
    for j, probe in enumerate(probes):
        s = probe[3] if len(probe) > 3 else None
        if not (batch.valid[2 * j] and batch.valid[2 * j + 1]):
            out.append(None)
            continue
        vals = _fd_extract(
            _slice_batch(batch, slice(2 * j, 2 * j + 2)), target, s, cond_threshold
        )
        out.append((vals[0] - vals[1]) / (2.0 * eps))
    return out


def _slice_batch(batch, sl):
    return replace(
        batch,
        X=batch.X[sl],
        Y=batch.Y[sl],
        Yinv=batch.Yinv[sl],
        Z=batch.Z[sl],
        dB=batch.dB[sl],
        valid=batch.valid[sl],
    )


@dataclass
class KdeScoreResult:
    """Gradient of a log kernel density estimate at one point."""

    score: np.ndarray
    stderr: np.ndarray
    density: float
    reliable: bool


def kde_score(samples: np.ndarray, y, bandwidth="auto", density_floor: float = 1e-12) -> KdeScoreResult:
    """Score estimate from samples alone: gradient of log of a Gaussian KDE.

    For a product kernel, grad log p_hat(y) = (weighted mean of x - y) / h^2
    with kernel weights centered at y. Standard errors use the delta method
    on the weighted ratio. Flagged unreliable when the KDE mass at y is
    below ``density_floor``.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, m = X.shape
    if n < 100:
        raise ValueError(f"need at least 100 samples, got {n}")
    y = np.asarray(y, dtype=float).reshape(m)
    h = silverman_bandwidth(X) if isinstance(bandwidth, str) else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (m,)
    )

    z = (X - y) / h
    w = np.exp(-0.5 * np.sum(z * z, axis=1))
    den = w.sum()
    density = den / (n * np.prod(h) * (2.0 * math.pi) ** (m / 2.0))
    g = z / h  # (x - y)/h^2 rows
    if den <= 0:
        return KdeScoreResult(
            score=np.full(m, np.nan), stderr=np.full(m, np.nan), density=0.0, reliable=False
        )
    ratio = (w[:, None] * g).sum(axis=0) / den
    resid = w[:, None] * (g - ratio)
    stderr = np.sqrt(np.sum(resid * resid, axis=0)) / den
    return KdeScoreResult(
        score=ratio, stderr=stderr, density=float(density), reliable=bool(density >= density_floor)
    )


class MassLeakageError(RuntimeError):
    """Probability mass left the finite-difference domain."""


@dataclass
class FokkerPlanckSolution:
    """Density evolution of a scalar diffusion on a uniform mesh.

    p has shape (n_stored, n_cells + 1); times are the stored time nodes.
    """

    x: np.ndarray
    times: np.ndarray
    p: np.ndarray
    mass: np.ndarray

    def density(self, row: int = -1) -> np.ndarray:
        return self.p[row]

    def score(self, row: int = -1, density_floor: float = 1e-12) -> np.ndarray:
        """Central-difference d/dx log p at a stored time; nan where p is tiny."""
        p = self.p[row]
        dx = self.x[1] - self.x[0]
        out = np.full_like(p, np.nan)
        interior = slice(1, -1)
        pi = p[interior]
        good = pi > density_floor
        grad = (p[2:] - p[:-2]) / (2.0 * dx)
        vals = np.full(pi.shape, np.nan)
        vals[good] = grad[good] / pi[good]
        out[interior] = vals
        return out

    def score_at(self, y: np.ndarray, row: int = -1) -> np.ndarray:
        s = self.score(row)
        ok = np.isfinite(s)
        return np.interp(np.asarray(y, dtype=float), self.x[ok], s[ok])


def write_fp_csv(fh, sol: FokkerPlanckSolution, rows=(-1,)) -> None:
    fh.write("t,x,p,score\n")
    for row in rows:
        s = sol.score(row)
        t = float(sol.times[row])
        for j in range(sol.x.size):
            fh.write(f"{t!r},{float(sol.x[j])!r},{float(sol.p[row, j])!r},{float(s[j])!r}\n")


def fokker_planck_1d(
    model: SdeModel,
    x0: float,
    horizon: float,
    x_min: float,
    x_max: float,
    n_cells: int = 2400,
    n_steps: int = 2000,
    init_width: float | None = None,
    mass_tol: float = 1e-3,
    store_stride: int = 0,
) -> FokkerPlanckSolution:
    """Crank-Nicolson solve of dp/dt = -(b p)' + ((sigma^2/2) p)'' for m = 1.

    The initial condition is a narrow Gaussian (width = mesh spacing unless
    overridden). The first steps use implicit Euler to damp the oscillations
    Crank-Nicolson produces from near-delta data. Dirichlet zero boundaries;
    if total mass drifts from 1 by more than mass_tol the solve aborts, which
    is the signal to widen the mesh. Negative undershoots above -1e-12 are
    clipped to zero.

    store_stride = 0 stores only the first and final densities; k stores
    every k-th step.
    """
    if model.m != 1:
        raise ValueError("the density solver is one-dimensional")
    if not x_min < x0 < x_max:
        raise ValueError(f"x0={x0} outside mesh [{x_min}, {x_max}]")
    x = np.linspace(x_min, x_max, n_cells + 1)
    dx = x[1] - x[0]
    dt = horizon / n_steps

    bvec = model.b(0.0, x[:, None])[:, 0]
    avec = 0.5 * model.sigma(0.0, x[:, None])[:, 0, 0] ** 2

    # Row j of the generator acting on p (interior nodes only):
    #   lower: b_{j-1}/(2dx) + a_{j-1}/dx^2
    #   diag : -2 a_j/dx^2
    #   upper: -b_{j+1}/(2dx) + a_{j+1}/dx^2
    lower = bvec[:-2] / (2 * dx) + avec[:-2] / dx**2
    diag = -2.0 * avec[1:-1] / dx**2
    upper = -bvec[2:] / (2 * dx) + avec[2:] / dx**2

    w = init_width if init_width is not None else dx
    p = np.exp(-0.5 * ((x - x0) / w) ** 2)
    p /= np.trapezoid(p, x)
    p[0] = p[-1] = 0.0

    def apply_L(q):
        out = np.zeros_like(q)
        out[1:-1] = lower * q[:-2] + diag * q[1:-1] + upper * q[2:]
        return out

    def banded(theta):
        n = n_cells - 1
        ab = np.zeros((3, n))
        ab[0, 1:] = -theta * dt * upper[:-1]
        ab[1, :] = 1.0 - theta * dt * diag
        ab[2, :-1] = -theta * dt * lower[1:]
        return ab

    ab_cn = banded(0.5)
    ab_ie = banded(1.0)

    stored = [p.copy()]
    stored_t = [0.0]
    mass = [float(np.trapezoid(p, x))]
    n_startup = 4
    for step in range(n_steps):
        t = (step + 1) * dt
        if step < n_startup:
            rhs = p[1:-1]
            ab = ab_ie
        else:
            rhs = (p + 0.5 * dt * apply_L(p))[1:-1]
            ab = ab_cn
        p_new = np.zeros_like(p)
        p_new[1:-1] = solve_banded((1, 1), ab, rhs)
        neg = p_new < 0.0
        p_new[neg & (p_new >= -1e-12)] = 0.0
        p = p_new
        mval = float(np.trapezoid(p, x))
        if abs(mval - 1.0) > mass_tol:
            raise MassLeakageError(
                f"mass {mval:.6f} at t={t:.4f} (step {step + 1}) deviates from 1 by more "
                f"than {mass_tol}; widen the mesh [{x_min}, {x_max}] or refine the grid"
            )
        mass.append(mval)
        if store_stride and (step + 1) % store_stride == 0 and step + 1 != n_steps:
            stored.append(p.copy())
            stored_t.append(t)
    stored.append(p.copy())
    stored_t.append(horizon)
    return FokkerPlanckSolution(
        x=x, times=np.array(stored_t), p=np.array(stored), mass=np.array(mass)
    )


@dataclass
class DualityReport:
    """Monte Carlo integration-by-parts check E[X_T^i delta(u_k)] = delta_ik."""

    matrix: np.ndarray
    stderr: np.ndarray
    n_paths: int
    excluded: int
    max_z: float

    @property
    def ok(self) -> bool:
        return bool(self.max_z <= 3.0)


def duality_report(
    model: SdeModel,
    grid: TimeGrid,
    x0,
    n_paths: int,
    seed: int,
    mode: str = "auto",
    workers: int = 1,
    ridge: bool = False,
    harvest: PathHarvest | None = None,
    flip_b_term: bool = False,
) -> DualityReport:
    """Estimate the duality matrix and its distance from the identity in SEs.

    ``flip_b_term`` recombines the stored breakdown with the wrong sign on
    the lower-triangle correction (total = ito - a - b + c); it exists as a
    negative control for the validation pipeline and must push the check
    beyond 3 SEs.
    """
    if harvest is None:
        harvest = harvest_paths(
            model,
            grid,
            x0,
            n_paths,
            seed,
            resolve_mode(model, mode),
            workers=workers,
            ridge=ridge,
        )
    ok = harvest.valid
    n_ok = int(ok.sum())
    if n_ok < 100:
        raise ValueError(f"only {n_ok} valid paths; duality estimate unreliable")
    delta = harvest.total[ok]
    if flip_b_term:
        delta = harvest.ito[ok] - harvest.a[ok] - harvest.b[ok] + harvest.c[ok]
    X = harvest.X_t[ok]
    prod = X[:, :, None] * delta[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_ok)
    dev = np.abs(est - np.eye(model.m))
    max_z = float((dev / se).max())
    return DualityReport(
        matrix=est, stderr=se, n_paths=n_paths, excluded=harvest.n_excluded, max_z=max_z
    )
