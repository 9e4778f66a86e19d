"""Euler-Maruyama simulation of the state together with its variation processes.

For dX = b dt + sigma dB the simulator propagates, on one uniform grid and
with shared increments:

  X_t    state                                  (m,)
  Y_t    first variation dX_t/dx0               (m, m)   Y_0 = I
  Yinv_t inverse first variation, own SDE       (m, m)   Yinv_0 = I
  Z_t    second variation d^2X_t/dx0^2          (m, m, m) Z[i, p, q], Z_0 = 0

Yinv is *propagated*, not inverted, via
  dYinv = Yinv (-db + sum_l dsigma_l^2) dt - sum_l Yinv dsigma_l dB^l,
so Y_t Yinv_t - I carries an O(dt) drift that downstream checks monitor.

Everything is vectorized over a leading batch-of-paths axis; the
single-trajectory entry points run the same kernels with batch size 1.
Noise is counter-based (Philox keyed on (seed, path_index)) so any path can
be regenerated independently of execution order or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .models import SdeModel


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with nodes t_i = i * horizon / steps, i = 0..steps."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0.0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"need at least 1 step, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def node_index(self, t: float, tol: float = 1e-9) -> int:
        """Map a time to its grid node, rejecting off-grid times."""
        i = int(round(t / self.dt))
        i = min(max(i, 0), self.steps)
        if abs(t - i * self.dt) > tol * max(1.0, self.horizon):
            raise ValueError(
                f"t={t} is not a grid node (nearest node is t={i * self.dt} at index {i})"
            )
        return i

    def truncated(self, node: int) -> "TimeGrid":
        """The subgrid [0, t_node] with the same spacing."""
        if not 1 <= node <= self.steps:
            raise ValueError(f"truncation node must be in [1, {self.steps}], got {node}")
        return TimeGrid(horizon=node * self.dt, steps=node)


@dataclass(frozen=True)
class BrownianPath:
    """Increments dB_i over [t_i, t_{i+1}), shape (steps, d)."""

    increments: np.ndarray
    seed: int
    path_index: int

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[1]


def _philox(seed: int, path_index: int) -> np.random.Generator:
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_brownian(grid: TimeGrid, noise_dim: int, seed: int, path_index: int) -> BrownianPath:
    """Draw one path's increments from its own counter-based stream."""
    gen = _philox(seed, path_index)
    inc = gen.standard_normal((grid.steps, noise_dim)) * math.sqrt(grid.dt)
    return BrownianPath(increments=inc, seed=seed, path_index=path_index)


def sample_brownian_block(
    grid: TimeGrid, noise_dim: int, seed: int, first_path: int, n_paths: int
) -> np.ndarray:
    """Increments for paths [first_path, first_path + n_paths), shape (n, steps, d).

    Row j is bit-identical to sample_brownian(..., first_path + j).
    """
    out = np.empty((n_paths, grid.steps, noise_dim))
    root = math.sqrt(grid.dt)
    for j in range(n_paths):
        gen = _philox(seed, first_path + j)
        out[j] = gen.standard_normal((grid.steps, noise_dim))
    out *= root
    return out


def perturb_increment(path: BrownianPath, i: int, l: int, eps: float) -> BrownianPath:
    """Return a copy of the path with eps added to increment (i, l)."""
    if not 0 <= i < path.steps:
        raise IndexError(f"step index {i} outside [0, {path.steps})")
    if not 0 <= l < path.d:
        raise IndexError(f"channel index {l} outside [0, {path.d})")
    inc = path.increments.copy()
    inc[i, l] += eps
    return replace(path, increments=inc)


@dataclass
class TrajectoryBatch:
    """A block of simulated paths with their variation processes.

    Shapes: X (B, N+1, m); Y, Yinv (B, N+1, m, m); Z (B, N+1, m, m, m);
    dB (B, N, d); valid (B,) marks paths that stayed finite.
    """

    model: SdeModel
    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    Yinv: np.ndarray
    Z: np.ndarray
    dB: np.ndarray
    valid: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_invalid(self) -> int:
        return int(np.sum(~self.valid))


@dataclass
class VariationTrajectory:
    """One simulated path: state plus first/second variations and Yinv."""

    model: SdeModel
    grid: TimeGrid
    path: BrownianPath | None
    X: np.ndarray
    Y: np.ndarray
    Yinv: np.ndarray
    Z: np.ndarray
    valid: bool

    @property
    def dB(self) -> np.ndarray:
        return self.path.increments

    def as_batch(self) -> TrajectoryBatch:
        return TrajectoryBatch(
            model=self.model,
            grid=self.grid,
            X=self.X[None],
            Y=self.Y[None],
            Yinv=self.Yinv[None],
            Z=self.Z[None],
            dB=self.dB[None],
            valid=np.array([self.valid]),
        )


def simulate_variation_batch(
    model: SdeModel,
    grid: TimeGrid,
    increments: np.ndarray,
    x0,
    reinvert_every: int | None = None,
) -> TrajectoryBatch:
    """Propagate (X, Y, Yinv, Z) for a block of paths sharing a grid.

    ``increments`` has shape (B, steps, d). ``reinvert_every=k`` replaces the
    propagated Yinv by a direct inverse of Y every k steps (off by default;
    the drift of Y Yinv is a monitored quantity).

    Paths that leave the finite domain are flagged invalid, never raised.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim != 3 or inc.shape[1] != grid.steps or inc.shape[2] != model.d:
        raise ValueError(f"increments must have shape (B, {grid.steps}, {model.d})")
    B = inc.shape[0]
    m, N, dt = model.m, grid.steps, grid.dt
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (B, m))

    X = np.empty((B, N + 1, m))
    Y = np.empty((B, N + 1, m, m))
    Yinv = np.empty((B, N + 1, m, m))
    Z = np.empty((B, N + 1, m, m, m))
    X[:, 0] = x0
    Y[:, 0] = np.eye(m)
    Yinv[:, 0] = np.eye(m)
    Z[:, 0] = 0.0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for n in range(N):
            t = n * dt
            x = X[:, n]
            y, yi, z = Y[:, n], Yinv[:, n], Z[:, n]
            dW = inc[:, n]

            b = model.b(t, x)
            sig = model.sigma(t, x)
            db = model.db(t, x)
            dsig = model.dsigma(t, x)
            d2b = model.d2b(t, x)
            d2sig = model.d2sigma(t, x)

            X[:, n + 1] = x + b * dt + np.einsum("bil,bl->bi", sig, dW)

            dbY = np.einsum("bij,bjk->bik", db, y)
            dsY = np.einsum("blij,bjk->blik", dsig, y)
            Y[:, n + 1] = y + dbY * dt + np.einsum("blik,bl->bik", dsY, dW)

            # dYinv = Yinv(-db + sum_l dsigma_l^2) dt - sum_l Yinv dsigma_l dB^l
            drift_inv = -np.einsum("bij,bjk->bik", yi, db) + np.einsum(
                "bij,bljr,blrk->bik", yi, dsig, dsig
            )
            yids = np.einsum("bij,bljk->blik", yi, dsig)
            Yinv[:, n + 1] = yi + drift_inv * dt - np.einsum("blik,bl->bik", yids, dW)

            # dZ[i,j,k]: Hessian of the flow; both drift and noise have a
            # curvature term d2(coeff):(Y x Y) plus a linear transport term.
            zdrift = np.einsum("bipq,bpj,bqk->bijk", d2b, y, y) + np.einsum(
                "bir,brjk->bijk", db, z
            )
            znoise = np.einsum("blipq,bpj,bqk->blijk", d2sig, y, y) + np.einsum(
                "blir,brjk->blijk", dsig, z
            )
            Z[:, n + 1] = z + zdrift * dt + np.einsum("blijk,bl->bijk", znoise, dW)

            if reinvert_every and (n + 1) % reinvert_every == 0:
                fresh = np.full((B, m, m), np.nan)
                ok = np.all(np.isfinite(Y[:, n + 1]), axis=(1, 2))
                if np.any(ok):
                    fresh[ok] = np.linalg.inv(Y[ok, n + 1])
                Yinv[:, n + 1] = fresh

    valid = (
        np.all(np.isfinite(X), axis=(1, 2))
        & np.all(np.isfinite(Y), axis=(1, 2, 3))
        & np.all(np.isfinite(Yinv), axis=(1, 2, 3))
        & np.all(np.isfinite(Z), axis=(1, 2, 3, 4))
    )
    return TrajectoryBatch(model=model, grid=grid, X=X, Y=Y, Yinv=Yinv, Z=Z, dB=inc, valid=valid)


def simulate_variations(
    model: SdeModel,
    grid: TimeGrid,
    path: BrownianPath,
    x0,
    reinvert_every: int | None = None,
) -> VariationTrajectory:
    """Single-path wrapper around the batch kernel (identical arithmetic)."""
    batch = simulate_variation_batch(
        model, grid, path.increments[None], x0, reinvert_every=reinvert_every
    )
    return VariationTrajectory(
        model=model,
        grid=grid,
        path=path,
        X=batch.X[0],
        Y=batch.Y[0],
        Yinv=batch.Yinv[0],
        Z=batch.Z[0],
        valid=bool(batch.valid[0]),
    )


def euler_state_batch(model: SdeModel, grid: TimeGrid, increments: np.ndarray, x0) -> np.ndarray:
    """State-only Euler scheme (no variation processes), returns X_T (B, m)."""
    inc = np.asarray(increments, dtype=float)
    B = inc.shape[0]
    x = np.broadcast_to(np.asarray(x0, dtype=float), (B, model.m)).copy()
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(grid.steps):
            t = n * dt
            x = x + model.b(t, x) * dt + np.einsum("bil,bl->bi", model.sigma(t, x), inc[:, n])
    return x


def trajectory_csv_header(m: int) -> str:
    cols = ["path", "i", "t"]
    cols += [f"X_{i + 1}" for i in range(m)]
    cols += [f"Y_{i + 1}{j + 1}" for i in range(m) for j in range(m)]
    cols += [f"Yinv_{i + 1}{j + 1}" for i in range(m) for j in range(m)]
    cols += [f"Z_{i + 1}{p + 1}{q + 1}" for i in range(m) for p in range(m) for q in range(m)]
    return ",".join(cols)


def write_trajectories_csv(fh, batch: TrajectoryBatch, path_ids=None, header: bool = True) -> None:
    """Dump a trajectory block as CSV, one row per (path, node)."""
    m = batch.model.m
    nodes = batch.grid.nodes()
    if path_ids is None:
        path_ids = range(batch.n_paths)
    if header:
        fh.write(trajectory_csv_header(m) + "\n")
    for b, pid in enumerate(path_ids):
        for i, t in enumerate(nodes):
            vals = [
                *batch.X[b, i].ravel(),
                *batch.Y[b, i].ravel(),
                *batch.Yinv[b, i].ravel(),
                *batch.Z[b, i].ravel(),
            ]
            fh.write(
                f"{pid},{i},{float(t)!r}," + ",".join(repr(float(v)) for v in vals) + "\n"
            )
