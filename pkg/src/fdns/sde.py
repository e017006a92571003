"""Euler-Maruyama particle flows with a reproducible randomness contract.

The engine integrates

    dX_s = drift(s, X_s) ds + sqrt(2 a(T - s, X_s)) dW_s

over a uniform restriction of one global time mesh on [0, T].  Noise
increments are keyed by the *global* step index, never by the position of a
step inside the current mesh, so re-simulating a sub-interval replays the
identical increments.  Together with unwrapped positions on the torus
(coordinates live in R^d; wrapping happens only when drift or coefficients
are evaluated) this makes the two-leg composition of flows bitwise equal to
the one-shot simulation.

The variational flow J = dX/dx0 is propagated by the forward recursion
J_{m+1} = J_m + grad_drift(s_m, X_m) J_m dt, with the drift gradient taken
analytically when supplied and by centered differences otherwise.  For
state-dependent diffusion an additional grad_sigma dW term enters; for
constant diffusion it drops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet
from .fields import SpaceTimeField, periodic_wrap
from .rng import RngContract

__all__ = [
    "MeshError",
    "FlowSimulationError",
    "TimeMesh",
    "ParticleEnsemble",
    "simulate_flow",
    "flow_compose_check",
    "FlowComposeReport",
    "jacobian_norm_stats",
    "dump_paths",
]

# absolute slack for matching a time to a global mesh node
_ALIGN_TOL = 1e-9


class MeshError(ValueError):
    """A time does not sit on the global mesh, or meshes disagree."""


class FlowSimulationError(FloatingPointError):
    """A particle state became non-finite during integration."""


# ---------------------------------------------------------------------------
# time meshes


@dataclass(frozen=True)
class TimeMesh:
    """A contiguous run of steps on the global uniform mesh over [0, T].

    The global mesh has ``n_global`` steps of size ``dt = T / n_global``;
    this object selects the window ``[i_start, i_end]`` of its nodes.  Every
    mesh used in a run is a restriction of the same global mesh, which is
    what makes the exact flow-composition test possible.

    Attributes:
        T: horizon of the global mesh.
        n_global: number of global steps (so there are n_global + 1 nodes).
        i_start, i_end: node indices with 0 <= i_start <= i_end <= n_global.
    """

    T: float
    n_global: int
    i_start: int = 0
    i_end: int = None

    def __post_init__(self):
        if self.i_end is None:
            object.__setattr__(self, "i_end", self.n_global)
        if not (self.T > 0 and math.isfinite(self.T)):
            raise MeshError("horizon T must be a positive finite number")
        if self.n_global < 1:
            raise MeshError("the global mesh needs at least one step")
        if not (0 <= self.i_start <= self.i_end <= self.n_global):
            raise MeshError(
                f"window [{self.i_start}, {self.i_end}] does not fit inside "
                f"the global mesh [0, {self.n_global}]")

    # -- derived quantities ---------------------------------------------------

    @property
    def dt(self) -> float:
        return self.T / self.n_global

    @property
    def steps(self) -> int:
        return self.i_end - self.i_start

    @property
    def t_start(self) -> float:
        return self.i_start * self.dt

    @property
    def t_end(self) -> float:
        return self.i_end * self.dt

    def times(self) -> np.ndarray:
        """Node times of the window, shape (steps + 1,)."""
        return (np.arange(self.i_start, self.i_end + 1)) * self.dt

    # -- alignment ------------------------------------------------------------

    def index_of(self, t: float) -> int:
        """Global node index of time t; MeshError when t is off-mesh."""
        g = float(t) / self.dt
        i = int(round(g))
        if abs(i * self.dt - t) > _ALIGN_TOL * max(self.T, 1.0):
            raise MeshError(f"time {t!r} is not a node of the global mesh "
                            f"(dt = {self.dt!r})")
        if not (self.i_start <= i <= self.i_end):
            raise MeshError(f"time {t!r} lies outside the mesh window "
                            f"[{self.t_start!r}, {self.t_end!r}]")
        return i

    @classmethod
    def over(cls, T: float, n_global: int, t_start: float = 0.0,
             t_end: float = None) -> "TimeMesh":
        """Window of the global (T, n_global) mesh snapped to [t_start, t_end]."""
        base = cls(T, n_global)
        i0 = base.index_of(t_start)
        i1 = base.index_of(T if t_end is None else t_end)
        if i1 < i0:
            raise MeshError("t_end precedes t_start")
        return cls(T, n_global, i0, i1)

    def split_at(self, t_mid: float):
        """Two sub-windows meeting at t_mid (which must be a node)."""
        i_mid = self.index_of(t_mid)
        return (TimeMesh(self.T, self.n_global, self.i_start, i_mid),
                TimeMesh(self.T, self.n_global, i_mid, self.i_end))


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class ParticleEnsemble:
    """Paths (and optionally variational flows) of N particles on one mesh.

    Positions are stored unwrapped in R^d even on the torus.  Row i is
    particle i; its increments come from the stream (tags, global step).

    Attributes:
        mesh: the time window that was integrated.
        start: (N, d) initial points (positions[:, 0] equals this).
        positions: (N, steps + 1, d) unwrapped path array.
        jacobians: optional (N, steps + 1, d, d), identity at step 0.
        stream_tags: the rng namespace the increments were drawn from.
        master_seed: seed of the RngContract used.
    """

    mesh: TimeMesh
    start: np.ndarray
    positions: np.ndarray
    jacobians: np.ndarray = None
    stream_tags: tuple = ()
    master_seed: int = 0

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        """(N, d) state at t_end (a view, do not mutate)."""
        return self.positions[:, -1]

    def directional(self, v: np.ndarray) -> np.ndarray:
        """(N, steps + 1, d) variational flow applied to direction v."""
        if self.jacobians is None:
            raise ValueError("ensemble was simulated without jacobians")
        v = np.asarray(v, dtype=np.float64)
        return self.jacobians @ v


# ---------------------------------------------------------------------------
# drift normalization


def _as_drift_fn(drift, domain):
    """Normalize a drift spec to `None` or a callable (s, x_raw) -> (B, d).

    Accepts None, a callable of (t, wrapped x), or a SpaceTimeField whose
    `interp` handles wrapping itself.  The returned callable takes unwrapped
    coordinates and performs the torus wrap where needed.
    """
    if drift is None:
        return None
    if isinstance(drift, SpaceTimeField):
        return lambda s, x: drift.interp(s, x)
    if callable(drift):
        if domain.is_torus:
            return lambda s, x: np.asarray(drift(s, periodic_wrap(x)),
                                           dtype=np.float64)
        return lambda s, x: np.asarray(drift(s, x), dtype=np.float64)
    raise TypeError("drift must be None, a callable, or a SpaceTimeField")


def _raise_nonfinite(values: np.ndarray, global_step: int):
    flat = np.isfinite(values).all(axis=tuple(range(1, values.ndim)))
    bad = np.flatnonzero(~flat)
    if bad.size:
        raise FlowSimulationError(
            f"non-finite particle state: particle {int(bad[0])}, "
            f"global step {global_step}")


def _fd_drift_gradient(drift_fn, s: float, x: np.ndarray, h: float
                       ) -> np.ndarray:
    """Centered-difference Jacobian of the drift, (B, d, d), G[b,c,k]=d mu_c/d x_k."""
    B, d = x.shape
    G = np.empty((B, d, d))
    for k in range(d):
        bump = np.zeros(d)
        bump[k] = h
        G[:, :, k] = (drift_fn(s, x + bump) - drift_fn(s, x - bump)) / (2.0 * h)
    return G


def _fd_sigma_gradient(cs: CoefficientSet, t_coef: float, x: np.ndarray,
                       h: float) -> np.ndarray:
    """d sigma_{cl} / d x_k by centered differences, shape (B, d, d, d)."""
    B, d = x.shape
    out = np.empty((B, d, d, d))
    for k in range(d):
        bump = np.zeros(d)
        bump[k] = h
        sp = cs.eval_sigma(t_coef, x + bump)
        sm = cs.eval_sigma(t_coef, x - bump)
        out[:, :, :, k] = (sp - sm) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# the engine


def simulate_flow(cs: CoefficientSet, drift, mesh: TimeMesh, x0, N: int,
                  rng: RngContract, with_jacobian: bool = False, *,
                  tags=("flow",), noise: np.ndarray = None,
                  h_jacobian: float = 1e-4, drift_gradient=None
                  ) -> ParticleEnsemble:
    """Euler-Maruyama integration of N particles over a mesh window.

    One step reads

        X_{m+1} = X_m + drift(s_m, X_m) dt + sqrt(2 a(T - s_m, X_m)) dW_m

    with dW_m = sqrt(dt) z_m and z_m the (N, d) standard-normal block of
    global step i_start + m.  With `with_jacobian` the variational flow is
    propagated as J_{m+1} = J_m + G_m J_m dt where G_m is the drift Jacobian
    (analytic via `drift_gradient` when given, else centered differences with
    step `h_jacobian`); state-dependent diffusion adds the grad-sigma dW term.

    Args:
        cs: coefficient set (diffusion, domain, horizon).
        drift: None, callable (t, x) -> (B, d), or a SpaceTimeField.
        mesh: window of the global mesh to integrate.
        x0: one point (d,) replicated N times, or (N, d) per-particle starts.
        N: particle count.
        rng: randomness contract.
        with_jacobian: also propagate (N, steps + 1, d, d) variational flows.
        tags: stream namespace; identical tags replay identical increments.
        noise: optional precomputed (steps, N, d) standard-normal block that
            overrides the rng (used by negative-control tests).
        h_jacobian: centered-difference step for the drift Jacobian.
        drift_gradient: optional analytic (t, x) -> (B, d, d) Jacobian.

    Returns:
        ParticleEnsemble with full unwrapped paths.

    Raises:
        FlowSimulationError: a particle became non-finite (names particle
            and global step).
        MeshError: mesh inconsistencies.
    """
    d = cs.dim
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        if x0.shape[0] != d:
            raise ValueError(f"start point has dimension {x0.shape[0]}, "
                             f"coefficients have {d}")
        start = np.tile(x0, (N, 1))
    else:
        if x0.shape != (N, d):
            raise ValueError(f"start array must be ({N}, {d}), got {x0.shape}")
        start = x0.astype(np.float64, copy=True)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (mesh.steps, N, d):
            raise ValueError(
                f"noise block must be ({mesh.steps}, {N}, {d}), "
                f"got {noise.shape}")

    drift_fn = _as_drift_fn(drift, cs.domain)
    steps = mesh.steps
    dt = mesh.dt
    sqdt = math.sqrt(dt)
    kappa_id = cs.is_kappa_identity
    const_sigma = cs.has_constant_diffusion
    sigma_scalar = math.sqrt(2.0 * cs.kappa) if kappa_id else None
    sigma_matrix = None if kappa_id or not const_sigma else cs.sigma_constant()

    positions = np.empty((N, steps + 1, d))
    positions[:, 0] = start
    jac = None
    if with_jacobian:
        jac = np.empty((N, steps + 1, d, d))
        jac[:, 0] = np.eye(d)

    x = start.copy()
    _raise_nonfinite(x, mesh.i_start)
    for m in range(steps):
        g = mesh.i_start + m
        s_m = g * dt
        z = noise[m] if noise is not None else rng.step_normals(tags, g, N, d)

        if drift_fn is not None:
            mu = drift_fn(s_m, x)
            _raise_nonfinite(mu, g)
        else:
            mu = None

        if kappa_id:
            noise_term = (sigma_scalar * sqdt) * z
        elif const_sigma:
            noise_term = sqdt * (z @ sigma_matrix.T)
        else:
            sig_b = cs.eval_sigma(cs.T - s_m, x)
            noise_term = sqdt * np.einsum("bcl,bl->bc", sig_b, z)

        if with_jacobian:
            J_m = jac[:, m]
            if drift_fn is None:
                G = None
            elif drift_gradient is not None:
                xw = periodic_wrap(x) if cs.domain.is_torus else x
                G = np.asarray(drift_gradient(s_m, xw), dtype=np.float64)
            else:
                G = _fd_drift_gradient(drift_fn, s_m, x, h_jacobian)
            J_new = J_m if G is None else J_m + dt * (G @ J_m)
            if not const_sigma:
                # dJ gains sum_l (grad sigma_{.l} J) dW_l for state-dependent a
                ds = _fd_sigma_gradient(cs, cs.T - s_m, x, h_jacobian)
                dw = sqdt * z
                J_new = J_new + np.einsum("bclk,bkj,bl->bcj", ds, J_m, dw)
            jac[:, m + 1] = J_new

        if mu is None:
            x = x + noise_term
        else:
            x = (x + mu * dt) + noise_term
        _raise_nonfinite(x, g)
        positions[:, m + 1] = x

    return ParticleEnsemble(mesh=mesh, start=start, positions=positions,
                            jacobians=jac, stream_tags=tuple(tags),
                            master_seed=rng.master_seed)


# ---------------------------------------------------------------------------
# flow composition


@dataclass(frozen=True)
class FlowComposeReport:
    """Outcome of the two-leg versus one-shot comparison."""

    max_abs_discrepancy: float
    exact: bool
    split_time: float
    n_particles: int
    steps: int

    def __str__(self):
        word = "bitwise equal" if self.exact else "DIFFER"
        return (f"flow composition over {self.steps} steps, split at "
                f"t = {self.split_time:g}: {word} "
                f"(max |diff| = {self.max_abs_discrepancy:.3e})")


def flow_compose_check(cs: CoefficientSet, drift, mesh: TimeMesh,
                       split_time: float, x0, rng: RngContract, N: int = 256,
                       *, tags=("flow",), leg_rng: RngContract = None
                       ) -> FlowComposeReport:
    """Compare one-shot simulation of [t, r] against [t, s] then [s, r].

    Both legs draw their increments from the same global-step streams as the
    one-shot pass, so the composed terminal state must match bitwise.  Pass a
    `leg_rng` with a different master seed to break the sharing on purpose
    (negative control: the discrepancy becomes strictly positive).

    Raises:
        MeshError: split_time is not a node of the mesh window.
    """
    mesh_a, mesh_b = mesh.split_at(split_time)
    full = simulate_flow(cs, drift, mesh, x0, N, rng, tags=tags)
    r = rng if leg_rng is None else leg_rng
    leg1 = simulate_flow(cs, drift, mesh_a, x0, N, r, tags=tags)
    leg2 = simulate_flow(cs, drift, mesh_b, leg1.terminal, N, r, tags=tags)
    diff = float(np.max(np.abs(leg2.terminal - full.terminal))) if N else 0.0
    return FlowComposeReport(max_abs_discrepancy=diff, exact=(diff == 0.0),
                             split_time=float(split_time), n_particles=N,
                             steps=mesh.steps)


# ---------------------------------------------------------------------------
# jacobian statistics


def _operator_norms(J: np.ndarray) -> np.ndarray:
    """Spectral norms of a (..., d, d) stack."""
    d = J.shape[-1]
    if d == 1:
        return np.abs(J[..., 0, 0])
    if d == 2:
        # closed form: largest singular value of a 2x2 block
        fro2 = np.einsum("...cl,...cl->...", J, J)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        disc = np.sqrt(np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0))
        return np.sqrt(np.maximum((fro2 + disc) / 2.0, 0.0))
    return np.linalg.svd(J, compute_uv=False)[..., 0]


def jacobian_norm_stats(ensemble: ParticleEnsemble, j: int = 1):
    """Monte Carlo estimate of E[ sup_steps ||J||^j ] with standard error.

    Args:
        ensemble: must carry jacobians.
        j: moment order (j >= 1).

    Returns:
        MCEstimate over the particle ensemble.
    """
    if ensemble.jacobians is None:
        raise ValueError("ensemble was simulated without jacobians")
    if j < 1:
        raise ValueError("moment order must be >= 1")
    from .feynman_kac import MCEstimate

    norms = _operator_norms(ensemble.jacobians)
    sup = norms.max(axis=1) ** j
    return MCEstimate.from_samples(sup)


# ---------------------------------------------------------------------------
# optional path dump


def dump_paths(ensemble: ParticleEnsemble, path: str):
    """Write the ensemble paths as CSV rows `particle,step,s,x1..xd`."""
    times = ensemble.mesh.times()
    d = ensemble.dim
    with open(path, "w", encoding="ascii") as fh:
        fh.write("particle,step,s," +
                 ",".join(f"x{k + 1}" for k in range(d)) + "\n")
        for i in range(ensemble.n_particles):
            for m, s in enumerate(times):
                row = ensemble.positions[i, m]
                fh.write(f"{i},{m},{format(s, '.17g')}," +
                         ",".join(format(v, ".17g") for v in row) + "\n")
