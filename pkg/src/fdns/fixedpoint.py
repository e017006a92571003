"""Picard iteration on the drift field induced by the particle flow.

One iteration freezes the current drift field, simulates N particles from
every (time node, grid node) pair of the coarse mesh, and re-assembles

    b~_{t_m}(x) = b_{T - t_m}(x) - E[u0(X_{t_m,T}^x)]
                  - E[ int_{t_m}^T V_{T-r}(X_{t_m,r}^x) dr ]

from the ensemble means.  The map runs under common random numbers: every
iteration replays the identical increment streams, so successive gaps
measure the contraction of the map itself and the trivial presets contract
to exactly zero.

On the torus the terminal term is estimated with a control variate: the
driftless flow under the same increments, whose u0-mean is the heat
semigroup (an exact Fourier multiplier).  The diffusion phase is common to
both flows and cancels in the difference, leaving only the drift-induced
part of the variance; error bars and batch means refer to the corrected
estimator.

The initial iterate is already one application of the map, taken over the
zero-drift (pure noise) flow.

All heavy lifting happens in the `_kernels` backend (compiled when
available); node chunks can be fanned out over a thread pool without
changing a single byte of the output, because nodes are independent and the
accumulation order inside a node is fixed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from ._kernels import em_run, welford_batches
from .coefficients import CoefficientSet, sqrt_2a
from .config import RunConfig
from .fields import SpaceTimeField, grid_nodes
from .rng import RngContract

__all__ = [
    "DriftFunctional",
    "CANONICAL_FUNCTIONAL",
    "AssembleOutput",
    "PicardState",
    "PicardResult",
    "assemble_drift",
    "picard_solve",
    "fixed_point_residual",
    "contraction_report",
    "ContractionReport",
]

CONVERGED = "Converged"
MAX_ITERATIONS = "MaxIterations"
DIVERGED = "Diverged"

# node chunks aim for about this many particle rows per kernel call
_TARGET_CHUNK_ROWS = 262144


# ---------------------------------------------------------------------------
# the drift functional


class DriftFunctional:
    """Rule turning flow statistics into a drift row.

    The canonical rule subtracts the expectation functional from the base
    drift; subclasses may override `row` for generalized couplings.  Every
    evaluation must stay bounded by sup|b| + sup|u0| + int sup|V| (checked
    statistically by the solver diagnostics, not enforced per call).
    """

    def row(self, t_m: float, base: np.ndarray,
            mean_functional: np.ndarray) -> np.ndarray:
        """New drift values at one time row.

        Args:
            t_m: flow time of the row.
            base: (G, d) values of b_{T - t_m} on the grid (zeros if none).
            mean_functional: (G, d) ensemble mean of the per-particle
                functional, u0 at the terminal state plus the forcing
                integral along the path.
        """
        return base - mean_functional


CANONICAL_FUNCTIONAL = DriftFunctional()


# ---------------------------------------------------------------------------
# one assembly pass


@dataclass
class AssembleOutput:
    """Result of one application of the drift map.

    Attributes:
        drift: (M + 1, G, d) new drift rows.
        node_se: per-node standard error of the expectation functional.
        max_node_se: max over nodes/components of node_se.
        batch_means: (M + 1, G, n_batches, d) per-batch means of the
            expectation functional (inputs for jackknife error bars).
    """

    drift: np.ndarray
    node_se: np.ndarray
    max_node_se: float
    batch_means: np.ndarray


def _sigma_kernel_args(cs: CoefficientSet, dt: float):
    """Pre-scaled diffusion inputs for the kernel: scalar or matrix form."""
    if cs.is_kappa_identity:
        return math.sqrt(2.0 * cs.kappa) * math.sqrt(dt), None
    if cs.a_matrix is not None:
        # scalar slot is ignored by both kernels when a matrix is given
        return 0.0, sqrt_2a(cs.a_matrix) * math.sqrt(dt)
    raise ValueError(
        "the fixed-point solver requires constant diffusion (kappa or a "
        "constant matrix); state-dependent a is only supported by the "
        "generic path engine")


def _rasterize_forcing(cs: CoefficientSet, n_global: int, dt: float,
                       nv: int):
    """Forcing values V_{T - s_j} on the refined grid for every global step.

    Returns (n_global + 1, nv**d, d) or None when the set has no forcing.
    """
    if cs.V is None:
        return None
    nodes = grid_nodes(cs.domain, nv)
    out = np.empty((n_global + 1, nodes.shape[0], cs.dim))
    for j in range(n_global + 1):
        out[j] = cs.eval_V(cs.T - j * dt, nodes)
    return out


def _base_drift_rows(cs: CoefficientSet, times: np.ndarray,
                     nodes: np.ndarray) -> np.ndarray:
    """b_{T - t_m} on the grid for every coarse row; zeros when b is None."""
    G, d = nodes.shape
    out = np.zeros((times.size, G, d))
    if cs.b is not None:
        for m, t_m in enumerate(times):
            out[m] = cs.eval_b(cs.T - t_m, nodes)
    return out


def _semigroup_rows(cs: CoefficientSet, times: np.ndarray,
                    nodes: np.ndarray, n: int) -> np.ndarray:
    """E u0(x + G_m) on the grid, G_m the zero-drift displacement of row m.

    Over the window [t_m, T] the driftless flow is x plus a Gaussian with
    covariance 2a(T - t_m), so its u0-mean is the heat semigroup acting on
    u0; on the torus that is an exact Fourier multiplier.  Evaluated as
    u0 + iFFT[(mult - 1) FFT u0] so the k = 0 mode and the tau = 0 row are
    untouched bits: constant data and the terminal row keep exact values.
    """
    d = cs.dim
    G = nodes.shape[0]
    u0g = cs.eval_u0(nodes)
    if np.all(u0g == u0g[:1]):
        # constant data: the semigroup is the identity, and going through
        # the FFT would leak O(eps) into the nonzero modes and break the
        # exact-constant contract of the trivial presets
        return np.broadcast_to(u0g, (times.size, G, d)).copy()
    axes = tuple(range(d))
    omega = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    grids = np.meshgrid(*([omega] * d), indexing="ij")
    if cs.is_kappa_identity:
        quad = cs.kappa * sum(g * g for g in grids)
    else:
        a = cs.a_matrix
        quad = sum(a[i, j] * grids[i] * grids[j]
                   for i in range(d) for j in range(d))
    u0hat = np.fft.fftn(u0g.reshape((n,) * d + (d,)), axes=axes)
    out = np.empty((times.size, G, d))
    for m, t_m in enumerate(times):
        mult = np.exp(-(cs.T - t_m) * quad) - 1.0
        corr = np.fft.ifftn(u0hat * mult[..., None], axes=axes).real
        out[m] = u0g + corr.reshape(G, d)
    return out


def _row_noise(rng: RngContract, stream: str, m: int, i0: int, N: int,
               d: int, steps: int) -> np.ndarray:
    """Increment blocks for start row m: one (N, d) block per global step.

    The purpose tuple carries the start row, so distinct rows use
    independent streams; inside a row the block of global step j is always
    the same, which is what makes composition and re-assembly exact.
    """
    noise = np.empty((steps, N, d))
    for k in range(steps):
        noise[k] = rng.step_normals((stream, m), i0 + k, N, d)
    return noise


def assemble_drift(cs: CoefficientSet, cfg: RunConfig,
                   drift_values: np.ndarray, rng: RngContract, *,
                   threads: int = 1,
                   functional: DriftFunctional = CANONICAL_FUNCTIONAL,
                   stream: str = "picard") -> AssembleOutput:
    """Apply the drift map once: simulate under `drift_values`, re-assemble.

    Args:
        cs: coefficient set (torus domain, constant diffusion).
        cfg: run geometry (grid, particles, batches).
        drift_values: (M + 1, n**d, d) frozen drift rows, or None for the
            zero-drift flow (the initial iterate).
        rng: stream contract; iteration-independent tags give CRN.
        threads: node-chunk fan-out; any value returns identical bytes.
        functional: drift assembly rule (canonical: b - E[u0] - E[int V]).
        stream: noise namespace; the solver uses "picard" for every sweep
            (common random numbers), independent passes pick another name.

    Returns:
        AssembleOutput with the new rows and their error statistics.
    """
    d = cs.dim
    n, M, N = cfg.grid_n, cfg.grid_M, cfg.particles
    n_global = cfg.n_global
    dt = cfg.dt
    sub = n_global // M
    nv = cfg.v_refine * n
    nb = cfg.batches

    nodes = grid_nodes(cs.domain, n)
    G = nodes.shape[0]
    times = np.arange(M + 1) * (sub * dt)
    sigma_sqdt, sigma_mat = _sigma_kernel_args(cs, dt)
    v_slab = _rasterize_forcing(cs, n_global, dt, nv)
    base = _base_drift_rows(cs, times, nodes)
    # control variate: the driftless flow under the same increments has a
    # spectrally exact u0-mean, and shares the diffusion phase with the
    # drifted flow, so subtracting it removes most of the terminal-term
    # variance (the dominant noise source at solver scale)
    semigroup = _semigroup_rows(cs, times, nodes, n) if cs.domain.is_torus \
        else None

    if drift_values is not None:
        drift_values = np.ascontiguousarray(drift_values, dtype=np.float64)
        if drift_values.shape != (M + 1, G, d):
            raise ValueError(
                f"drift rows must be ({M + 1}, {G}, {d}), "
                f"got {drift_values.shape}")

    new_drift = np.empty((M + 1, G, d))
    node_se = np.empty((M + 1, G, d))
    batch_means = np.empty((M + 1, G, nb, d))

    chunk_nodes = max(1, min(G, _TARGET_CHUNK_ROWS // N or 1))
    chunk_bounds = [(g0, min(g0 + chunk_nodes, G))
                    for g0 in range(0, G, chunk_nodes)]

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for m in range(M + 1):
            i0 = m * sub
            steps = n_global - i0
            noise = _row_noise(rng, stream, m, i0, N, d, steps)
            v_window = None if v_slab is None else v_slab[i0:]
            if semigroup is None:
                disp = None
            elif sigma_mat is None:
                disp = sigma_sqdt * noise.sum(axis=0)
            else:
                disp = noise.sum(axis=0) @ sigma_mat.T

            def work(bounds, m=m, i0=i0, steps=steps, noise=noise,
                     v_window=v_window, disp=disp):
                g0, g1 = bounds
                x = np.repeat(nodes[g0:g1], N, axis=0)
                vint = (np.zeros((x.shape[0], d)) if v_window is None
                        else np.empty((x.shape[0], d)))
                em_run(x, drift_values, n, dt, sub, i0, noise,
                       sigma_sqdt, sigma_mat,
                       v_window, nv, None if v_window is None else vint,
                       None)
                samples = cs.eval_u0(x)
                if v_window is not None:
                    samples = samples + vint
                if disp is not None:
                    x0 = nodes[g0:g1, None, :] + disp[None, :, :]
                    x0 -= np.floor(x0)
                    samples = samples - cs.eval_u0(x0.reshape(-1, d))
                y = np.ascontiguousarray(
                    samples.reshape(g1 - g0, N, d))
                mean, m2, bm = welford_batches(y, nb)
                if disp is not None:
                    mean = mean + semigroup[m, g0:g1]
                    bm = bm + semigroup[m, g0:g1][None]
                new_drift[m, g0:g1] = functional.row(
                    times[m], base[m, g0:g1], mean)
                node_se[m, g0:g1] = np.sqrt(m2 / (N * (N - 1.0)))
                batch_means[m, g0:g1] = np.moveaxis(bm, 0, 1)

            if pool is None:
                for bounds in chunk_bounds:
                    work(bounds)
            else:
                list(pool.map(work, chunk_bounds))
    finally:
        if pool is not None:
            pool.shutdown()

    return AssembleOutput(drift=new_drift, node_se=node_se,
                          max_node_se=float(node_se.max()),
                          batch_means=batch_means)


# ---------------------------------------------------------------------------
# iteration bookkeeping


@dataclass
class PicardState:
    """History of one Picard run.

    Attributes:
        k: index of the accepted iterate (0 = the initial assembly).
        gaps: sup-norm gaps |u^k - u^{k-1}| per iteration (k = 1, 2, ...).
        weighted_gaps: per lambda, the exp(-lambda (T - t)) weighted gaps.
        se_history: max node SE of each assembly (k = 0 included).
        drift_sup: sup-norm of each iterate (k = 0 included).
        verdict: Converged | MaxIterations | Diverged.
        bound: analytic drift bound sup|b| + sup|u0| + int sup|V| + tol,
            when the coefficient set carries the analytic sups (else None).
    """

    k: int = 0
    gaps: list = dataclass_field(default_factory=list)
    weighted_gaps: dict = dataclass_field(default_factory=dict)
    se_history: list = dataclass_field(default_factory=list)
    drift_sup: list = dataclass_field(default_factory=list)
    verdict: str = MAX_ITERATIONS
    bound: float = None

    def trace_rows(self):
        """Per-iteration tuples (k, gap, *weighted, max_node_se) for CSV."""
        lams = sorted(self.weighted_gaps)
        rows = []
        for i, g in enumerate(self.gaps):
            rows.append((i + 1, g,
                         *[self.weighted_gaps[lam][i] for lam in lams],
                         self.se_history[i + 1]))
        return rows


@dataclass
class PicardResult:
    """Converged (or stopped) drift field plus run diagnostics."""

    state: PicardState
    drift_field: SpaceTimeField
    drift_values: np.ndarray
    node_se: np.ndarray
    batch_means: np.ndarray
    config: RunConfig


def _row_gaps(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-time-row sup of the Euclidean node difference, shape (M + 1,)."""
    diff = a - b
    norms = np.sqrt(np.einsum("mgc,mgc->mg", diff, diff))
    return norms.max(axis=1)


def picard_solve(cs: CoefficientSet, cfg: RunConfig, rng: RngContract = None,
                 *, threads: int = 1,
                 functional: DriftFunctional = CANONICAL_FUNCTIONAL,
                 progress=None) -> PicardResult:
    """Iterate the drift map to a fixed point.

    u^0 is the map applied to the zero-drift flow; afterwards
    u^{k+1} = (1 - theta) u^k + theta Phi(u^k) with damping theta from the
    config.  Iteration stops when the sup-norm gap drops to tol
    (Converged), after max_iter updates (MaxIterations), or as soon as a
    gap exceeds ten times the first gap (Diverged).

    Args:
        cs: coefficients; must live on the torus with constant diffusion.
        cfg: run configuration (geometry, particles, tolerances).
        rng: stream contract (defaults to one keyed by cfg.seed).
        threads: node-chunk fan-out inside each assembly.
        functional: drift assembly rule.
        progress: optional callable(k, gap, se) invoked per iteration.

    Returns:
        PicardResult; `state.verdict` tells how the run ended.
    """
    if not cs.domain.is_torus:
        raise ValueError("the fixed-point solver runs on the torus only")
    if cs.a_fn is not None:
        raise ValueError(
            "the fixed-point solver requires constant diffusion (kappa or a "
            "constant matrix); state-dependent a is only supported by the "
            "generic path engine")
    if cs.dim != cfg.dimension:
        raise ValueError(f"coefficients have dimension {cs.dim}, "
                         f"config says {cfg.dimension}")
    if rng is None:
        rng = RngContract(cfg.seed)

    theta = cfg.damping
    lambdas = tuple(cfg.lambdas)
    sub = cfg.n_global // cfg.grid_M
    times = np.arange(cfg.grid_M + 1) * (sub * cfg.dt)
    weights = {lam: np.exp(-lam * (cs.T - times)) for lam in lambdas}

    state = PicardState(weighted_gaps={lam: [] for lam in lambdas},
                        bound=_analytic_bound(cs, cfg.tol))

    out = assemble_drift(cs, cfg, None, rng, threads=threads,
                         functional=functional)
    current = out.drift
    state.se_history.append(out.max_node_se)
    state.drift_sup.append(_sup_norm(current))

    verdict = MAX_ITERATIONS
    first_gap = None
    for k in range(1, cfg.max_iter + 1):
        out = assemble_drift(cs, cfg, current, rng, threads=threads,
                             functional=functional)
        proposed = out.drift if theta == 1.0 else (
            (1.0 - theta) * current + theta * out.drift)
        row_gaps = _row_gaps(proposed, current)
        gap = float(row_gaps.max())
        state.k = k
        state.gaps.append(gap)
        for lam in lambdas:
            state.weighted_gaps[lam].append(
                float((weights[lam] * row_gaps).max()))
        state.se_history.append(out.max_node_se)
        state.drift_sup.append(_sup_norm(proposed))
        current = proposed
        if progress is not None:
            progress(k, gap, out.max_node_se)
        if first_gap is None:
            first_gap = gap
        if gap <= cfg.tol:
            verdict = CONVERGED
            break
        if gap > 10.0 * first_gap:
            verdict = DIVERGED
            break
    state.verdict = verdict

    field = SpaceTimeField(cs.domain, times, cfg.grid_n, current)
    return PicardResult(state=state, drift_field=field, drift_values=current,
                        node_se=out.node_se, batch_means=out.batch_means,
                        config=cfg)


def _sup_norm(values: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("mgc,mgc->mg", values, values)).max())


def _analytic_bound(cs: CoefficientSet, tol: float):
    if cs.sup_u0 is None:
        return None
    total = cs.sup_u0 + tol
    total += cs.sup_b or 0.0
    total += cs.int_sup_V or 0.0
    return float(total)


def fixed_point_residual(cs: CoefficientSet, cfg: RunConfig,
                         result: PicardResult, rng: RngContract = None, *,
                         threads: int = 1) -> dict:
    """One extra application of the map at the accepted iterate.

    Returns a dict with the sup-norm residual |Phi(u) - u|, the max node SE
    of the extra assembly, and the acceptance slack tol + 4 SE.  Under the
    contraction the residual of a converged run sits below the slack.
    """
    if rng is None:
        rng = RngContract(cfg.seed)
    out = assemble_drift(cs, cfg, result.drift_values, rng, threads=threads)
    residual = float(_row_gaps(out.drift, result.drift_values).max())
    return {
        "residual": residual,
        "max_node_se": out.max_node_se,
        "allowance": cfg.tol + 4.0 * out.max_node_se,
        "ok": residual <= cfg.tol + 4.0 * out.max_node_se,
    }


# ---------------------------------------------------------------------------
# contraction diagnostics


@dataclass(frozen=True)
class ContractionReport:
    """Weighted gap sequences and their ratios, one row set per lambda."""

    lambdas: tuple
    gaps: dict        # lambda -> tuple of weighted gaps (k = 1, ...)
    ratios: dict      # lambda -> tuple of gap_{k+1} / gap_k (nan when 0/0)

    def rows(self):
        out = []
        for lam in self.lambdas:
            g = self.gaps[lam]
            r = self.ratios[lam]
            for i, gv in enumerate(g):
                out.append((lam, i + 1, gv,
                            r[i - 1] if i >= 1 else float("nan")))
        return out


def contraction_report(state: PicardState, lambdas=None) -> ContractionReport:
    """Ratio table of the weighted gap sequences of a finished run.

    Ratios divide successive weighted gaps; a zero denominator yields nan
    (trivial runs converge with a single zero gap and have no ratios).
    """
    if lambdas is None:
        lambdas = sorted(state.weighted_gaps)
    gaps, ratios = {}, {}
    for lam in lambdas:
        if lam not in state.weighted_gaps:
            raise KeyError(f"lambda {lam} was not tracked during the solve")
        g = tuple(state.weighted_gaps[lam])
        r = []
        for a, b in zip(g, g[1:]):
            r.append(b / a if a > 0 else float("nan"))
        gaps[lam] = g
        ratios[lam] = tuple(r)
    return ContractionReport(lambdas=tuple(lambdas), gaps=gaps, ratios=ratios)
