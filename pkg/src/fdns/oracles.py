"""Deterministic reference solutions: Cole-Hopf, spectral mild solver, Taylor-Green.

These are the independent yardsticks the Monte Carlo pipeline is validated
against. They share no code with the particle engine beyond the field
containers: Cole-Hopf linearizes the 1-d problem exactly, the mild solver is
a Fourier-collocation Duhamel fixed point, and Taylor-Green is closed form.

All of them work on the unit torus. Spectral evaluations are exact in time
(heat multipliers are applied analytically), so residual checks can use
centered time differences with arbitrarily small offsets.
"""

from __future__ import annotations

import numpy as np

from .fields import (
    DomainDescriptor,
    SpaceTimeField,
    grid_nodes,
    gradient_values,
    laplacian_values,
)

__all__ = [
    "cole_hopf_oracle",
    "mild_oracle",
    "taylor_green_u",
    "taylor_green_pressure",
    "taylor_green_force",
    "taylor_green_field",
    "heat_sine",
    "substitution_residual",
]

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# Cole-Hopf (d = 1)


def cole_hopf_oracle(u0, kappa: float, T: float, n: int, M: int,
                     n_spec: int | None = None):
    """Solve the 1-d viscous advection equation u_t + u u_x = kappa u_xx.

    The Cole-Hopf substitution phi = exp(-(2 kappa)^-1 antideriv(u0)) turns
    the problem into the heat equation, which is solved exactly mode by mode;
    u is recovered as -2 kappa phi_x / phi. Everything happens on a spectral
    grid at least four times finer than the output grid.

    Args:
        u0: callable, u0(x) for x of shape (B, 1) -> (B,) or (B, 1). Must
            have zero mean on the torus (checked; ValueError otherwise).
        kappa: viscosity, > 0.
        T: time horizon.
        n: output grid points.
        M: output time intervals (rows at j*T/M).
        n_spec: spectral grid size, default max(4*n, 256).

    Returns:
        (field, info): field is an (M+1, n, 1) SpaceTimeField; info carries
        'phi0' (initial heat-equation data on the spectral grid), 'x_spec',
        'n_spec' and 'sample', a callable t -> (n, 1) values on the output
        grid that is exact in t (not limited to the M+1 rows).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    n_spec = max(4 * n, 256) if n_spec is None else n_spec
    if n_spec % n:
        raise ValueError("spectral grid must be a multiple of the output grid")
    dom = DomainDescriptor.torus(1)
    xs = grid_nodes(dom, n_spec)
    vals0 = np.asarray(u0(xs), dtype=np.float64).reshape(-1)
    if vals0.shape[0] != n_spec:
        raise ValueError("u0 must return one value per node")

    u0_hat = np.fft.rfft(vals0)
    mean = u0_hat[0].real / n_spec
    if abs(mean) > 1e-12 * max(1.0, np.abs(vals0).max()):
        raise ValueError(f"u0 must have zero mean on the torus, got {mean:.3e}")

    k = np.arange(u0_hat.size, dtype=np.float64)
    # mean-zero antiderivative of u0, spectrally: divide by 2*pi*i*k
    anti = np.zeros_like(u0_hat)
    anti[1:] = u0_hat[1:] / (TWO_PI * 1j * k[1:])
    psi = np.fft.irfft(anti, n_spec) * (-1.0 / (2.0 * kappa))
    phi0 = np.exp(psi)
    phi0_hat = np.fft.rfft(phi0)
    decay = 4.0 * np.pi ** 2 * kappa * k ** 2

    stride = n_spec // n

    def sample(t: float) -> np.ndarray:
        mult = np.exp(-decay * t)
        phi_hat = phi0_hat * mult
        dphi_hat = phi_hat * (TWO_PI * 1j * k)
        phi = np.fft.irfft(phi_hat, n_spec)
        dphi = np.fft.irfft(dphi_hat, n_spec)
        u = -2.0 * kappa * dphi / phi
        return u[::stride, None].copy()

    times = np.linspace(0.0, T, M + 1)
    values = np.stack([sample(float(t)) for t in times], axis=0)
    field = SpaceTimeField(dom, times, n, values)
    info = {
        "phi0": phi0,
        "x_spec": xs[:, 0],
        "n_spec": n_spec,
        "sample": sample,
    }
    return field, info


# ---------------------------------------------------------------------------
# spectral mild (Duhamel) fixed point, d in {1, 2, 3}


def _wavenumbers(n: int, d: int):
    """Integer wavenumber arrays broadcastable over the rfftn spectrum."""
    full = np.fft.fftfreq(n) * n
    half = np.fft.rfftfreq(n) * n
    ks = []
    for ax in range(d):
        base = half if ax == d - 1 else full
        shape = [1] * d
        shape[ax] = base.size
        ks.append(base.reshape(shape))
    return ks


def mild_oracle(u0, kappa: float, T: float, n: int, M: int, d: int = 1,
                V=None, tol: float = 1e-6, max_iter: int = 200,
                dealias: bool = True):
    """Fixed point of the Duhamel (mild) formulation on a Fourier grid.

    Iterates u <- heat(u0) + int_0^t heat(t-r) [ -(u . grad) u + V_r ] dr
    with the heat semigroup applied exactly in Fourier space and the time
    integral by an incremental trapezoid rule (algebraically identical to
    the global trapezoid rule on the row grid). Products are pseudo-spectral
    with a 2/3 dealiasing mask.

    Args:
        u0: callable nodes (B, d) -> (B,) or (B, c) with c = d (c = 1 if d = 1).
        kappa, T: viscosity and horizon.
        n, M: collocation grid (n per axis, M time intervals).
        d: spatial dimension.
        V: optional forcing, callable (t, nodes) -> (B, c).
        tol: sup-norm change between sweeps to declare convergence (1e-6).
        max_iter: sweep cap (200).

    Returns:
        (field, info) with info = {'iterations', 'gap', 'converged'}.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    dom = DomainDescriptor.torus(d)
    nodes = grid_nodes(dom, n)
    mesh_shape = (n,) * d
    axes = tuple(range(d))

    vals0 = np.asarray(u0(nodes), dtype=np.float64)
    if vals0.ndim == 1:
        vals0 = vals0[:, None]
    c = vals0.shape[1]
    u0_mesh = vals0.reshape(mesh_shape + (c,))

    ks = _wavenumbers(n, d)
    k2 = sum(np.square(kk) for kk in ks)
    lam = 4.0 * np.pi ** 2 * kappa
    dt = T / M
    step_mult = np.exp(-lam * k2 * dt)[..., None]
    if dealias:
        mask = np.ones_like(k2, dtype=bool)
        for kk in ks:
            mask &= np.abs(kk) <= n / 3.0
        mask = mask[..., None]
    else:
        mask = None

    def to_hat(phys):
        h = np.fft.rfftn(phys, axes=axes)
        if mask is not None:
            h = np.where(mask, h, 0.0)
        return h

    def to_phys(hat):
        return np.fft.irfftn(hat, s=mesh_shape, axes=axes)

    u0_hat = to_hat(u0_mesh)

    times = np.linspace(0.0, T, M + 1)
    if V is not None:
        V_mesh = np.empty((M + 1,) + mesh_shape + (c,))
        for m, t in enumerate(times):
            vm = np.asarray(V(float(t), nodes), dtype=np.float64)
            V_mesh[m] = (vm[:, None] if vm.ndim == 1 else vm).reshape(
                mesh_shape + (c,))
    else:
        V_mesh = None

    # initial sweep: pure heat flow of u0
    u_hat = np.empty((M + 1,) + u0_hat.shape, dtype=complex)
    for m, t in enumerate(times):
        u_hat[m] = u0_hat * np.exp(-lam * k2 * t)[..., None]

    info = {"iterations": 0, "gap": np.inf, "converged": False}
    u_phys = np.stack([to_phys(u_hat[m]) for m in range(M + 1)])
    for sweep in range(1, max_iter + 1):
        # nonlinearity + forcing at every row, in spectral space
        F_hat = np.empty_like(u_hat)
        for m in range(M + 1):
            um = u_phys[m]
            adv = np.zeros_like(um)
            for j in range(d):
                dju = to_phys(u_hat[m] * (TWO_PI * 1j * ks[j])[..., None])
                adv += um[..., j:j + 1] * dju
            F = -adv
            if V_mesh is not None:
                F = F + V_mesh[m]
            F_hat[m] = to_hat(F)

        new_hat = np.empty_like(u_hat)
        new_hat[0] = u0_hat
        half = 0.5 * dt
        for m in range(M):
            new_hat[m + 1] = (step_mult * (new_hat[m] + half * F_hat[m])
                              + half * F_hat[m + 1])

        new_phys = np.stack([to_phys(new_hat[m]) for m in range(M + 1)])
        gap = float(np.max(np.abs(new_phys - u_phys)))
        u_hat, u_phys = new_hat, new_phys
        info["iterations"] = sweep
        info["gap"] = gap
        if gap <= tol:
            info["converged"] = True
            break

    values = u_phys.reshape(M + 1, n ** d, c)
    field = SpaceTimeField(dom, times, n, values)
    return field, info


# ---------------------------------------------------------------------------
# Taylor-Green on the unit torus (period 1), d = 2


def taylor_green_u(A: float, kappa: float):
    """Velocity (t, nodes (B,2)) -> (B,2) of the decaying Taylor-Green vortex."""

    def u(t, x):
        x = np.atleast_2d(x)
        e = A * np.exp(-8.0 * np.pi ** 2 * kappa * t)
        cx, sx = np.cos(TWO_PI * x[:, 0]), np.sin(TWO_PI * x[:, 0])
        cy, sy = np.cos(TWO_PI * x[:, 1]), np.sin(TWO_PI * x[:, 1])
        return np.stack([e * cx * sy, -e * sx * cy], axis=-1)

    return u


def taylor_green_pressure(A: float, kappa: float):
    """Pressure (t, nodes) -> (B,) matching `taylor_green_u`."""

    def p(t, x):
        x = np.atleast_2d(x)
        e = np.exp(-16.0 * np.pi ** 2 * kappa * t)
        return -(A ** 2 / 4.0) * e * (np.cos(2.0 * TWO_PI * x[:, 0])
                                      + np.cos(2.0 * TWO_PI * x[:, 1]))

    return p


def taylor_green_force(A: float, kappa: float):
    """Negative pressure gradient (t, nodes) -> (B,2): V = -grad p."""

    def V(t, x):
        x = np.atleast_2d(x)
        e = np.pi * A ** 2 * np.exp(-16.0 * np.pi ** 2 * kappa * t)
        return np.stack([-e * np.sin(2.0 * TWO_PI * x[:, 0]),
                         -e * np.sin(2.0 * TWO_PI * x[:, 1])], axis=-1)

    return V


def taylor_green_field(A: float, kappa: float, T: float, n: int, M: int
                       ) -> SpaceTimeField:
    """Rasterized exact Taylor-Green velocity on an (M+1, n^2, 2) grid."""
    dom = DomainDescriptor.torus(2)
    times = np.linspace(0.0, T, M + 1)
    return SpaceTimeField.from_callable(dom, times, n, taylor_green_u(A, kappa))


def heat_sine(A: float, kappa: float):
    """Exact heat decay of A sin(2 pi x) in d = 1: (t, nodes) -> (B, 1)."""

    def u(t, x):
        x = np.atleast_2d(x)
        return (A * np.exp(-4.0 * np.pi ** 2 * kappa * t)
                * np.sin(TWO_PI * x[:, 0]))[:, None]

    return u


# ---------------------------------------------------------------------------
# finite-difference substitution gate


def substitution_residual(u_at, kappa: float, domain: DomainDescriptor, n: int,
                          ts, force_at=None, dt_fd: float = 1e-4,
                          order: int = 2) -> float:
    """Max residual of du/dt + (u.grad)u - kappa lap(u) - V over grid nodes.

    A cheap sign-and-scaling gate: substituting a correct solution must leave
    a residual at the stencil truncation level, while a wrong sign or factor
    shows up at the size of the field itself.

    Args:
        u_at: callable t -> (n**d, c) values on the grid (must accept any t
            in a small neighborhood of the requested ones; analytic/spectral
            evaluators do).
        kappa: viscosity.
        domain, n: evaluation grid.
        ts: iterable of evaluation times.
        force_at: optional callable t -> (n**d, c) for the forcing V.
        dt_fd: half-width of the centered time difference.
        order: spatial stencil order, 2 or 4.

    Returns:
        Max absolute residual component over all nodes and requested times.
    """
    worst = 0.0
    for t in ts:
        t = float(t)
        um = u_at(t)[None]  # (1, n**d, c)
        dudt = (u_at(t + dt_fd) - u_at(t - dt_fd)) / (2.0 * dt_fd)
        grad = gradient_values(um, domain, n, order=order)[0]  # (n**d, d, c)
        lap = laplacian_values(um, domain, n, order=order)[0]
        adv = np.einsum("bj,bjc->bc", um[0][:, :domain.dim], grad) \
            if um.shape[2] == domain.dim else um[0] * grad[:, 0, :]
        res = dudt + adv - kappa * lap
        if force_at is not None:
            res = res - force_at(t)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst
