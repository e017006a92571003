"""Pure-numpy particle kernels: the reference semantics for the compiled core.

Every floating-point operation here is ordered deliberately; the compiled
extension replicates the exact expression trees (and is built with FMA
contraction disabled), so both backends produce byte-identical outputs.
If you change an expression here, change `_flowkern.pyx` to match.

Kernel contract
---------------
``em_run`` advances B particles through Euler-Maruyama steps on the global
mesh, with positions kept unwrapped (wrapping happens only inside grid
interpolation). Per global step j:

    slice  = (drift[k] + w * (drift[k+1] - drift[k])) * dt  (k, w from j)
    x      = (x + interp(slice, x)) + noise_term
    noise_term = sigma_sqdt * z           (scalar diffusion)
               = sum_l sigma_mat[c, l] * z[l]   (constant matrix, unrolled)

Interpolation is the nested-lerp tree of `fields.interp_torus`
(``a + f * (b - a)`` per axis, axis 0 innermost), which reproduces constant
fields bitwise and never leaves the stencil's min/max range. The time blend
above uses the same lerp form for the same reason.

where z is row (b mod N_noise) of the step's standard-normal block. The
optional forcing integral accumulates interp(v[m], x at node m) over every
visited node m in ascending order (the pre-update position, so node m pairs
with forcing row m) and applies trapezoid end-corrections once at the end:

    vint = (sum_nodes - 0.5 * (first + last)) * dt

``welford_batches`` reduces per-node sample blocks to (mean, M2, batch
means) with per-batch Welford recursion merged in fixed batch order; for
constant samples this yields the exact constant and exactly zero M2.
"""

from __future__ import annotations

import numpy as np

from ..fields import interp_torus

__all__ = ["em_run", "welford_batches"]


def em_run(x, drift, n, dt, sub, i0, noise, sigma_sqdt, sigma_mat,
           v_vals, nv, vint_out, store):
    """Advance particles in place; see module docstring for semantics.

    Args:
        x: (B, d) float64, modified in place; holds terminal positions on exit.
        drift: (Mf+1, n**d, d) drift grid values or None for zero drift.
        n: drift grid points per axis.
        dt: global mesh step.
        sub: global steps per drift-field time interval.
        i0: first global step index.
        noise: (steps, N_noise, d) standard normals; particle b reads row
            b mod N_noise.
        sigma_sqdt: scalar sqrt(2 kappa)*sqrt(dt); ignored if sigma_mat given.
        sigma_mat: (d, d) constant sqrt(2a)*sqrt(dt) or None.
        v_vals: (steps+1, nv**d, d) forcing at the step times or None.
        nv: forcing grid points per axis.
        vint_out: (B, d) output for the forcing trapezoid, or None.
        store: (B, steps+1, d) position store including the start row, or None.

    Raises:
        FloatingPointError naming particle and step if a state goes non-finite
        while grid lookups are still pending.
    """
    x = np.asarray(x)
    B, d = x.shape
    steps = noise.shape[0]
    n_noise = noise.shape[1]
    has_drift = drift is not None
    has_v = v_vals is not None

    idx = None
    if n_noise != B:
        idx = np.arange(B) % n_noise

    if store is not None:
        store[:, 0, :] = x

    def _check_finite(j):
        bad = ~np.isfinite(x)
        if bad.any():
            b = int(np.nonzero(bad.any(axis=1))[0][0])
            raise FloatingPointError(
                f"non-finite particle state: particle {b}, global step {j}")

    if has_v:
        _check_finite(i0)
        acc = interp_torus(v_vals[0], nv, x)
        vfirst = acc.copy()

    for k in range(steps):
        j = i0 + k
        if has_drift or has_v:
            _check_finite(j)
        # forcing accumulates at the pre-update position: node j carries
        # forcing row k (rows 1..steps-1 inside this loop; row 0 above,
        # row `steps` after the loop)
        if has_v and k > 0:
            acc += interp_torus(v_vals[k], nv, x)
        if has_drift:
            kf = j // sub
            w = float(j - kf * sub) / float(sub)
            slab = (drift[kf] + w * (drift[kf + 1] - drift[kf])) * dt
            bdt = interp_torus(slab, n, x)
        z = noise[k] if idx is None else noise[k][idx]
        if sigma_mat is not None:
            for comp in range(d):
                term = sigma_mat[comp, 0] * z[:, 0]
                for l in range(1, d):
                    term = term + sigma_mat[comp, l] * z[:, l]
                if has_drift:
                    x[:, comp] = (x[:, comp] + bdt[:, comp]) + term
                else:
                    x[:, comp] = x[:, comp] + term
        else:
            if has_drift:
                x[...] = (x + bdt) + sigma_sqdt * z
            else:
                x[...] = x + sigma_sqdt * z
        if store is not None:
            store[:, k + 1, :] = x

    if not np.isfinite(x).all():
        b = int(np.nonzero((~np.isfinite(x)).any(axis=1))[0][0])
        raise FloatingPointError(
            f"non-finite particle state: particle {b}, terminal step {i0 + steps}")

    if has_v:
        if steps == 0:
            vint_out[...] = 0.0
        else:
            vlast = interp_torus(v_vals[steps], nv, x)
            acc += vlast
            vint_out[...] = (acc - 0.5 * (vfirst + vlast)) * dt


def welford_batches(y, n_batches):
    """Streaming moments of sample blocks, batched.

    Args:
        y: (G, N, c) samples; node g's samples run over axis 1.
        n_batches: number of contiguous index batches.

    Returns:
        (mean, m2, batch_means): shapes (G, c), (G, c), (n_batches, G, c).
        mean/m2 come from merging the per-batch Welford results in batch
        order with Chan's update, so they are independent of threading and
        exactly constant-preserving.
    """
    y = np.asarray(y)
    G, N, c = y.shape
    if not 1 <= n_batches <= N:
        raise ValueError("n_batches must be in [1, N]")
    batch_means = np.empty((n_batches, G, c))
    batch_m2 = np.empty((n_batches, G, c))
    counts = np.empty(n_batches, dtype=np.int64)
    for b in range(n_batches):
        lo = b * N // n_batches
        hi = (b + 1) * N // n_batches
        mean = np.zeros((G, c))
        m2 = np.zeros((G, c))
        for i in range(lo, hi):
            cnt = float(i - lo + 1)
            yi = y[:, i, :]
            delta = yi - mean
            mean = mean + delta / cnt
            m2 = m2 + delta * (yi - mean)
        batch_means[b] = mean
        batch_m2[b] = m2
        counts[b] = hi - lo

    mean_acc = batch_means[0].copy()
    m2_acc = batch_m2[0].copy()
    n_acc = int(counts[0])
    for b in range(1, n_batches):
        n_b = int(counts[b])
        n_new = n_acc + n_b
        ratio = float(n_b) / float(n_new)
        delta = batch_means[b] - mean_acc
        mean_acc = mean_acc + delta * ratio
        m2_acc = (m2_acc + batch_m2[b]) + (delta * delta) * (float(n_acc) * ratio)
        n_acc = n_new
    return mean_acc, m2_acc, batch_means
