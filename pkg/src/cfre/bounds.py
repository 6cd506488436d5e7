"""Norm inequalities behind the likelihood upper bound.

The chain is  tr(A) <= sqrt(n) ||A||_F <= n ||A||  for real n x n
matrices, with equality of the first step exactly on nonnegative
multiples of the identity.  Applied to the velocity field's Jacobian it
caps the trace integral of the density by n times a Lipschitz bound,
giving  upper_bound = -log p(z(0)) + n * L_hat.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import InputError


class SpectralNorm(NamedTuple):
    value: float
    converged: bool
    iterations: int


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt((a * a).sum()))


def spectral_norm(a, iters=50, tol=1e-8):
    """Largest singular value by power iteration on A^T A.

    Deterministic start vector; non-convergence is reported via the
    flag, with the best iterate still returned.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError("spectral_norm expects a 2-D matrix")
    n = a.shape[1]
    # Slightly uneven start avoids landing exactly orthogonal to the
    # top singular vector on structured matrices.
    v = 1.0 + 0.01 * np.arange(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for k in range(iters):
        w = a.T @ (a @ v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return SpectralNorm(0.0, True, k + 1)
        v = w / nw
        if abs(nw - lam) <= tol * max(nw, 1.0):
            return SpectralNorm(math.sqrt(nw), True, k + 1)
        lam = nw
    return SpectralNorm(math.sqrt(lam), False, iters)


def trace_norm_chain(a, iters=50, tol=1e-8):
    """(tr(A), sqrt(n) ||A||_F, n ||A||) for a square matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError("trace_norm_chain expects a square matrix")
    n = a.shape[0]
    return (float(np.trace(a)),
            math.sqrt(n) * frobenius_norm(a),
            n * spectral_norm(a, iters=iters, tol=tol).value)


def lipschitz_estimate(net, region_samples, rng, region_scale=3.0, extra_states=None):
    """Sampled lower bound on sup ||d f / d z|| over states and times.

    Draws z ~ N(0, region_scale^2 I) and t ~ U[0,1], takes the largest
    power-iteration spectral norm of the Jacobian.  extra_states, if
    given, is an iterable of (z, t) pairs also included (e.g. states
    collected along evaluation trajectories).
    """
    if region_samples < 1:
        raise InputError("region_samples must be >= 1")
    d = net.data_dim
    zs = region_scale * rng.standard_normal((region_samples, d))
    ts = rng.uniform(size=region_samples)
    best = 0.0
    # times differ per sample, so group the batched Jacobian call by time
    for z, t in zip(zs, ts):
        jac = net.jacobian_values(z[None, :], float(t))[0]
        best = max(best, spectral_norm(jac).value)
    if extra_states is not None:
        for z, t in extra_states:
            z = np.asarray(z, dtype=np.float64)
            if z.ndim == 1:
                z = z[None, :]
            jacs = net.jacobian_values(z, float(t))
            for jac in jacs:
                best = max(best, spectral_norm(jac).value)
    return best


def upper_bound_value(net, z0_logprob, n, L_hat):
    """Likelihood upper bound  -log p(z(0)) + n * L_hat."""
    if L_hat < 0.0:
        raise InputError("L_hat must be nonnegative")
    if n < 1:
        raise InputError("n must be >= 1")
    if net is not None and n != net.data_dim:
        raise InputError("n (%d) disagrees with the field dimension (%d)"
                         % (n, net.data_dim))
    return -float(z0_logprob) + n * float(L_hat)
