"""Hot numeric kernels, each in two flavours.

Every kernel has a ``*_nb`` variant written as explicit loops and compiled
with :func:`numba.njit`, and a ``*_np`` variant written with vectorised
numpy. The public names at the bottom of this module point at one or the
other depending on :data:`BACKEND`.

Set ``BITFLIP_DISABLE_NUMBA=1`` in the environment to force the numpy
path. When numba is not importable the numpy path is used automatically
and the ``*_nb`` functions run as plain (slow) Python.
"""

from __future__ import annotations

import logging
import os

import numpy as np

_DISABLE = os.environ.get("BITFLIP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

BACKEND = "numba" if (HAS_NUMBA and not _DISABLE) else "numpy"

SPHERE_EPS = 1e-12


def _jit(fn):
    if HAS_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------- projections


@_jit
def project_sphere_nb(a):
    n = a.shape[0]
    out = np.empty(n)
    nrm2 = 0.0
    for i in range(n):
        d = a[i] - 0.5
        nrm2 += d * d
    nrm = np.sqrt(nrm2)
    half_root = 0.5 * np.sqrt(n)
    if nrm < SPHERE_EPS:
        # degenerate centre: move along the normalised all-ones direction
        step = half_root / np.sqrt(n)
        for i in range(n):
            out[i] = 0.5 + step
        return out
    scale = half_root / nrm
    for i in range(n):
        out[i] = 0.5 + scale * (a[i] - 0.5)
    return out


def project_sphere_np(a):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    centred = a - 0.5
    nrm = np.sqrt(centred @ centred)
    if nrm < SPHERE_EPS:
        return np.full(n, 0.5 + 0.5 * np.sqrt(n) / np.sqrt(n))
    return 0.5 + (0.5 * np.sqrt(n) / nrm) * centred


# -------------------------------------------------------------- admm updates


@_jit
def aux_update_nb(b_hat, b, z1, z2, z3, rho1, rho2, rho3, k):
    n = b_hat.shape[0]
    u1 = np.empty(n)
    a2 = np.empty(n)
    dist = 0.0
    for i in range(n):
        v = b_hat[i] + z1[i] / rho1
        if v < 0.0:
            v = 0.0
        elif v > 1.0:
            v = 1.0
        u1[i] = v
        a2[i] = b_hat[i] + z2[i] / rho2
        d = b[i] - b_hat[i]
        dist += d * d
    u2 = project_sphere_nb(a2)
    u3 = -dist + k - z3 / rho3
    if u3 < 0.0:
        u3 = 0.0
    return u1, u2, u3


def aux_update_np(b_hat, b, z1, z2, z3, rho1, rho2, rho3, k):
    u1 = np.clip(b_hat + z1 / rho1, 0.0, 1.0)
    u2 = project_sphere_np(b_hat + z2 / rho2)
    d = b - b_hat
    u3 = max(0.0, -(d @ d) + k - z3 / rho3)
    return u1, u2, u3


@_jit
def lagrangian_grad_nb(b_hat, b, u1, u2, u3, z1, z2, z3, rho1, rho2, rho3, k, loss_grad):
    n = b_hat.shape[0]
    dist = 0.0
    for i in range(n):
        d = b_hat[i] - b[i]
        dist += d * d
    coef = 2.0 * (z3 + rho3 * (dist - k + u3))
    out = np.empty(n)
    for i in range(n):
        out[i] = (
            loss_grad[i]
            + z1[i]
            + z2[i]
            + rho1 * (b_hat[i] - u1[i])
            + rho2 * (b_hat[i] - u2[i])
            + coef * (b_hat[i] - b[i])
        )
    return out


def lagrangian_grad_np(b_hat, b, u1, u2, u3, z1, z2, z3, rho1, rho2, rho3, k, loss_grad):
    d = b_hat - b
    coef = 2.0 * (z3 + rho3 * (d @ d - k + u3))
    return loss_grad + z1 + z2 + rho1 * (b_hat - u1) + rho2 * (b_hat - u2) + coef * d


@_jit
def dual_update_nb(b_hat, b, u1, u2, u3, z1, z2, z3, rho1, rho2, rho3, k):
    n = b_hat.shape[0]
    nz1 = np.empty(n)
    nz2 = np.empty(n)
    dist = 0.0
    r1 = 0.0
    r2 = 0.0
    for i in range(n):
        e1 = b_hat[i] - u1[i]
        e2 = b_hat[i] - u2[i]
        nz1[i] = z1[i] + rho1 * e1
        nz2[i] = z2[i] + rho2 * e2
        r1 += e1 * e1
        r2 += e2 * e2
        d = b[i] - b_hat[i]
        dist += d * d
    nz3 = z3 + rho3 * (dist - k + u3)
    return nz1, nz2, nz3, r1, r2


def dual_update_np(b_hat, b, u1, u2, u3, z1, z2, z3, rho1, rho2, rho3, k):
    e1 = b_hat - u1
    e2 = b_hat - u2
    d = b - b_hat
    nz3 = z3 + rho3 * (d @ d - k + u3)
    return z1 + rho1 * e1, z2 + rho2 * e2, nz3, float(e1 @ e1), float(e2 @ e2)


# ------------------------------------------------------- softmax cross entropy


@_jit
def ce_rows_grad_nb(feats, weights, bias, labels, rows):
    """Summed cross entropy and its gradient w.r.t. selected weight rows."""
    n, c = feats.shape
    kk = weights.shape[0]
    r = rows.shape[0]
    dw = np.zeros((r, c))
    z = np.empty(kk)
    loss = 0.0
    for i in range(n):
        zmax = -np.inf
        for j in range(kk):
            acc = bias[j]
            for f in range(c):
                acc += weights[j, f] * feats[i, f]
            z[j] = acc
            if acc > zmax:
                zmax = acc
        lab = labels[i]
        zlab = z[lab] - zmax
        tot = 0.0
        for j in range(kk):
            z[j] = np.exp(z[j] - zmax)
            tot += z[j]
        loss += np.log(tot) - zlab
        for a in range(r):
            row = rows[a]
            coef = z[row] / tot
            if row == lab:
                coef -= 1.0
            if coef != 0.0:
                for f in range(c):
                    dw[a, f] += coef * feats[i, f]
    return loss, dw


def ce_rows_grad_np(feats, weights, bias, labels, rows):
    logits = feats @ weights.T + bias
    zmax = logits.max(axis=1, keepdims=True)
    shifted = logits - zmax
    ex = np.exp(shifted)
    tot = ex.sum(axis=1)
    idx = np.arange(feats.shape[0])
    loss = float(np.sum(np.log(tot) - shifted[idx, labels]))
    probs = ex / tot[:, None]
    coef = probs[:, rows]
    coef -= labels[:, None] == rows[None, :]
    return loss, coef.T @ feats


_IMPLS = {
    "numba": {
        "project_sphere": project_sphere_nb,
        "aux_update": aux_update_nb,
        "lagrangian_grad": lagrangian_grad_nb,
        "dual_update": dual_update_nb,
        "ce_rows_grad": ce_rows_grad_nb,
    },
    "numpy": {
        "project_sphere": project_sphere_np,
        "aux_update": aux_update_np,
        "lagrangian_grad": lagrangian_grad_np,
        "dual_update": dual_update_np,
        "ce_rows_grad": ce_rows_grad_np,
    },
}


def kernels(backend: str | None = None) -> dict:
    """Return the kernel table for ``backend`` (default: :data:`BACKEND`)."""
    return _IMPLS[backend or BACKEND]


project_sphere = _IMPLS[BACKEND]["project_sphere"]
aux_update = _IMPLS[BACKEND]["aux_update"]
lagrangian_grad = _IMPLS[BACKEND]["lagrangian_grad"]
dual_update = _IMPLS[BACKEND]["dual_update"]
ce_rows_grad = _IMPLS[BACKEND]["ce_rows_grad"]
