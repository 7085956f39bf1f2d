"""Hot loops of two-layer training, in a numba and a pure-numpy flavour.

Both functions run the projected simultaneous descent-ascent recursion for a
pair of two-layer ReLU nets and write into caller-provided buffers:

* ``log``: (T, 6) rows of iteration, batch payoff, gradient norms and
  post-projection distances to initialization;
* ``snaps_f`` / ``snaps_u``: pre-update iterates at every ``stride``-th step.

They return -1 on success or the 1-based iteration at which a non-finite
value appeared.  ``select_sgda_two_layer`` picks the flavour according to
``ASEM_NUMBA``.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit


@njit
def _project_inplace(W, W0, radius):
    m, d = W.shape
    s = 0.0
    for r in range(m):
        for j in range(d):
            diff = W[r, j] - W0[r, j]
            s += diff * diff
    norm = math.sqrt(s)
    if norm > radius:
        c = radius / norm
        for r in range(m):
            for j in range(d):
                W[r, j] = W0[r, j] + c * (W[r, j] - W0[r, j])
        return radius
    return norm


@njit
def sgda_two_layer_numba(
    W, W0, sf, V, V0, su, coefs, points, x2, bt, ridge,
    alpha, eta, radius_f, radius_u, T, batch, stride, log, snaps_f, snaps_u,
):
    m, d = W.shape
    P = coefs.shape[1]
    scale = 1.0 / math.sqrt(m)
    gW = np.zeros((m, d))
    gV = np.zeros((m, d))
    zf = np.zeros((P, m))
    zu = np.zeros(m)
    fv = np.zeros(P)
    k_snap = 0
    for t in range(T):
        if (t + 1) % stride == 0:
            snaps_f[k_snap] = W
            snaps_u[k_snap] = V
            k_snap += 1
        gW[:, :] = 0.0
        gV[:, :] = 0.0
        pay = 0.0
        for b in range(batch):
            s = t * batch + b
            for k in range(P):
                acc = 0.0
                for r in range(m):
                    z = 0.0
                    for j in range(d):
                        z += W[r, j] * points[s, k, j]
                    zf[k, r] = z
                    if z > 0.0:
                        acc += sf[r] * z
                fv[k] = scale * acc
            acc = 0.0
            for r in range(m):
                z = 0.0
                for j in range(d):
                    z += V[r, j] * x2[s, j]
                zu[r] = z
                if z > 0.0:
                    acc += su[r] * z
            u = scale * acc
            res = -bt[s]
            for k in range(P):
                res += coefs[s, k] * fv[k]
            ri = ridge[s]
            pay += res * u - 0.5 * u * u + 0.5 * alpha * fv[ri] * fv[ri]
            for k in range(P):
                c = u * coefs[s, k]
                if k == ri:
                    c += alpha * fv[k]
                if c == 0.0:
                    continue
                c *= scale
                for r in range(m):
                    if zf[k, r] > 0.0:
                        cr = c * sf[r]
                        for j in range(d):
                            gW[r, j] += cr * points[s, k, j]
            c = (res - u) * scale
            for r in range(m):
                if zu[r] > 0.0:
                    cr = c * su[r]
                    for j in range(d):
                        gV[r, j] += cr * x2[s, j]
        inv = 1.0 / batch
        nf = 0.0
        nu = 0.0
        for r in range(m):
            for j in range(d):
                gW[r, j] *= inv
                gV[r, j] *= inv
                nf += gW[r, j] * gW[r, j]
                nu += gV[r, j] * gV[r, j]
        pay *= inv
        if not (math.isfinite(pay) and math.isfinite(nf) and math.isfinite(nu)):
            return t + 1
        for r in range(m):
            for j in range(d):
                W[r, j] -= eta * gW[r, j]
                V[r, j] += eta * gV[r, j]
        log[t, 0] = t + 1
        log[t, 1] = pay
        log[t, 2] = math.sqrt(nf)
        log[t, 3] = math.sqrt(nu)
        log[t, 4] = _project_inplace(W, W0, radius_f)
        log[t, 5] = _project_inplace(V, V0, radius_u)
    return -1


def _project_np(W, W0, radius):
    delta = W - W0
    norm = math.sqrt(float(np.sum(delta * delta)))
    if norm > radius:
        W[...] = W0 + (radius / norm) * delta
        return radius
    return norm


def sgda_two_layer_numpy(
    W, W0, sf, V, V0, su, coefs, points, x2, bt, ridge,
    alpha, eta, radius_f, radius_u, T, batch, stride, log, snaps_f, snaps_u,
):
    # non-finite values are reported through the return code, not warnings
    with np.errstate(invalid="ignore", over="ignore"):
        return _sgda_numpy_loop(
            W, W0, sf, V, V0, su, coefs, points, x2, bt, ridge,
            alpha, eta, radius_f, radius_u, T, batch, stride, log, snaps_f, snaps_u,
        )


def _sgda_numpy_loop(
    W, W0, sf, V, V0, su, coefs, points, x2, bt, ridge,
    alpha, eta, radius_f, radius_u, T, batch, stride, log, snaps_f, snaps_u,
):
    m = W.shape[0]
    scale = 1.0 / math.sqrt(m)
    rows = np.arange(batch)
    k_snap = 0
    for t in range(T):
        if (t + 1) % stride == 0:
            snaps_f[k_snap] = W
            snaps_u[k_snap] = V
            k_snap += 1
        sl = slice(t * batch, (t + 1) * batch)
        pts = points[sl]  # (batch, P, d)
        c = coefs[sl]
        z2 = x2[sl]
        zf = pts @ W.T  # (batch, P, m)
        af = zf > 0.0
        fv = scale * np.sum(np.where(af, zf, 0.0) * sf, axis=2)  # (batch, P)
        zu = z2 @ V.T  # (batch, m)
        au = zu > 0.0
        u = scale * np.sum(np.where(au, zu, 0.0) * su, axis=1)
        res = np.sum(c * fv, axis=1) - bt[sl]
        ri = ridge[sl]
        f_ridge = fv[rows, ri]
        pay = float(np.mean(res * u - 0.5 * u * u + 0.5 * alpha * f_ridge * f_ridge))
        cf = u[:, None] * c
        cf[rows, ri] += alpha * f_ridge
        # sum over batch and points of cf * sf_r * 1{z>0} * x
        weights = (cf[:, :, None] * af) * (scale * sf)  # (batch, P, m)
        gW = np.einsum("bpm,bpd->md", weights, pts) / batch
        wu = ((res - u)[:, None] * au) * (scale * su)  # (batch, m)
        gV = wu.T @ z2 / batch
        nf = float(np.sum(gW * gW))
        nu = float(np.sum(gV * gV))
        if not (math.isfinite(pay) and math.isfinite(nf) and math.isfinite(nu)):
            return t + 1
        W -= eta * gW
        V += eta * gV
        log[t, 0] = t + 1
        log[t, 1] = pay
        log[t, 2] = math.sqrt(nf)
        log[t, 3] = math.sqrt(nu)
        log[t, 4] = _project_np(W, W0, radius_f)
        log[t, 5] = _project_np(V, V0, radius_u)
    return -1


def select_sgda_two_layer(use_numba: bool | None = None):
    use = USE_NUMBA if use_numba is None else use_numba
    return sgda_two_layer_numba if use else sgda_two_layer_numpy
