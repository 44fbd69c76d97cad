"""Compiled kernels: single-site profiles, windowed field sums, velocity Verlet.

A field is passed to the kernels as a flat tuple of arrays (see ``FieldData``
in :mod:`randpot.randfield`)::

    (centers, kinds, params, amps, lens, cutoffs, binv, table,
     grid_lo, grid_cell, grid_dims, grid_start, grid_items, global_items)

Every site k contributes ``amps[k] * W_kind(x / lens[k])`` where ``x`` is the
displacement ``q - centers[k]`` (radial kinds) or ``binv @ (q - centers[k])``
(cell kinds).
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

K_ZERO = 0
K_GAUSS = 1
K_BUMP = 2
K_YUKAWA = 3
K_FINITE = 4
K_QUAD = 5
K_INDICATOR = 6
K_COSINE = 7
K_TABLE = 8

NPARAM = 4

# unit-mass mollifier C(1-u^2)^4 on [-1, 1]
_MOLL_C = 315.0 / 256.0
_MOLL_HALF = 128.0 / 315.0

ST_OK = 0
ST_SINGULAR = 1

R_TIME = 0
R_ESCAPED = 1
R_GUARD = 2
R_NAN = 3
R_SINGULAR = 4


@njit(cache=True)
def _radial_profile(kind, p, rho, table):
    """Base profile f(rho) and its first two derivatives. Returns (f, f1, f2, singular)."""
    if kind == K_GAUSS:
        s2 = p[0] * p[0]
        f = math.exp(-0.5 * rho * rho / s2)
        return f, -rho / s2 * f, (rho * rho / (s2 * s2) - 1.0 / s2) * f, False
    if kind == K_BUMP:
        rc, w, n = p[0], p[1], p[2]
        u = (rho - rc) / w
        if u <= -1.0 or u >= 1.0:
            return 0.0, 0.0, 0.0, False
        s = 1.0 - u * u
        f = s ** n
        f1 = -2.0 * n * u * s ** (n - 1.0) / w
        f2 = (4.0 * n * (n - 1.0) * u * u * s ** (n - 2.0) - 2.0 * n * s ** (n - 1.0)) / (w * w)
        return f, f1, f2, False
    if kind == K_YUKAWA:
        if rho == 0.0:
            return 0.0, 0.0, 0.0, True
        c, mu = p[0], p[1]
        e = math.exp(-mu * rho)
        f = -c * e / rho
        f1 = c * e * (1.0 + mu * rho) / (rho * rho)
        f2 = -c * e * (mu * mu * rho * rho + 2.0 * mu * rho + 2.0) / (rho * rho * rho)
        return f, f1, f2, False
    if kind == K_FINITE:
        if rho == 0.0:
            return 0.0, 0.0, 0.0, True
        c, lam, m, sg = p[0], p[1], p[2], p[3]
        x = lam * rho
        if x >= 0.5 * math.pi:
            return 0.0, 0.0, 0.0, False
        co = math.cos(x)
        si = math.sin(x)
        h = co ** m
        h1 = -m * lam * co ** (m - 1.0) * si
        h2 = m * lam * lam * ((m - 1.0) * co ** (m - 2.0) * si * si - co ** m)
        a = -sg * c
        f = a * h / rho
        f1 = a * (h1 / rho - h / (rho * rho))
        f2 = a * (h2 / rho - 2.0 * h1 / (rho * rho) + 2.0 * h / (rho * rho * rho))
        return f, f1, f2, False
    if kind == K_QUAD:
        k = p[0]
        return 0.5 * k * rho * rho, k * rho, k, False
    if kind == K_TABLE:
        off = int(p[0])
        n = int(p[1])
        dr = p[2]
        i = int(math.floor(rho / dr))
        if i >= n - 1:
            return 0.0, 0.0, 0.0, False
        x = rho - i * dr
        c0 = table[off + i, 0]
        c1 = table[off + i, 1]
        c2 = table[off + i, 2]
        c3 = table[off + i, 3]
        f = c0 + x * (c1 + x * (c2 + x * c3))
        f1 = c1 + x * (2.0 * c2 + 3.0 * c3 * x)
        f2 = 2.0 * c2 + 6.0 * c3 * x
        return f, f1, f2, False
    return 0.0, 0.0, 0.0, False


@njit(cache=True)
def _moll_cdf(u):
    if u <= -1.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    u2 = u * u
    poly = u * (1.0 + u2 * (-4.0 / 3.0 + u2 * (6.0 / 5.0 + u2 * (-4.0 / 7.0 + u2 / 9.0))))
    return _MOLL_C * (poly + _MOLL_HALF)


@njit(cache=True)
def _moll(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    s = 1.0 - u * u
    return _MOLL_C * s * s * s * s


@njit(cache=True)
def _moll_d(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    s = 1.0 - u * u
    return -8.0 * _MOLL_C * u * s * s * s


@njit(cache=True)
def indicator_1d(x):
    """Mollified indicator of [0, 1) with mollifier radius 1/4: (phi, phi', phi'')."""
    a = 4.0 * x
    b = 4.0 * x - 4.0
    f = _moll_cdf(a) - _moll_cdf(b)
    f1 = 4.0 * (_moll(a) - _moll(b))
    f2 = 16.0 * (_moll_d(a) - _moll_d(b))
    return f, f1, f2


@njit(cache=True)
def _cell_site(kind, x, want_hess, gx, hx):
    """Cell-kind profile in basis coordinates x; fills gx, hx; returns value."""
    d = x.shape[0]
    ph = np.empty(d)
    ph1 = np.empty(d)
    ph2 = np.empty(d)
    for k in range(d):
        if x[k] <= -0.25 or x[k] >= 1.25:
            for m in range(d):
                gx[m] = 0.0
                if want_hess:
                    for n in range(d):
                        hx[m, n] = 0.0
            return 0.0
        a, b, c = indicator_1d(x[k])
        ph[k] = a
        ph1[k] = b
        ph2[k] = c
    F = 1.0
    for k in range(d):
        F *= ph[k]
    # dF, d2F by products excluding factors (no division: factors may vanish)
    dF = np.empty(d)
    for k in range(d):
        t = ph1[k]
        for m in range(d):
            if m != k:
                t *= ph[m]
        dF[k] = t
    HF = np.zeros((d, d))
    if want_hess:
        for k in range(d):
            for n in range(d):
                if k == n:
                    t = ph2[k]
                    for m in range(d):
                        if m != k:
                            t *= ph[m]
                else:
                    t = ph1[k] * ph1[n]
                    for m in range(d):
                        if m != k and m != n:
                            t *= ph[m]
                HF[k, n] = t
    if kind == K_INDICATOR:
        for k in range(d):
            gx[k] = dF[k]
            if want_hess:
                for n in range(d):
                    hx[k, n] = HF[k, n]
        return F
    # cosine term: -C(x) F(x), C = sum cos(2 pi x_k)
    tp = 2.0 * math.pi
    C = 0.0
    dC = np.empty(d)
    for k in range(d):
        C += math.cos(tp * x[k])
        dC[k] = -tp * math.sin(tp * x[k])
    for k in range(d):
        gx[k] = -(dC[k] * F + C * dF[k])
        if want_hess:
            for n in range(d):
                t = dC[k] * dF[n] + dF[k] * dC[n] + C * HF[k, n]
                if k == n:
                    t += -tp * tp * math.cos(tp * x[k]) * F
                hx[k, n] = -t
    return -C * F


@njit(cache=True)
def _add_site(k, q, fd, want_hess, g, H, scratch_g, scratch_h):
    """Add the contribution of site k at q. Returns (dV, status)."""
    centers, kinds, params, amps, lens, cutoffs, binv, table = fd[0], fd[1], fd[2], fd[3], fd[4], fd[5], fd[6], fd[7]
    d = q.shape[0]
    kind = kinds[k]
    if kind == K_ZERO:
        return 0.0, ST_OK
    b = amps[k]
    a = lens[k]
    r2 = 0.0
    for i in range(d):
        t = q[i] - centers[k, i]
        r2 += t * t
    r = math.sqrt(r2)
    if r >= cutoffs[k]:
        return 0.0, ST_OK
    if kind == K_INDICATOR or kind == K_COSINE:
        x = np.empty(d)
        for i in range(d):
            t = 0.0
            for j in range(d):
                t += binv[i, j] * (q[j] - centers[k, j])
            x[i] = t / a
        v = _cell_site(kind, x, want_hess, scratch_g, scratch_h)
        # chain rule with J = binv / a
        for i in range(d):
            t = 0.0
            for m in range(d):
                t += binv[m, i] * scratch_g[m]
            g[i] += b * t / a
        if want_hess:
            for i in range(d):
                for j in range(d):
                    t = 0.0
                    for m in range(d):
                        bm = binv[m, i]
                        if bm == 0.0:
                            continue
                        for n in range(d):
                            t += bm * scratch_h[m, n] * binv[n, j]
                    H[i, j] += b * t / (a * a)
        return b * v, ST_OK
    f, f1, f2, sing = _radial_profile(kind, params[k], r / a, table)
    if sing:
        return 0.0, ST_SINGULAR
    W1 = b * f1 / a
    if r > 0.0:
        for i in range(d):
            g[i] += W1 * (q[i] - centers[k, i]) / r
    if want_hess:
        W2 = b * f2 / (a * a)
        if r > 0.0:
            wr = W1 / r
            for i in range(d):
                ui = (q[i] - centers[k, i]) / r
                for j in range(d):
                    uj = (q[j] - centers[k, j]) / r
                    t = (W2 - wr) * ui * uj
                    if i == j:
                        t += wr
                    H[i, j] += t
        else:
            for i in range(d):
                H[i, i] += W2
    return b * f, ST_OK


@njit(cache=True)
def field_eval(q, fd, want_hess):
    """Sum all sites near q. Returns (V, grad, hess, status)."""
    return field_eval_skip(q, fd, want_hess, -1)


@njit(cache=True)
def field_eval_skip(q, fd, want_hess, skip):
    """As field_eval, omitting site index ``skip`` (-1: none)."""
    grid_lo, grid_cell, grid_dims, grid_start, grid_items, global_items = fd[8], fd[9], fd[10], fd[11], fd[12], fd[13]
    d = q.shape[0]
    g = np.zeros(d)
    H = np.zeros((d, d))
    sg = np.zeros(d)
    sh = np.zeros((d, d))
    V = 0.0
    status = ST_OK
    for ii in range(global_items.shape[0]):
        if global_items[ii] == skip:
            continue
        dv, st = _add_site(global_items[ii], q, fd, want_hess, g, H, sg, sh)
        V += dv
        if st != ST_OK:
            status = st
    ncell = grid_start.shape[0] - 1
    if ncell > 0:
        base = np.empty(d, dtype=np.int64)
        for i in range(d):
            base[i] = int(math.floor((q[i] - grid_lo[i]) / grid_cell))
        nnb = 1
        for i in range(d):
            nnb *= 3
        for m in range(nnb):
            rem = m
            lin = 0
            ok = True
            for i in range(d):
                off = rem % 3 - 1
                rem //= 3
                c = base[i] + off
                if c < 0 or c >= grid_dims[i]:
                    ok = False
                    break
                lin = lin * grid_dims[i] + c
            if not ok:
                continue
            for jj in range(grid_start[lin], grid_start[lin + 1]):
                if grid_items[jj] == skip:
                    continue
                dv, st = _add_site(grid_items[jj], q, fd, want_hess, g, H, sg, sh)
                V += dv
                if st != ST_OK:
                    status = st
    return V, g, H, status


@njit(cache=True)
def field_eval_many(Q, fd, want_hess):
    n, d = Q.shape
    V = np.empty(n)
    G = np.empty((n, d))
    HH = np.empty((n, d, d))
    S = np.empty(n, dtype=np.int64)
    for i in range(n):
        v, g, H, st = field_eval(Q[i], fd, want_hess)
        V[i] = v
        G[i] = g
        HH[i] = H
        S[i] = st
    return V, G, HH, S


@njit(cache=True)
def _outside_guard(q, gbinv, glo, ghi):
    d = q.shape[0]
    for i in range(d):
        t = 0.0
        for j in range(d):
            t += gbinv[i, j] * q[j]
        if t < glo[i] or t > ghi[i]:
            return True
    return False


@njit(cache=True)
def verlet(fd, q0, p0, h, nsteps, stride, r_esc, use_guard, gbinv, glo, ghi):
    """Velocity Verlet for H = |p|^2/2 + V.

    Returns (t, Q, P, E, steps_done, reason, max_abs_drift, max_displacement).
    Samples are taken every ``stride`` steps and at termination; drift and
    displacement are tracked over every internal step.
    """
    d = q0.shape[0]
    nout = nsteps // stride + 2
    T = np.empty(nout)
    Qs = np.empty((nout, d))
    Ps = np.empty((nout, d))
    Es = np.empty(nout)
    q = q0.copy()
    p = p0.copy()
    V, g, _, st = field_eval(q, fd, False)
    if st != ST_OK:
        return T[:0], Qs[:0], Ps[:0], Es[:0], 0, R_SINGULAR, 0.0, 0.0
    E0 = V
    for i in range(d):
        E0 += 0.5 * p[i] * p[i]
    T[0] = 0.0
    Qs[0] = q
    Ps[0] = p
    Es[0] = E0
    nrec = 1
    drift = 0.0
    maxdisp = 0.0
    reason = R_TIME
    step = 0
    hh = 0.5 * h
    while step < nsteps:
        for i in range(d):
            p[i] -= hh * g[i]
            q[i] += h * p[i]
        V, g, _, st = field_eval(q, fd, False)
        for i in range(d):
            p[i] -= hh * g[i]
        step += 1
        if st != ST_OK:
            reason = R_SINGULAR
            break
        E = V
        rq = 0.0
        dq = 0.0
        for i in range(d):
            E += 0.5 * p[i] * p[i]
            rq += q[i] * q[i]
            dq += (q[i] - q0[i]) * (q[i] - q0[i])
        if dq > maxdisp:
            maxdisp = dq
        if not math.isfinite(E):
            reason = R_NAN
            break
        dE = abs(E - E0)
        if dE > drift:
            drift = dE
        if math.sqrt(rq) > r_esc:
            reason = R_ESCAPED
            break
        if use_guard and _outside_guard(q, gbinv, glo, ghi):
            reason = R_GUARD
            break
        if step % stride == 0 and step < nsteps:
            T[nrec] = step * h
            Qs[nrec] = q
            Ps[nrec] = p
            Es[nrec] = E
            nrec += 1
    E = V
    for i in range(d):
        E += 0.5 * p[i] * p[i]
    T[nrec] = step * h
    Qs[nrec] = q
    Ps[nrec] = p
    Es[nrec] = E
    nrec += 1
    return T[:nrec], Qs[:nrec], Ps[:nrec], Es[:nrec], step, reason, drift, math.sqrt(maxdisp)


@njit(cache=True)
def verlet_final(fd, q0, p0, h, nsteps):
    """Endpoint-only Verlet (no recording, no guards). Returns (q, p, status)."""
    q = q0.copy()
    p = p0.copy()
    d = q.shape[0]
    _, g, _, st = field_eval(q, fd, False)
    if st != ST_OK:
        return q, p, st
    hh = 0.5 * h
    for _s in range(nsteps):
        for i in range(d):
            p[i] -= hh * g[i]
            q[i] += h * p[i]
        _, g, _, st = field_eval(q, fd, False)
        if st != ST_OK:
            return q, p, st
        for i in range(d):
            p[i] -= hh * g[i]
    return q, p, ST_OK
