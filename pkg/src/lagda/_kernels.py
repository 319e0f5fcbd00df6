"""Numba-fused inner loops for the full-covariance filter and smoother.

These reproduce the numpy reference implementations in filters.py and
smoothing.py for mode sets WITHOUT a mean-flow block (diagonal drift and
noise), fusing whole time loops into single calls.  Equivalence with the
reference path is covered by tests.  The PSD safeguard (Cholesky splash,
eigenvalue clamp at the jitter floor) lives inside the loops so the guarded
covariance sequence is identical between forward passes and backward
segment refills.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _phases(pos, kx, ky):
    """exp(i k . x) for integer wavenumbers via power tables.

    e^{i(kx x + ky y)} = (e^{ix})^{kx} (e^{iy})^{ky}, so each tracer needs two
    trig evaluations and one complex multiply per mode.
    """
    L = pos.shape[0]
    K = kx.size
    mx = 0
    my = 0
    for m in range(K):
        ax = abs(kx[m])
        ay = abs(ky[m])
        if ax > mx:
            mx = ax
        if ay > my:
            my = ay
    E = np.empty((L, K), dtype=np.complex128)
    powx = np.empty(mx + 1, dtype=np.complex128)
    powy = np.empty(my + 1, dtype=np.complex128)
    for l in range(L):
        x = pos[l, 0]
        y = pos[l, 1]
        a = complex(np.cos(x), np.sin(x))
        b = complex(np.cos(y), np.sin(y))
        powx[0] = 1.0 + 0.0j
        for p in range(1, mx + 1):
            powx[p] = powx[p - 1] * a
        powy[0] = 1.0 + 0.0j
        for p in range(1, my + 1):
            powy[p] = powy[p - 1] * b
        for m in range(K):
            px = kx[m]
            py = ky[m]
            ex = powx[px] if px >= 0 else np.conj(powx[-px])
            ey = powy[py] if py >= 0 else np.conj(powy[-py])
            E[l, m] = ex * ey
    return E


@njit(cache=True)
def _sym_mirror(B, pair):
    """0.25*(B + B^H + conj(B[pair, pair]) + B[pair, pair]^H)."""
    K = B.shape[0]
    out = np.empty_like(B)
    for m in range(K):
        pm = pair[m]
        for n in range(K):
            pn = pair[n]
            out[m, n] = 0.25 * (
                B[m, n]
                + np.conj(B[n, m])
                + np.conj(B[pm, pn])
                + B[pn, pm]
            )
    return out


@njit(cache=True)
def _mirror_vec(v, pair):
    K = v.size
    for m in range(K):
        if pair[m] > m:
            v[pair[m]] = np.conj(v[m])
    return v


@njit(cache=True)
def _guard(R, jitter):
    """PSD safeguard: leave PD matrices alone, else clamp eigenvalues."""
    try:
        C = np.linalg.cholesky(R)
        logdet = 0.0
        for i in range(C.shape[0]):
            logdet += 2.0 * np.log(C[i, i].real)
        return R, logdet, False
    except Exception:
        w, V = np.linalg.eigh(R)
        wc = np.maximum(w, jitter)
        out = (V * wc.astype(np.complex128)) @ V.conj().T
        logdet = 0.0
        for i in range(wc.size):
            if wc[i] > 0:
                logdet += np.log(wc[i])
            else:
                logdet = -np.inf
        return out, logdet, True


@njit(cache=True)
def _cov_rhs(R, E, W, lam, q_diag, sxi2):
    K = R.shape[0]
    EH = E.conj().T.copy()
    G = EH @ np.ascontiguousarray(E)
    P = W * G
    RP = R @ P
    RPR = RP @ R
    T1 = np.empty_like(R)
    for m in range(K):
        for n in range(K):
            T1[m, n] = lam[m] * R[m, n]
    dR = np.empty_like(R)
    for m in range(K):
        for n in range(K):
            dR[m, n] = T1[m, n] + np.conj(T1[n, m]) - sxi2 * RPR[m, n]
        dR[m, m] += q_diag[m]
    return dR


@njit(cache=True)
def _cov_advance(R, pos, kx, ky, W, lam, q_diag, dt, sxi2, pair, jitter):
    E = _phases(pos, kx, ky)
    dR = _cov_rhs(R, E, W, lam, q_diag, sxi2)
    return _guard(_sym_mirror(R + dt * dR, pair), jitter)


@njit(cache=True)
def full_step(mu, R, pos, inc, kx, ky, rx, ry, W, lam, f, q_diag, dt, sxi2,
              gain_scale, pair):
    """One mean+covariance step; returns (mu_new, pre-guard R_new)."""
    E = _phases(pos, kx, ky)
    L = pos.shape[0]
    vx = E @ (mu * rx)
    vy = E @ (mu * ry)
    ix = np.empty(L, dtype=np.complex128)
    iy = np.empty(L, dtype=np.complex128)
    for l in range(L):
        ix[l] = inc[l, 0] - vx[l] * dt
        iy[l] = inc[l, 1] - vy[l] * dt
    EH = E.conj().T.copy()
    a_innov = np.conj(rx) * (EH @ ix) + np.conj(ry) * (EH @ iy)
    mu_new = mu + dt * (f + lam * mu) + (gain_scale * sxi2) * (R @ a_innov)
    mu_new = _mirror_vec(mu_new, pair)
    dR = _cov_rhs(R, E, W, lam, q_diag, sxi2)
    return mu_new, _sym_mirror(R + dt * dR, pair)


@njit(cache=True)
def filter_forward(mu0, R0, positions, increments, kx, ky, rx, ry, W, lam, f,
                   q_diag, dt, sxi2, jitter, pair, stride, cp_out, mu_out,
                   rdiag_out, logdet_out, r_final):
    """Whole forward pass of the full filter (no mean-flow block).

    Checkpoints the guarded covariance every ``stride`` steps into ``cp_out``
    (slot j//stride holds step j); the terminal covariance lands in
    ``r_final``.  Returns (clamp_count, bad_step) with bad_step = -1 when the
    run stayed finite.
    """
    n = increments.shape[0]
    K = mu0.size
    mu = mu0.copy()
    R = R0.copy()
    R, ld0, _ = _guard(R, 0.0)
    mu_out[0] = mu
    for m in range(K):
        rdiag_out[0, m] = R[m, m].real
    logdet_out[0] = ld0
    cp_out[0] = R
    clamps = 0
    for j in range(n):
        mu, R_pre = full_step(mu, R, positions[j], increments[j], kx, ky, rx,
                              ry, W, lam, f, q_diag, dt, sxi2, 1.0, pair)
        R, ld, clamped = _guard(R_pre, jitter)
        if clamped:
            clamps += 1
        mu_out[j + 1] = mu
        for m in range(K):
            rdiag_out[j + 1, m] = R[m, m].real
        logdet_out[j + 1] = ld
        if (j + 1) % stride == 0:
            cp_out[(j + 1) // stride] = R
        ok = True
        for m in range(K):
            if not (np.isfinite(mu[m].real) and np.isfinite(mu[m].imag)):
                ok = False
                break
        if not ok:
            return clamps, j + 1
    r_final[:] = R
    return clamps, -1


@njit(cache=True)
def backward_segment(R_start, positions, mu_f, lam, f, q_diag, kx, ky, W, dt,
                     sxi2, jitter, pair, noise, anchor, use_anchor, cur_mu_s,
                     Rs, U, mu_s_out, rs_out, u_out, want_rs):
    """Process one checkpointed segment of backward smoother/sampler steps.

    ``R_start`` is the guarded filter covariance at the segment's first step;
    the segment's covariances are refilled forward (bit-identical to the
    forward pass) and consumed backward.  ``mu_f`` holds the filter mean rows
    of the segment (length seg+1); ``noise`` row i carries the increment for
    the backward step landing on segment-local index i; ``anchor`` rows hold
    the smoother mean used in the sampling relaxation when ``use_anchor``.
    State arrays ``cur_mu_s``, ``Rs``, ``U`` are updated in place;
    ``mu_s_out``, ``rs_out`` and ``u_out`` receive the segment's rows.
    """
    seg = positions.shape[0]
    K = lam.size
    buf = np.empty((seg, K, K), dtype=np.complex128)
    R = R_start.copy()
    for i in range(seg):
        R, _, _ = _cov_advance(R, positions[i], kx, ky, W, lam, q_diag, dt,
                               sxi2, pair, jitter)
        buf[i] = R
    eyed = jitter * np.eye(K).astype(np.complex128)
    M = U.shape[0]
    for i in range(seg - 1, -1, -1):
        Rj = buf[i]
        rinv = np.linalg.inv(Rj + eyed)
        G = np.empty_like(rinv)
        for m in range(K):
            for nn in range(K):
                G[m, nn] = q_diag[m] * rinv[m, nn]
        relax = G @ (mu_f[i + 1] - cur_mu_s)
        new_mu_s = cur_mu_s + dt * (-f - lam * cur_mu_s + relax)
        new_mu_s = _mirror_vec(new_mu_s, pair)

        if want_rs:
            CRs = G @ Rs
            for m in range(K):
                for nn in range(K):
                    CRs[m, nn] += lam[m] * Rs[m, nn]
            B = np.empty_like(Rs)
            for m in range(K):
                for nn in range(K):
                    B[m, nn] = Rs[m, nn] - dt * (CRs[m, nn] + np.conj(CRs[nn, m]))
                B[m, m] += dt * q_diag[m]
            Rs_new, _, _ = _guard(_sym_mirror(B, pair), jitter)
            Rs[:, :] = Rs_new

        if use_anchor:
            a_new = anchor[i]
            a_old = anchor[i + 1]
        else:
            a_new = new_mu_s
            a_old = cur_mu_s
        if M > 0:
            for s in range(M):
                diff = U[s] - a_old
                pull = lam * diff + G @ diff
                unew = U[s] + (a_new - a_old) - dt * pull + noise[i, s]
                U[s] = _mirror_vec(unew, pair)
                u_out[i, s] = U[s]

        mu_s_out[i] = new_mu_s
        for m in range(K):
            rs_out[i, m] = Rs[m, m].real
        cur_mu_s[:] = new_mu_s


@njit(cache=True)
def simulate_chunk(u, pos, kx, ky, rx, ry, lam, f, sigma, dt, sigma_x, pair,
                   mode_noise, tracer_noise, coeffs_out, pos_out, inc_out):
    """Advance one chunk of the coupled tracer/flow Euler-Maruyama loop.

    ``mode_noise`` rows hold the conjugate-symmetric Wiener increments,
    ``tracer_noise`` the standard normals for the tracers.  ``u`` and ``pos``
    are updated in place; per-step outputs land in the ``*_out`` slices.
    Returns the in-chunk index of the first non-finite state, or -1.
    """
    steps = mode_noise.shape[0]
    L = pos.shape[0]
    K = u.size
    two_pi = 2.0 * np.pi
    sq_dt = np.sqrt(dt)
    for j in range(steps):
        if L > 0:
            E = _phases(pos, kx, ky)
            vx = E @ (u * rx)
            vy = E @ (u * ry)
            for l in range(L):
                dx = vx[l].real * dt + sigma_x * sq_dt * tracer_noise[j, l, 0]
                dy = vy[l].real * dt + sigma_x * sq_dt * tracer_noise[j, l, 1]
                inc_out[j, l, 0] = dx
                inc_out[j, l, 1] = dy
                pos[l, 0] = (pos[l, 0] + dx) % two_pi
                pos[l, 1] = (pos[l, 1] + dy) % two_pi
                pos_out[j, l, 0] = pos[l, 0]
                pos_out[j, l, 1] = pos[l, 1]
        for m in range(K):
            u[m] = u[m] + dt * (lam[m] * u[m] + f[m]) + sigma[m] * mode_noise[j, m]
        u = _mirror_vec(u, pair)
        coeffs_out[j] = u
        ok = True
        for m in range(K):
            if not (np.isfinite(u[m].real) and np.isfinite(u[m].imag)):
                ok = False
                break
        if ok and L > 0:
            for l in range(L):
                if not (np.isfinite(pos[l, 0]) and np.isfinite(pos[l, 1])):
                    ok = False
                    break
        if not ok:
            return j
    return -1
