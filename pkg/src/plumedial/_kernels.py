"""Jitted photon-transport kernels (forward tracing with next-event estimation).

Units use c = 1, so times are path lengths in metres.  Every path owns a
counter-based random stream keyed by its global index, and the first
free-flight draw is stratified within the path's batch; the batch layout
depends only on the path count, so tallies never depend on thread count.  Random slots per vertex ``k``:
``4k`` free flight, ``4k+1`` scattering cosine, ``4k+2`` azimuth,
``4k+3`` roulette.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .rng import subkey, uniform

SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
INV_4PI = 1.0 / (4.0 * math.pi)


@njit(inline="always", cache=True)
def erf_diff(a, b):
    if a >= 0.0 and b >= 0.0:
        return math.erfc(a) - math.erfc(b)
    if a <= 0.0 and b <= 0.0:
        return math.erfc(-b) - math.erfc(-a)
    return math.erf(b) - math.erf(a)


@njit(cache=True)
def field_at(x, const, centers, widths, weights):
    val = const
    for j in range(widths.shape[0]):
        d0 = x[0] - centers[j, 0]
        d1 = x[1] - centers[j, 1]
        d2 = x[2] - centers[j, 2]
        val += weights[j] * math.exp(-(d0 * d0 + d1 * d1 + d2 * d2) / (2.0 * widths[j] ** 2))
    return val


@njit(cache=True)
def segment_integral(o, d, length, const, centers, widths, weights):
    """int_0^length of the kernel field along o + s d."""
    total = const * length
    for j in range(widths.shape[0]):
        h = widths[j]
        r0 = centers[j, 0] - o[0]
        r1 = centers[j, 1] - o[1]
        r2 = centers[j, 2] - o[2]
        s_star = r0 * d[0] + r1 * d[1] + r2 * d[2]
        D2 = r0 * r0 + r1 * r1 + r2 * r2 - s_star * s_star
        if D2 < 0.0:
            D2 = 0.0
        if D2 > 64.0 * h * h or s_star < -8.0 * h or s_star > length + 8.0 * h:
            continue
        sq = math.sqrt(2.0) * h
        total += weights[j] * math.exp(-D2 / (2.0 * h * h)) * h * SQRT_HALF_PI * erf_diff(-s_star / sq, (length - s_star) / sq)
    return total


@njit(cache=True)
def segment_partials(o, d, length, centers, widths, weights, out):
    """Add d/d(w, m, h) of int_0^length u to ``out`` (flattened, 5 per kernel)."""
    for j in range(widths.shape[0]):
        h = widths[j]
        h2 = h * h
        r0 = centers[j, 0] - o[0]
        r1 = centers[j, 1] - o[1]
        r2 = centers[j, 2] - o[2]
        s_star = r0 * d[0] + r1 * d[1] + r2 * d[2]
        p0 = r0 - s_star * d[0]
        p1 = r1 - s_star * d[1]
        p2 = r2 - s_star * d[2]
        D2 = p0 * p0 + p1 * p1 + p2 * p2
        if D2 > 1600.0 * h2:
            continue
        E = math.exp(-D2 / (2.0 * h2))
        a = -s_star
        b = length - s_star
        sq = math.sqrt(2.0) * h
        I0 = E * h * SQRT_HALF_PI * erf_diff(a / sq, b / sq)
        ga = math.exp(-a * a / (2.0 * h2))
        gb = math.exp(-b * b / (2.0 * h2))
        I1 = E * h2 * (ga - gb)
        I2 = h2 * I0 - h2 * E * (b * gb - a * ga)
        w = weights[j]
        k = 5 * j
        out[k] += I0
        out[k + 1] += w / h2 * (I1 * d[0] - I0 * p0)
        out[k + 2] += w / h2 * (I1 * d[1] - I0 * p1)
        out[k + 3] += w / h2 * (I1 * d[2] - I0 * p2)
        out[k + 4] += w / (h2 * h) * (D2 * I0 + I2)


@njit(cache=True)
def vertex_partials(x, inv_sigma, centers, widths, weights, out):
    """Add inv_sigma * d u(x) / d(w, m, h) to ``out``."""
    for j in range(widths.shape[0]):
        h2 = widths[j] ** 2
        d0 = x[0] - centers[j, 0]
        d1 = x[1] - centers[j, 1]
        d2 = x[2] - centers[j, 2]
        r2 = d0 * d0 + d1 * d1 + d2 * d2
        e = math.exp(-r2 / (2.0 * h2)) * inv_sigma
        w = weights[j]
        k = 5 * j
        out[k] += e
        out[k + 1] += w * e / h2 * d0
        out[k + 2] += w * e / h2 * d1
        out[k + 3] += w * e / h2 * d2
        out[k + 4] += w * e * r2 / (h2 * widths[j])


@njit(inline="always", cache=True)
def hg_cos(g, u):
    if abs(g) < 1e-6:
        return 2.0 * u - 1.0
    frac = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    mu = (1.0 + g * g - frac * frac) / (2.0 * g)
    return min(1.0, max(-1.0, mu))


@njit(inline="always", cache=True)
def hg_density(mu, g):
    return (1.0 - g * g) * INV_4PI / (1.0 + g * g - 2.0 * g * mu) ** 1.5


@njit(cache=True)
def rotate(d, mu, phi):
    """Direction at polar cosine ``mu`` / azimuth ``phi`` about unit vector ``d`` (in place)."""
    st = math.sqrt(max(0.0, 1.0 - mu * mu))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(d[2]) > 0.99999:
        sgn = 1.0 if d[2] > 0 else -1.0
        d[0] = st * cp
        d[1] = st * sp
        d[2] = sgn * mu
        return
    den = math.sqrt(1.0 - d[2] * d[2])
    x = st * (d[0] * d[2] * cp - d[1] * sp) / den + d[0] * mu
    y = st * (d[1] * d[2] * cp + d[0] * sp) / den + d[1] * mu
    z = -st * cp * den + d[2] * mu
    n = math.sqrt(x * x + y * y + z * z)
    d[0] = x / n
    d[1] = y / n
    d[2] = z / n


@njit(cache=True)
def optical_depth(o, d, s, sig_amb, c_s, const, centers, widths, weights):
    if c_s == 0.0 or widths.shape[0] == 0:
        return (sig_amb + c_s * const) * s
    return sig_amb * s + c_s * segment_integral(o, d, s, const, centers, widths, weights)


@njit(cache=True)
def sample_distance(o, d, u, s_a, s_b, sig_amb, c_s, const, centers, widths, weights):
    """Free flight restricted to [s_a, s_b]: returns (s, probability of that interval).

    Returns (-1, 0) when the interval carries no collision probability.
    """
    tau_a = optical_depth(o, d, s_a, sig_amb, c_s, const, centers, widths, weights)
    tau_b = optical_depth(o, d, s_b, sig_amb, c_s, const, centers, widths, weights) if s_b < np.inf else np.inf
    span = -math.expm1(-(tau_b - tau_a)) if tau_b < np.inf else 1.0
    prob = math.exp(-tau_a) * span
    if not prob > 0.0:
        return -1.0, 0.0
    target = tau_a - math.log1p(-u * span)
    sig0 = sig_amb + c_s * const
    if c_s == 0.0 or widths.shape[0] == 0:
        s = target / sig0
        return min(max(s, s_a), s_b), prob
    lo = s_a
    hi = s_b
    s = s_a + (target - tau_a) / sig0 if sig0 > 0.0 else 0.5 * (s_a + s_b)
    if not lo < s < hi:
        s = 0.5 * (lo + hi) if hi < np.inf else lo + 1.0
    x = np.empty(3)
    for _ in range(200):
        f = optical_depth(o, d, s, sig_amb, c_s, const, centers, widths, weights) - target
        if f > 0.0:
            hi = s
        else:
            lo = s
        if abs(f) <= 1e-13 * (1.0 + target):
            break
        for i in range(3):
            x[i] = o[i] + s * d[i]
        fp = sig_amb + c_s * field_at(x, const, centers, widths, weights)
        step = s - f / fp if fp > 0.0 else -1.0
        if lo < step < hi:
            s = step
        elif hi < np.inf:
            s = 0.5 * (lo + hi)
        else:
            s = 2.0 * s + 1.0
        if hi - lo <= 1e-12 * (1.0 + abs(hi)):
            break
    return s, prob


@njit(nogil=True, cache=True)
def trace_batch(
    key, first_path, n_paths, xd, v, cos_lo, cos_hi, t0, dt, nbins, kmax,
    sig_s_amb, sig_a_amb, c_s, C_dial, C_amb, g, u_const, centers, widths, weights,
    probe_const, probe_centers, probe_widths, probe_weights,
    r_min, roulette, want_grad, grad_kmin, tally, grad, probe,
):
    """Trace ``n_paths`` paths starting at global index ``first_path``; accumulate into tallies.

    tally[wl, aperture, order, bin] (wl 0 = off, 1 = on); grad[wl, aperture,
    bin, param] summed over orders >= grad_kmin (1-based) with params
    (w, mx, my, mz, h) per kernel then c_s; and
    probe[aperture, order, bin] = off contribution x path integral of the probe field.
    """
    n_ap = cos_lo.shape[0]
    nk = widths.shape[0]
    n_par = 5 * nk + 1
    t_end = t0 + nbins * dt
    has_probe = probe_widths.shape[0] > 0 or probe_const != 0.0
    pos = np.empty(3)
    dirn = np.empty(3)
    ret = np.empty(3)
    A = np.zeros(n_par)
    B = np.zeros(n_par)
    Bret = np.zeros(n_par)
    score_off = np.zeros(n_par)
    accept = np.zeros(n_ap, dtype=np.bool_)
    for ip in range(n_paths):
        pkey = subkey(key, first_path + ip)
        pos[:] = xd
        dirn[:] = v
        ell = 0.0
        w_off = 1.0
        w_on = 1.0
        q_path = 0.0
        if want_grad:
            A[:] = 0.0
            B[:] = 0.0
        for k in range(kmax):
            # free flight limited to the time window (ellipsoids with foci pos, xd);
            # the last vertex must also arrive after t0
            s_max = np.inf
            if dirn[2] < 0.0:
                s_max = pos[2] / -dirn[2]
            p0 = pos[0] - xd[0]
            p1 = pos[1] - xd[1]
            p2 = pos[2] - xd[2]
            pp = p0 * p0 + p1 * p1 + p2 * p2
            pd = p0 * dirn[0] + p1 * dirn[1] + p2 * dirn[2]
            rem = t_end - ell
            if rem <= 0.0 or rem * rem <= pp:
                break
            s_max = min(s_max, (rem * rem - pp) / (2.0 * (pd + rem)))
            s_min = 0.0
            rem0 = t0 - ell
            if k == kmax - 1 and rem0 * rem0 > pp and rem0 > 0.0:
                s_min = (rem0 * rem0 - pp) / (2.0 * (pd + rem0))
            if not s_min < s_max:
                break
            u_ff = uniform(pkey, 4 * k)
            if k == 0:
                u_ff = (ip + u_ff) / n_paths  # stratified within the batch
            s, prob = sample_distance(
                pos, dirn, u_ff, s_min, s_max, sig_s_amb, c_s, u_const, centers, widths, weights
            )
            if s < 0.0:
                break
            w_off *= prob
            w_on *= prob
            U = segment_integral(pos, dirn, s, u_const, centers, widths, weights)
            w_off *= math.exp(-sig_a_amb * s)
            w_on *= math.exp(-(sig_a_amb + C_amb) * s - C_dial * U)
            if want_grad:
                segment_partials(pos, dirn, s, centers, widths, weights, B)
                B[n_par - 1] += U
            if has_probe:
                q_path += segment_integral(pos, dirn, s, probe_const, probe_centers, probe_widths, probe_weights)
            for i in range(3):
                pos[i] += s * dirn[i]
            ell += s
            u_x = field_at(pos, u_const, centers, widths, weights)
            sig_x = sig_s_amb + c_s * u_x
            if want_grad:
                vertex_partials(pos, 1.0 / sig_x, centers, widths, weights, A)
                A[n_par - 1] += u_x / sig_x

            # next-event connection to the detector
            for i in range(3):
                ret[i] = xd[i] - pos[i]
            r = math.sqrt(ret[0] ** 2 + ret[1] ** 2 + ret[2] ** 2)
            t_arr = ell + r
            if r >= r_min and t0 <= t_arr < t_end:
                cosang = -(ret[0] * v[0] + ret[1] * v[1] + ret[2] * v[2]) / r
                any_acc = False
                for a in range(n_ap):
                    accept[a] = cos_lo[a] <= cosang <= cos_hi[a]
                    any_acc = any_acc or accept[a]
                if any_acc:
                    for i in range(3):
                        ret[i] /= r
                    mu = dirn[0] * ret[0] + dirn[1] * ret[1] + dirn[2] * ret[2]
                    fp = hg_density(mu, g)
                    Ur = segment_integral(pos, ret, r, u_const, centers, widths, weights)
                    tau_off = (sig_s_amb + sig_a_amb) * r + c_s * Ur
                    tau_on = tau_off + C_amb * r + C_dial * Ur
                    base = fp / (r * r * dt)
                    c_off = w_off * base * math.exp(-tau_off)
                    c_on = w_on * base * math.exp(-tau_on)
                    jb = int((t_arr - t0) / dt)
                    if jb >= nbins:
                        jb = nbins - 1
                    qtot = 0.0
                    if has_probe:
                        qtot = q_path + segment_integral(pos, ret, r, probe_const, probe_centers, probe_widths, probe_weights)
                    if want_grad and k + 1 >= grad_kmin:
                        Bret[:] = 0.0
                        segment_partials(pos, ret, r, centers, widths, weights, Bret)
                        Bret[n_par - 1] = Ur
                        for p in range(n_par - 1):
                            score_off[p] = c_s * (A[p] - B[p] - Bret[p])
                        score_off[n_par - 1] = A[n_par - 1] - B[n_par - 1] - Bret[n_par - 1]
                    for a in range(n_ap):
                        if not accept[a]:
                            continue
                        tally[0, a, k, jb] += c_off
                        tally[1, a, k, jb] += c_on
                        if has_probe:
                            probe[a, k, jb] += c_off * qtot
                        if want_grad and k + 1 >= grad_kmin:
                            for p in range(n_par - 1):
                                grad[0, a, jb, p] += c_off * score_off[p]
                                grad[1, a, jb, p] += c_on * (score_off[p] - C_dial * (B[p] + Bret[p]))
                            grad[0, a, jb, n_par - 1] += c_off * score_off[n_par - 1]
                            grad[1, a, jb, n_par - 1] += c_on * score_off[n_par - 1]

            if w_off < roulette:
                if uniform(pkey, 4 * k + 3) < 0.1:
                    w_off *= 10.0
                    w_on *= 10.0
                else:
                    break
            mu_s = hg_cos(g, uniform(pkey, 4 * k + 1))
            rotate(dirn, mu_s, 2.0 * math.pi * uniform(pkey, 4 * k + 2))
