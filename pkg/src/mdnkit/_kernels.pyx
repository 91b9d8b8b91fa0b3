# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Mirrors ``_kernels_py`` signature for signature."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, tanh, fabs, expm1, erf, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453
cdef double EXP_ZERO = -746.0   # exp(x) == 0.0 exactly below this


cdef inline double _softplus(double z) nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


# ----------------------------------------------------------------- MDN loss
def mdn_nll(const double[:, ::1] raw, const double[:, ::1] y, int K, int d, double eps, bint elu=False):
    cdef Py_ssize_t B = raw.shape[0], P = raw.shape[1]
    cdef Py_ssize_t b, k, j, kd, off_mu = K, off_s = K + K * d
    out_nll = np.empty(B)
    out_grad = np.empty((B, P))
    cdef double[::1] nll = out_nll
    cdef double[:, ::1] grad = out_grad
    work = np.empty((3, K))
    cdef double[:, ::1] w = work
    sw = np.empty((3, K * d))
    cdef double[:, ::1] sv = sw
    cdef double zmax, sez, fmax, sef, acc, s, u, zs, lse, e, half_d = 0.5 * d * LOG_2PI
    with nogil:
        for b in range(B):
            zmax = raw[b, 0]
            for k in range(1, K):
                if raw[b, k] > zmax:
                    zmax = raw[b, k]
            sez = 0.0
            for k in range(K):
                w[0, k] = exp(raw[b, k] - zmax)
                sez += w[0, k]
            lse = zmax + log(sez)
            fmax = -INFINITY
            for k in range(K):
                acc = 0.0
                for j in range(d):
                    kd = k * d + j
                    zs = raw[b, off_s + kd]
                    if elu:
                        if zs > 0:
                            s = zs + 1.0 + eps
                            sv[1, kd] = 1.0
                        else:
                            e = exp(zs)
                            s = expm1(zs) + 1.0 + eps
                            sv[1, kd] = e
                    else:
                        if zs > 0:
                            e = exp(-zs)
                            s = zs + log1p(e) + eps
                            sv[1, kd] = 1.0 / (1.0 + e)
                        else:
                            e = exp(zs)
                            s = log1p(e) + eps
                            sv[1, kd] = e / (1.0 + e)
                    u = (y[b, j] - raw[b, off_mu + kd]) / s
                    sv[0, kd] = s
                    sv[2, kd] = u
                    acc += -0.5 * u * u - log(s)
                w[1, k] = raw[b, k] - lse + acc - half_d
                if w[1, k] > fmax:
                    fmax = w[1, k]
            sef = 0.0
            for k in range(K):
                w[2, k] = exp(w[1, k] - fmax)
                sef += w[2, k]
            nll[b] = -(fmax + log(sef))
            for k in range(K):
                w[2, k] = w[2, k] / sef
                grad[b, k] = w[0, k] / sez - w[2, k]
                for j in range(d):
                    kd = k * d + j
                    s = sv[0, kd]
                    u = sv[2, kd]
                    grad[b, off_mu + kd] = -w[2, k] * u / s
                    grad[b, off_s + kd] = -w[2, k] * (u * u - 1.0) / s * sv[1, kd]
    return out_nll, out_grad


# ----------------------------------------------------------------- MMD sums
def mmd_terms(const double[:, ::1] X, const double[:, ::1] Y, scales, int block=1024):
    return (rbf_sums(X, X, scales, True), rbf_sums(X, Y, scales, False), rbf_sums(Y, Y, scales, True))


def rbf_sums(const double[:, ::1] A, const double[:, ::1] B, scales, bint same):
    """Sum of ``exp(-|a-b|^2 / (2 s^2))`` per scale; off-diagonal when ``same``.

    Scales are visited from widest to narrowest so a pair can stop as soon as
    its exponent drops below the point where ``exp`` returns exactly 0.
    """
    sc = np.ascontiguousarray(scales, dtype=np.float64)
    order = np.argsort(-sc, kind="stable")
    cdef double[::1] coef = np.ascontiguousarray(-0.5 / (sc[order] * sc[order]))
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], dim = A.shape[1], S = coef.shape[0]
    cdef Py_ssize_t i, j, c, s, jstart
    acc = np.zeros(S)
    cdef double[::1] out = acc
    cdef double d2, t, e, mult
    mult = 2.0 if same else 1.0
    with nogil:
        for i in range(na):
            jstart = i + 1 if same else 0
            for j in range(jstart, nb):
                d2 = 0.0
                for c in range(dim):
                    t = A[i, c] - B[j, c]
                    d2 += t * t
                for s in range(S):
                    e = coef[s] * d2
                    if e < EXP_ZERO:
                        break
                    out[s] += exp(e)
        for s in range(S):
            out[s] *= mult
    res = np.empty(S)
    res[order] = acc
    return res


# ---------------------------------------------------------------- ODE kernels
def euler_saddle(x0, r, double dt, int steps, double clip, keep):
    cdef double[::1] x = np.array(x0, dtype=np.float64)
    cdef const double[::1] rr = np.ascontiguousarray(r, dtype=np.float64)
    cdef const long[::1] kp = np.ascontiguousarray(keep, dtype=np.int64)
    cdef Py_ssize_t N = x.shape[0], nk = kp.shape[0], i, n, j = 0
    res = np.empty((N, nk))
    cdef double[:, ::1] out = res
    cdef double v
    with nogil:
        for n in range(steps + 1):
            if j < nk and kp[j] == n:
                for i in range(N):
                    out[i, j] = x[i]
                j += 1
            if n == steps:
                break
            for i in range(N):
                v = x[i] + dt * (rr[i] + x[i] * x[i])
                if v < -clip:
                    v = -clip
                if v > clip:
                    v = clip
                x[i] = v
    return res


def euler_gravity(s0, active, centers, double gm, double gamma, double soft, double dt, int steps, keep):
    cdef double[:, ::1] s = np.array(s0, dtype=np.float64)
    cdef const double[:, ::1] act = np.ascontiguousarray(active, dtype=np.float64)
    cdef const double[:, ::1] cen = np.ascontiguousarray(centers, dtype=np.float64)
    cdef const long[::1] kp = np.ascontiguousarray(keep, dtype=np.int64)
    cdef Py_ssize_t N = s.shape[0], nc = cen.shape[0], nk = kp.shape[0], i, n, c, j = 0
    res = np.empty((N, nk, 4))
    cdef double[:, :, ::1] out = res
    cdef double x, y, vx, vy, ax, ay, dx, dy, d2, w, speed
    with nogil:
        for n in range(steps + 1):
            if j < nk and kp[j] == n:
                for i in range(N):
                    for c in range(4):
                        out[i, j, c] = s[i, c]
                j += 1
            if n == steps:
                break
            for i in range(N):
                x = s[i, 0]
                y = s[i, 1]
                vx = s[i, 2]
                vy = s[i, 3]
                ax = 0.0
                ay = 0.0
                for c in range(nc):
                    dx = x - cen[c, 0]
                    dy = y - cen[c, 1]
                    d2 = dx * dx + dy * dy
                    if d2 < soft:
                        d2 = soft
                    w = act[i, c] * gm
                    ax = ax - w * dx / d2
                    ay = ay - w * dy / d2
                speed = sqrt(vx * vx + vy * vy)
                ax = ax - gamma * speed * vx
                ay = ay - gamma * speed * vy
                s[i, 0] = x + dt * vx
                s[i, 1] = y + dt * vy
                s[i, 2] = vx + dt * ax
                s[i, 3] = vy + dt * ay
    return res


cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0, A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0, A63 = 46732.0 / 5247.0, A64 = 49.0 / 176.0
cdef double A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0, B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0


cdef inline void _lorenz(double* s, double* out, double sigma, double rho, double beta) nogil:
    out[0] = sigma * (s[1] - s[0])
    out[1] = s[0] * (rho - s[2]) - s[1]
    out[2] = s[0] * s[1] - beta * s[2]


def dopri5_lorenz(s0, double sigma, double rho, double beta, double dt, int steps, keep):
    cdef double[:, ::1] st = np.array(s0, dtype=np.float64)
    cdef const long[::1] kp = np.ascontiguousarray(keep, dtype=np.int64)
    cdef Py_ssize_t N = st.shape[0], nk = kp.shape[0], i, n, c, j = 0
    res = np.empty((N, nk, 3))
    cdef double[:, :, ::1] out = res
    cdef double k1[3]
    cdef double k2[3]
    cdef double k3[3]
    cdef double k4[3]
    cdef double k5[3]
    cdef double k6[3]
    cdef double tmp[3]
    cdef double y[3]
    with nogil:
        for n in range(steps + 1):
            if j < nk and kp[j] == n:
                for i in range(N):
                    for c in range(3):
                        out[i, j, c] = st[i, c]
                j += 1
            if n == steps:
                break
            for i in range(N):
                for c in range(3):
                    y[c] = st[i, c]
                _lorenz(y, k1, sigma, rho, beta)
                for c in range(3):
                    tmp[c] = y[c] + dt * (A21 * k1[c])
                _lorenz(tmp, k2, sigma, rho, beta)
                for c in range(3):
                    tmp[c] = y[c] + dt * (A31 * k1[c] + A32 * k2[c])
                _lorenz(tmp, k3, sigma, rho, beta)
                for c in range(3):
                    tmp[c] = y[c] + dt * (A41 * k1[c] + A42 * k2[c] + A43 * k3[c])
                _lorenz(tmp, k4, sigma, rho, beta)
                for c in range(3):
                    tmp[c] = y[c] + dt * (A51 * k1[c] + A52 * k2[c] + A53 * k3[c] + A54 * k4[c])
                _lorenz(tmp, k5, sigma, rho, beta)
                for c in range(3):
                    tmp[c] = y[c] + dt * (A61 * k1[c] + A62 * k2[c] + A63 * k3[c] + A64 * k4[c] + A65 * k5[c])
                _lorenz(tmp, k6, sigma, rho, beta)
                for c in range(3):
                    st[i, c] = y[c] + dt * (B1 * k1[c] + B3 * k3[c] + B4 * k4[c] + B5 * k5[c] + B6 * k6[c])
    return res


# ---------------------------------------------------------------- GRU sequence
cdef inline void _mm(char ta, char tb, int m, int n, int k, double* A, int lda,
                     double* B, int ldb, double beta, double* C, int ldc) nogil:
    """Row-major ``C = op(A) @ op(B) + beta*C`` through column-major dgemm."""
    cdef double one = 1.0
    dgemm(&tb, &ta, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &ldc)


def gru_forward(const double[:, :, ::1] gi, h0, Wh, bh, bin_):
    cdef Py_ssize_t T = gi.shape[0], B = gi.shape[1], H3 = gi.shape[2], H = H3 // 3
    cdef double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    cdef const double[::1] bhv = np.ascontiguousarray(bh, dtype=np.float64)
    cdef const double[::1] binv = np.ascontiguousarray(bin_, dtype=np.float64)
    hs_a = np.empty((T + 1, B, H))
    rs_a = np.empty((T, B, H))
    zs_a = np.empty((T, B, H))
    ns_a = np.empty((T, B, H))
    ghn_a = np.empty((T, B, H))
    gh_a = np.empty((B, H3))
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] rs = rs_a
    cdef double[:, :, ::1] zs = zs_a
    cdef double[:, :, ::1] ns = ns_a
    cdef double[:, :, ::1] ghn = ghn_a
    cdef double[:, ::1] gh = gh_a
    hs_a[0] = h0
    cdef Py_ssize_t t, b, i
    cdef double r, z, nn
    with nogil:
        for t in range(T):
            for b in range(B):
                for i in range(H3):
                    gh[b, i] = bhv[i]
            _mm(b'N', b'N', <int>B, <int>H3, <int>H, &hs[t, 0, 0], <int>H, &wh[0, 0], <int>H3,
                1.0, &gh[0, 0], <int>H3)
            for b in range(B):
                for i in range(H):
                    r = _sigmoid(gi[t, b, i] + gh[b, i])
                    z = _sigmoid(gi[t, b, H + i] + gh[b, H + i])
                    nn = tanh(gi[t, b, 2 * H + i] + binv[i] + r * gh[b, 2 * H + i])
                    rs[t, b, i] = r
                    zs[t, b, i] = z
                    ns[t, b, i] = nn
                    ghn[t, b, i] = gh[b, 2 * H + i]
                    hs[t + 1, b, i] = (1.0 - z) * hs[t, b, i] + z * nn
    return hs_a, (rs_a, zs_a, ns_a, ghn_a)


def gru_backward(const double[:, :, ::1] dhs, const double[:, :, ::1] hs, cache, Wh):
    rs_a, zs_a, ns_a, ghn_a = cache
    cdef const double[:, :, ::1] rs = rs_a
    cdef const double[:, :, ::1] zs = zs_a
    cdef const double[:, :, ::1] ns = ns_a
    cdef const double[:, :, ::1] ghn = ghn_a
    cdef double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    cdef Py_ssize_t T = dhs.shape[0], B = dhs.shape[1], H = dhs.shape[2], H3 = 3 * H
    dgi_a = np.empty((T, B, H3))
    dgh_a = np.empty((T, B, H3))
    carry_a = np.zeros((B, H))
    dh_a = np.empty((B, H))
    cdef double[:, :, ::1] dgi = dgi_a
    cdef double[:, :, ::1] dgh = dgh_a
    cdef double[:, ::1] carry = carry_a
    cdef double[:, ::1] dh = dh_a
    cdef Py_ssize_t t, b, i
    cdef double r, z, nn, hp, g, dn_pre, dz_pre, dr_pre
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for i in range(H):
                    g = dhs[t, b, i] + carry[b, i]
                    r = rs[t, b, i]
                    z = zs[t, b, i]
                    nn = ns[t, b, i]
                    hp = hs[t, b, i]
                    dn_pre = g * z * (1.0 - nn * nn)
                    dz_pre = g * (nn - hp) * z * (1.0 - z)
                    dr_pre = dn_pre * ghn[t, b, i] * r * (1.0 - r)
                    dgi[t, b, i] = dr_pre
                    dgi[t, b, H + i] = dz_pre
                    dgi[t, b, 2 * H + i] = dn_pre
                    dgh[t, b, i] = dr_pre
                    dgh[t, b, H + i] = dz_pre
                    dgh[t, b, 2 * H + i] = dn_pre * r
                    carry[b, i] = g * (1.0 - z)
            _mm(b'N', b'T', <int>B, <int>H, <int>H3, &dgh[t, 0, 0], <int>H3, &wh[0, 0], <int>H3,
                1.0, &carry[0, 0], <int>H)
    return dgi_a, dgh_a, carry_a


# ---------------------------------------------------------------- optimizer
def adamw_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v, double lr,
                 double b1, double b2, double c1, double c2, double eps, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi, upd
    with nogil:
        for i in range(n):
            mi = b1 * m[i] + (1.0 - b1) * g[i]
            vi = b2 * v[i] + (1.0 - b2) * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            upd = (mi / c1) / (sqrt(vi / c2) + eps)
            if wd != 0.0:
                upd = upd + wd * p[i]
            p[i] = p[i] - lr * upd


# -------------------------------------------------------------------- GeLU
cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_a = np.empty(n)
    cdf_a = np.empty(n)
    cdef double[::1] out = out_a
    cdef double[::1] cdf = cdf_a
    cdef double c
    with nogil:
        for i in range(n):
            c = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
            cdf[i] = c
            out[i] = x[i] * c
    return out_a, cdf_a


def gelu_bwd(const double[::1] x, const double[::1] cdf, const double[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(n):
            out[i] = g[i] * (cdf[i] + x[i] * (INV_SQRT_2PI * exp(-0.5 * x[i] * x[i])))
    return out_a
