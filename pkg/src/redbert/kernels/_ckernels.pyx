"""Compiled kernel backend.

Single-pass fused loops for the hot per-row reductions and elementwise
transforms. Signature-compatible with :mod:`redbert.kernels.pykernels`;
row math runs in double precision and is stored back in the input dtype.

Directives are applied per function: the module-wide combination of
boundscheck=False and wraparound=False miscompiles fused-type dispatchers
on the Cython version pinned here.
"""

import numpy as np

cimport cython
from libc.math cimport erf, exp, log, sqrt

BACKEND = "cython"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327

ctypedef fused floating:
    float
    double


def _as2d(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1]), a.shape


# ------------------------------------------------------------------ softmax

def softmax_fwd(x):
    x2, shape = _as2d(x)
    out = np.empty_like(x2)
    _softmax_fwd_impl(x2, out)
    return out.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
def _softmax_fwd_impl(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(<double> x[i, j] - mx)
                out[i, j] = <floating> e
                s += e
            for j in range(d):
                out[i, j] = <floating> (out[i, j] / s)


def softmax_bwd(y, dy):
    y2, shape = _as2d(y)
    dy2, _ = _as2d(dy)
    dx = np.empty_like(y2)
    _softmax_bwd_impl(y2, dy2, dx)
    return dx.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _softmax_bwd_impl(floating[:, ::1] y, floating[:, ::1] dy, floating[:, ::1] dx):
    cdef Py_ssize_t i, j, n = y.shape[0], d = y.shape[1]
    cdef double inner
    with nogil:
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += <double> dy[i, j] * <double> y[i, j]
            for j in range(d):
                dx[i, j] = <floating> (<double> y[i, j] * (<double> dy[i, j] - inner))


def log_softmax_fwd(x):
    x2, shape = _as2d(x)
    out = np.empty_like(x2)
    _log_softmax_fwd_impl(x2, out)
    return out.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _log_softmax_fwd_impl(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                s += exp(<double> x[i, j] - mx)
            s = log(s)
            for j in range(d):
                out[i, j] = <floating> (<double> x[i, j] - mx - s)


def log_softmax_bwd(y, dy):
    y2, shape = _as2d(y)
    dy2, _ = _as2d(dy)
    dx = np.empty_like(y2)
    _log_softmax_bwd_impl(y2, dy2, dx)
    return dx.reshape(shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _log_softmax_bwd_impl(floating[:, ::1] y, floating[:, ::1] dy, floating[:, ::1] dx):
    cdef Py_ssize_t i, j, n = y.shape[0], d = y.shape[1]
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += <double> dy[i, j]
            for j in range(d):
                dx[i, j] = <floating> (<double> dy[i, j] - exp(<double> y[i, j]) * s)


# --------------------------------------------------------------------- gelu

def gelu_fwd(x):
    xc = np.ascontiguousarray(x)
    out = np.empty_like(xc)
    _gelu_fwd_impl(xc.reshape(-1), out.reshape(-1))
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def _gelu_fwd_impl(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = <double> x[i]
            out[i] = <floating> (0.5 * v * (1.0 + erf(v * INV_SQRT2)))


def gelu_bwd(x, dy):
    xc = np.ascontiguousarray(x)
    dyc = np.ascontiguousarray(dy)
    dx = np.empty_like(xc)
    _gelu_bwd_impl(xc.reshape(-1), dyc.reshape(-1), dx.reshape(-1))
    return dx


@cython.boundscheck(False)
@cython.wraparound(False)
def _gelu_bwd_impl(floating[::1] x, floating[::1] dy, floating[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    with nogil:
        for i in range(n):
            v = <double> x[i]
            cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
            pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
            dx[i] = <floating> (<double> dy[i] * (cdf + v * pdf))


# --------------------------------------------------------------- layer norm

def layer_norm_fwd(x, gamma, beta, eps):
    x2, shape = _as2d(x)
    gamma = np.ascontiguousarray(gamma)
    beta = np.ascontiguousarray(beta)
    y = np.empty_like(x2)
    mean = np.empty(x2.shape[0], dtype=x2.dtype)
    rstd = np.empty(x2.shape[0], dtype=x2.dtype)
    _layer_norm_fwd_impl(x2, gamma, beta, float(eps), y, mean, rstd)
    stat_shape = shape[:-1] + (1,)
    return y.reshape(shape), mean.reshape(stat_shape), rstd.reshape(stat_shape)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
def _layer_norm_fwd_impl(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta,
                         double eps, floating[:, ::1] y, floating[::1] mean,
                         floating[::1] rstd):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mu, var, rs, diff
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += <double> x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = <double> x[i, j] - mu
                var += diff * diff
            var /= d
            rs = 1.0 / sqrt(var + eps)
            mean[i] = <floating> mu
            rstd[i] = <floating> rs
            for j in range(d):
                y[i, j] = <floating> ((<double> x[i, j] - mu) * rs * <double> gamma[j]
                                      + <double> beta[j])


def layer_norm_bwd(x, gamma, mean, rstd, dy):
    x2, shape = _as2d(x)
    dy2, _ = _as2d(dy)
    gamma = np.ascontiguousarray(gamma)
    mean_f = np.ascontiguousarray(mean).reshape(-1)
    rstd_f = np.ascontiguousarray(rstd).reshape(-1)
    dx = np.empty_like(x2)
    dgamma = np.zeros(x2.shape[1], dtype=x2.dtype)
    dbeta = np.zeros(x2.shape[1], dtype=x2.dtype)
    _layer_norm_bwd_impl(x2, gamma, mean_f, rstd_f, dy2, dx, dgamma, dbeta)
    return dx.reshape(shape), dgamma, dbeta


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
def _layer_norm_bwd_impl(floating[:, ::1] x, floating[::1] gamma, floating[::1] mean,
                         floating[::1] rstd, floating[:, ::1] dy, floating[:, ::1] dx,
                         floating[::1] dgamma, floating[::1] dbeta):
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double m1, m2, xhat, dxhat, mu, rs
    with nogil:
        for i in range(n):
            mu = <double> mean[i]
            rs = <double> rstd[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (<double> x[i, j] - mu) * rs
                dxhat = <double> dy[i, j] * <double> gamma[j]
                m1 += dxhat
                m2 += dxhat * xhat
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (<double> x[i, j] - mu) * rs
                dxhat = <double> dy[i, j] * <double> gamma[j]
                dx[i, j] = <floating> (rs * (dxhat - m1 - xhat * m2))
                dgamma[j] += <floating> (<double> dy[i, j] * xhat)
                dbeta[j] += dy[i, j]


# --------------------------------------------------------------------- adam

def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    if not (param.flags.c_contiguous and grad.flags.c_contiguous
            and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update requires C-contiguous buffers")
    bc1 = 1.0 - float(beta1) ** step
    bc2 = 1.0 - float(beta2) ** step
    _adam_update_impl(param.reshape(-1), grad.reshape(-1), m.reshape(-1),
                      v.reshape(-1), float(lr), float(beta1), float(beta2),
                      float(eps), bc1, bc2)


@cython.boundscheck(False)
@cython.wraparound(False)
@cython.cdivision(True)
def _adam_update_impl(floating[::1] param, floating[::1] grad, floating[::1] m,
                      floating[::1] v, double lr, double beta1, double beta2,
                      double eps, double bc1, double bc2):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = <double> grad[i]
            mi = beta1 * <double> m[i] + (1.0 - beta1) * g
            vi = beta2 * <double> v[i] + (1.0 - beta2) * g * g
            m[i] = <floating> mi
            v[i] = <floating> vi
            param[i] = <floating> (<double> param[i]
                                   - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
