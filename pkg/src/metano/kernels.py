"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``METANO_DISABLE_NUMBA`` is
unset (or ``0``). Both paths are always importable as ``numpy_impl`` and
``numba_impl`` so tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

from metano.errors import SingularSystemError

PIVOT_TOL = 1e-14
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-12


# ---------------------------------------------------------------- numpy path

def _spectral_mix_np(x, r_re, r_im):
    # x: (N, K, din) complex; r: (K, dout, din) -> (N, K, dout)
    r = r_re + 1j * r_im
    return np.einsum("koi,nki->nko", r, x, optimize=True)


def _spectral_mix_adjoint_np(ybar, x, r_re, r_im):
    r = r_re + 1j * r_im
    xbar = np.einsum("koi,nko->nki", np.conj(r), ybar, optimize=True)
    rbar = np.einsum("nko,nki->koi", ybar, np.conj(x), optimize=True)
    return xbar, rbar.real.copy(), rbar.imag.copy()


def _thomas_np(lower, diag, upper, rhs):
    """Solve a tridiagonal system for each column of ``rhs`` (shape (n, B))."""
    n = diag.shape[0]
    cp = np.empty(n)
    dp = np.empty_like(rhs)
    piv = diag[0]
    if abs(piv) < PIVOT_TOL:
        raise SingularSystemError("tridiagonal pivot below tolerance at row 0")
    cp[0] = upper[0] / piv if n > 1 else 0.0
    dp[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - lower[i - 1] * cp[i - 1]
        if abs(piv) < PIVOT_TOL:
            raise SingularSystemError(f"tridiagonal pivot below tolerance at row {i}")
        if i < n - 1:
            cp[i] = upper[i] / piv
        dp[i] = (rhs[i] - lower[i - 1] * dp[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        dp[i] = dp[i] - cp[i] * dp[i + 1]
    return dp


def _cubic_solve_np(r):
    """Root of u + u**3 = r elementwise; returns (u, number of bisection fallbacks)."""
    r = np.asarray(r, dtype=np.float64)
    u = r.copy()
    for _ in range(NEWTON_MAX_ITER):
        res = u + u**3 - r
        if np.all(np.abs(res) <= NEWTON_TOL):
            return u, 0
        u = u - res / (1.0 + 3.0 * u**2)
    res = u + u**3 - r
    bad = ~(np.abs(res) <= NEWTON_TOL)
    if np.any(bad):
        u[bad] = _bisect_np(r[bad])
    return u, int(np.count_nonzero(bad))


def _bisect_np(r):
    # |u| <= min(|r|, |r|**(1/3)) brackets the unique root
    width = np.minimum(np.abs(r), np.cbrt(np.abs(r)))
    lo, hi = -width, width.copy()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pos = mid + mid**3 - r > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return 0.5 * (lo + hi)


numpy_impl = SimpleNamespace(
    spectral_mix=_spectral_mix_np,
    spectral_mix_adjoint=_spectral_mix_adjoint_np,
    thomas=_thomas_np,
    cubic_solve=_cubic_solve_np,
)


# ---------------------------------------------------------------- numba path

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def spectral_mix(x, r_re, r_im):
        n_s, n_k, d_in = x.shape
        d_out = r_re.shape[1]
        out = np.empty((n_s, n_k, d_out), dtype=np.complex128)
        for n in range(n_s):
            for k in range(n_k):
                for o in range(d_out):
                    acc = 0j
                    for i in range(d_in):
                        acc += complex(r_re[k, o, i], r_im[k, o, i]) * x[n, k, i]
                    out[n, k, o] = acc
        return out

    @njit(cache=True)
    def spectral_mix_adjoint(ybar, x, r_re, r_im):
        n_s, n_k, d_in = x.shape
        d_out = r_re.shape[1]
        xbar = np.zeros((n_s, n_k, d_in), dtype=np.complex128)
        g_re = np.zeros((n_k, d_out, d_in))
        g_im = np.zeros((n_k, d_out, d_in))
        for n in range(n_s):
            for k in range(n_k):
                for o in range(d_out):
                    yb = ybar[n, k, o]
                    for i in range(d_in):
                        xbar[n, k, i] += complex(r_re[k, o, i], -r_im[k, o, i]) * yb
                        p = yb * x[n, k, i].conjugate()
                        g_re[k, o, i] += p.real
                        g_im[k, o, i] += p.imag
        return xbar, g_re, g_im

    @njit(cache=True)
    def _thomas_core(lower, diag, upper, rhs, tol):
        n, m = rhs.shape
        cp = np.empty(n)
        dp = np.empty((n, m))
        piv = diag[0]
        if abs(piv) < tol:
            return dp, 0
        cp[0] = upper[0] / piv if n > 1 else 0.0
        for j in range(m):
            dp[0, j] = rhs[0, j] / piv
        for i in range(1, n):
            piv = diag[i] - lower[i - 1] * cp[i - 1]
            if abs(piv) < tol:
                return dp, i
            if i < n - 1:
                cp[i] = upper[i] / piv
            for j in range(m):
                dp[i, j] = (rhs[i, j] - lower[i - 1] * dp[i - 1, j]) / piv
        for i in range(n - 2, -1, -1):
            for j in range(m):
                dp[i, j] -= cp[i] * dp[i + 1, j]
        return dp, -1

    def thomas(lower, diag, upper, rhs):
        squeeze = rhs.ndim == 1
        rhs2 = np.ascontiguousarray(rhs.reshape(rhs.shape[0], -1), dtype=np.float64)
        out, bad_row = _thomas_core(
            np.ascontiguousarray(lower, dtype=np.float64),
            np.ascontiguousarray(diag, dtype=np.float64),
            np.ascontiguousarray(upper, dtype=np.float64),
            rhs2,
            PIVOT_TOL,
        )
        if bad_row >= 0:
            raise SingularSystemError(f"tridiagonal pivot below tolerance at row {bad_row}")
        return out[:, 0] if squeeze else out.reshape(rhs.shape)

    @njit(cache=True)
    def _cubic_core(r, max_iter, tol):
        u = np.empty_like(r)
        fallbacks = 0
        for j in range(r.size):
            rj = r[j]
            x = rj
            ok = False
            for _ in range(max_iter):
                res = x + x * x * x - rj
                if abs(res) <= tol:
                    ok = True
                    break
                x -= res / (1.0 + 3.0 * x * x)
            if not ok and abs(x + x * x * x - rj) <= tol:
                ok = True
            if not ok:
                fallbacks += 1
                w = min(abs(rj), abs(rj) ** (1.0 / 3.0))
                lo, hi = -w, w
                for _ in range(200):
                    mid = 0.5 * (lo + hi)
                    if mid + mid * mid * mid - rj > 0.0:
                        hi = mid
                    else:
                        lo = mid
                x = 0.5 * (lo + hi)
            u[j] = x
        return u, fallbacks

    def cubic_solve(r):
        r = np.asarray(r, dtype=np.float64)
        u, fallbacks = _cubic_core(np.ascontiguousarray(r).ravel(), NEWTON_MAX_ITER, NEWTON_TOL)
        return u.reshape(r.shape), int(fallbacks)

    return SimpleNamespace(
        spectral_mix=spectral_mix,
        spectral_mix_adjoint=spectral_mix_adjoint,
        thomas=thomas,
        cubic_solve=cubic_solve,
    )


def _numba_requested() -> bool:
    return os.environ.get("METANO_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

USE_NUMBA = numba_impl is not None and _numba_requested()
active = numba_impl if USE_NUMBA else numpy_impl
BACKEND = "numba" if USE_NUMBA else "numpy"


def spectral_mix(x, r_re, r_im):
    return active.spectral_mix(x, r_re, r_im)


def spectral_mix_adjoint(ybar, x, r_re, r_im):
    return active.spectral_mix_adjoint(ybar, x, r_re, r_im)


def thomas(lower, diag, upper, rhs):
    return active.thomas(lower, diag, upper, rhs)


def cubic_solve(r):
    return active.cubic_solve(r)
