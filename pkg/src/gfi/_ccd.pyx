# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cyclic coordinate descent for the Gram-form lasso.

Solves min_b 0.5*||v - W b||^2 + t*||b||_1 given G = W'W and q = W'v.
This is the inner kernel of the tensor-factor block updates, called once
per mode per relaxation sweep per draw, so it is kept in C.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def ccd_lasso(double[:, ::1] G, double[::1] q, double t, double[::1] b0,
              double tol=1e-8, int max_cycles=200):
    """Return (b, cycles). Coordinates with G[j, j] == 0 are pinned at 0."""
    cdef Py_ssize_t k = q.shape[0]
    if G.shape[0] != k or G.shape[1] != k:
        raise ValueError("G must be k x k with k = len(q)")
    if b0.shape[0] != k:
        raise ValueError("b0 must have length k")
    if t < 0 or tol <= 0 or max_cycles < 1:
        raise ValueError("need t >= 0, tol > 0, max_cycles >= 1")

    cdef cnp.ndarray[cnp.float64_t, ndim=1] b_arr = np.array(b0, dtype=np.float64)
    cdef double[::1] b = b_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s_arr = np.asarray(G) @ b_arr
    cdef double[::1] s = s_arr

    cdef Py_ssize_t cycle, j, l
    cdef double gjj, z, new, delta, step
    for cycle in range(1, max_cycles + 1):
        step = 0.0
        for j in range(k):
            gjj = G[j, j]
            if gjj == 0.0:
                if b[j] != 0.0:
                    delta = -b[j]
                    b[j] = 0.0
                    for l in range(k):
                        s[l] += delta * G[j, l]
                continue
            # gradient of the smooth part at b_j = 0 is -(q_j - sum_{l!=j} G_jl b_l)
            z = q[j] - s[j] + gjj * b[j]
            if z > t:
                new = (z - t) / gjj
            elif z < -t:
                new = (z + t) / gjj
            else:
                new = 0.0
            if new != b[j]:
                delta = new - b[j]
                b[j] = new
                for l in range(k):
                    s[l] += delta * G[j, l]
                if delta < 0:
                    delta = -delta
                if delta > step:
                    step = delta
        if step <= tol:
            return b_arr, cycle
    return b_arr, max_cycles
