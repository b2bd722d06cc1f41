"""Pure-Python twin of the compiled coordinate-descent kernel.

Same contract as ``_ccd.ccd_lasso``; used when the extension is not built
or when ``GFI_PURE_PYTHON`` is set.  Roughly two orders of magnitude
slower, which only matters for the tensor model at scale.
"""
import numpy as np

__all__ = ["ccd_lasso"]


def ccd_lasso(G, q, t, b0, tol=1e-8, max_cycles=200):
    """Return (b, cycles). Coordinates with G[j, j] == 0 are pinned at 0."""
    G = np.ascontiguousarray(G, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    k = q.shape[0]
    if G.shape != (k, k):
        raise ValueError("G must be k x k with k = len(q)")
    b = np.array(b0, dtype=float)
    if b.shape != (k,):
        raise ValueError("b0 must have length k")
    if t < 0 or tol <= 0 or max_cycles < 1:
        raise ValueError("need t >= 0, tol > 0, max_cycles >= 1")

    s = G @ b
    diag = np.diag(G)
    for cycle in range(1, max_cycles + 1):
        step = 0.0
        for j in range(k):
            gjj = diag[j]
            if gjj == 0.0:
                new = 0.0
            else:
                z = q[j] - s[j] + gjj * b[j]
                new = np.sign(z) * max(abs(z) - t, 0.0) / gjj
            if new != b[j]:
                delta = new - b[j]
                b[j] = new
                s += delta * G[j]
                step = max(step, abs(delta))
        if step <= tol:
            return b, cycle
    return b, max_cycles
