"""Independent reference solvers used only by the tests."""

import itertools

import numpy as np
from scipy.optimize import brentq


def polytope_rows(R, O, T, zeta):
    """Dense ``A x <= b`` for the sharing polytope, x = entries[r, j, i].ravel()."""
    n = R * O * O
    pos = np.arange(n).reshape(R, O, O)
    A, b = [], []
    for k in range(n):  # -x <= 0
        row = np.zeros(n)
        row[k] = -1.0
        A.append(row)
        b.append(0.0)
    for r, j in itertools.product(range(R), range(O)):
        row = np.zeros(n)
        row[pos[r, j, :]] = 1.0
        A.append(row)
        b.append(T)
    for j in range(O):
        for i in range(j + 1, O):
            row = np.zeros(n)
            row[pos[:, j, i]] = 1.0
            row[pos[:, i, j]] = -1.0
            A += [row, -row]
            b += [zeta, zeta]
    return np.array(A), np.array(b)


def active_set_projection(p, A, b, x0, tol=1e-12, max_iter=5000):
    """Primal active-set method for min 0.5 ||x - p||^2 s.t. A x <= b.

    ``x0`` must be feasible. Exact up to round-off (finite termination);
    Bland's smallest-index rule breaks ties at degenerate vertices.
    """
    x = np.array(x0, dtype=float)
    W = _independent(A, [k for k in range(len(b)) if abs(A[k] @ x - b[k]) <= 1e-10])
    n = x.size
    for _ in range(max_iter):
        g = x - p
        if W:
            Aw = A[W]
            K = np.block([[np.eye(n), Aw.T], [Aw, np.zeros((len(W), len(W)))]])
            sol = np.linalg.lstsq(K, np.concatenate([-g, np.zeros(len(W))]), rcond=None)[0]
            d, mu = sol[:n], sol[n:]
        else:
            d, mu = -g, np.zeros(0)
        if np.linalg.norm(d) <= 1e-11 * max(1.0, np.linalg.norm(p)):
            neg = [W[k] for k in range(len(W)) if mu[k] < -tol]
            if not neg:
                return x
            W.remove(min(neg))  # Bland: smallest index leaves
            continue
        step, block = 1.0, None
        for k in range(len(b)):
            if k in W:
                continue
            ad = A[k] @ d
            if ad > 1e-10 * max(1.0, np.linalg.norm(d)):
                s = max((b[k] - A[k] @ x) / ad, 0.0)
                if s < step - 1e-15:  # strict: ties keep the smaller index
                    step, block = s, k
        x = x + step * d
        if block is not None:
            W = _independent(A, W + [block])
    raise RuntimeError("active-set oracle did not terminate")


def _independent(A, W):
    out = []
    for k in W:
        cand = out + [k]
        if np.linalg.matrix_rank(A[cand]) == len(cand):
            out = cand
    return out


def quality_root(q, gamma=0.8, theta=0.1, beta=0.4):
    """Rate (Mbps) with quality q, by root finding (not by the closed form)."""
    f = lambda r: np.log((r + theta) / beta) / gamma - q
    return brentq(f, 0.0, 1e4, xtol=1e-14)


def grid_best_response(lam, p, v, a, gamma, theta, beta, q_hi, tau_max, step):
    """Dense grid minimiser of -v Q + p (q_hi - Q)_+ + lam * tau."""
    tau = np.arange(0.0, tau_max, step)
    q = np.log((a * tau + theta) / beta) / gamma
    f = -v * q + p * np.maximum(q_hi - q, 0.0) + lam * tau
    return tau[int(np.argmin(f))]


def transfer_grid_value(cell_values, T, step=0.05, pinned=False):
    """1-D grid oracle for one region and two operators: best over the net transfer z.

    ``cell_values(b1, b2)`` returns the summed objective of the two cells
    for budgets (b1, b2) = (T - z, T + z). ``pinned`` fixes z = 0.
    """
    zs = np.array([0.0]) if pinned else np.arange(-T, T + 1e-9, step)
    vals = [cell_values(T - z, T + z) for z in zs]
    k = int(np.argmax(vals))
    return float(vals[k]), float(zs[k])
