"""Pure numpy kernels. Used when the compiled ``_ckernels`` module is absent.

Both kernels share their signatures with the Cython versions in
``_ckernels.pyx``; ``bandshare.kernels`` picks one at import time.
"""

import numpy as np


def _best_response(lam, rate, extra, v, gamma, theta, kink):
    # lam: (C,) -> tau: (C, N)
    inv = 1.0 / (gamma * lam)[:, None]
    offset = theta / rate
    above = v * inv - offset
    below = (v + extra) * inv - offset
    return np.where(above >= kink, above, np.where(below <= kink, np.maximum(below, 0.0), kink))


def solve_cells(rate, extra, active, budget, v, gamma, theta, kink, rel_tol=1e-8, max_iter=200):
    """Dual bisection for a batch of independent allocation cells.

    rate    (C, N) Mbps delivered per allotted slot
    extra   (C, N) hinge weight added below the kink (virtual queue)
    active  (C, N) bool, client has a packet
    budget  (C,)   slots available to the cell
    kink    (C, N) slot count at which the hinge switches off

    Returns ``(tau, lam, iterations)``.
    """
    rate = np.asarray(rate, dtype=float)
    extra = np.asarray(extra, dtype=float)
    active = np.asarray(active, dtype=bool)
    budget = np.asarray(budget, dtype=float)
    kink = np.asarray(kink, dtype=float)
    ncell, _ = rate.shape

    w0 = np.where(kink > 0.0, v + extra, v)
    marg0 = np.where(active, w0 * rate / (gamma * theta), 0.0)
    lam_hi = marg0.max(axis=1) if marg0.shape[1] else np.zeros(ncell)
    has_arrival = active.any(axis=1)

    tau = np.zeros_like(rate)
    lam = np.where(has_arrival, lam_hi, 0.0)
    todo = has_arrival & (budget > 0.0)
    if not todo.any():
        return tau, lam, 0

    idx = np.flatnonzero(todo)
    r, e, a, b, k = rate[idx], extra[idx], active[idx], budget[idx], kink[idx]
    hi = lam_hi[idx].copy()
    lo = np.minimum(1.0, hi)
    tol = rel_tol * np.maximum(1.0, b)

    def total(l):
        t = np.where(a, _best_response(l, r, e, v, gamma, theta, k), 0.0)
        return t, t.sum(axis=1)

    _, s = total(lo)
    for _ in range(2000):
        low = s <= b
        if not low.any():
            break
        lo = np.where(low, 0.5 * lo, lo)
        _, s = total(lo)
    else:
        raise RuntimeError("could not bracket the budget multiplier")

    cur = lo.copy()
    done = np.abs(s - b) <= tol
    iters = 0
    while not done.all():
        if iters >= max_iter:
            raise RuntimeError(f"dual bisection did not converge in {max_iter} iterations")
        iters += 1
        mid = np.sqrt(lo * hi)
        _, sm = total(mid)
        over = sm > b
        upd = ~done
        lo = np.where(upd & over, mid, lo)
        hi = np.where(upd & ~over, mid, hi)
        cur = np.where(upd, mid, cur)
        done = done | (np.abs(sm - b) <= tol)

    t, _ = total(cur)
    tau[idx] = t
    lam[idx] = cur
    return tau, lam, iters


def _project_caps(z, cap):
    excess = np.maximum(z.sum(axis=2) - cap, 0.0)
    return z - excess[:, :, None] / z.shape[2]


def _project_slabs(z, band):
    flows = z.sum(axis=0)
    net = flows - flows.T
    shift = np.sign(net) * np.maximum(np.abs(net) - band, 0.0) / (2.0 * z.shape[0])
    return z - shift[None, :, :]


def _violation(y, cap, band):
    flows = y.sum(axis=0)
    return max(
        float(np.max(-y, initial=0.0)),
        float(np.max(y.sum(axis=2) - cap, initial=0.0)),
        float(np.max(np.abs(flows - flows.T) - band, initial=0.0)),
    )


def dykstra_project(x, cap, band, tol=1e-9, max_sweeps=100_000):
    """Euclidean projection onto {x >= 0, row caps, pairwise balance slabs}.

    ``x`` has shape (regions, owners, recipients). Returns ``(y, sweeps)``;
    ``sweeps == -1`` signals the cap was hit.
    """
    y = np.array(x, dtype=float, copy=True)
    p1 = np.zeros_like(y)
    p2 = np.zeros_like(y)
    p3 = np.zeros_like(y)
    for sweep in range(1, max_sweeps + 1):
        prev = y
        z = y + p1
        y = np.maximum(z, 0.0)
        p1 = z - y
        z = y + p2
        y = _project_caps(z, cap)
        p2 = z - y
        z = y + p3
        y = _project_slabs(z, band)
        p3 = z - y
        if np.max(np.abs(y - prev)) < tol and _violation(y, cap, band) <= 0.1 * tol:
            return y, sweep
    return y, -1
