"""Independent reference implementations used only by the tests."""
import math
from collections import deque
from itertools import product

import numpy as np

from vtrisk.voxel_model import TissueLabel

OFFS = np.array([o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)])


# ------------------------------------------------------------- dense CA


def _curve_arrays(twin, rset, nodes):
    """Per-node (asymptote, amplitude, tau) for APD and CV, looked up one by one."""
    lab, lay = twin.labels[nodes], twin.layers[nodes]
    apd = np.array([[c.asymptote, c.amplitude, c.tau] for c in
                    (rset.apd_curve(int(t), int(l)) for t, l in zip(lab, lay))])
    cv = np.array([[c.asymptote, c.amplitude, c.tau] for c in (rset.cv_curve(int(t)) for t in lab)])
    dmin = np.array([rset.apd_curve(int(t), int(l)).di_min for t, l in zip(lab, lay)])
    return apd, cv, dmin


def dense_ca(twin, rset, stim_times, regions, k=2.5, w_e=0.85, w_m=0.05, t_end=1000.0, dt=0.1):
    """Time-stepped cellular automaton on the full voxel lattice.

    Every voxel keeps one pending arrival per incoming direction (26 lattice
    directions plus one stimulus slot).  Time advances in steps of ``dt``;
    within a step the arrivals falling inside it are handled in (time, node,
    source) order.  An arrival is accepted when the voxel has recovered for at
    least ``di_min``; on acceptance the voxel takes its restitution APD and
    CV, blends the APD with neighbors currently in their action potential,
    mixes the CV with its previous value and sends an arrival along every
    lattice edge with the elliptic travel time.  Returns the per-voxel list
    of activation times.
    """
    g = twin.grid
    nx, ny, nz = g.dims
    exc = twin.excitable
    nodes = np.flatnonzero(exc)
    apd_p, cv_p, dmin_p = _curve_arrays(twin, rset, nodes)
    apd_p = apd_p.copy()
    idx = -np.ones(g.n_voxels, int)
    idx[nodes] = np.arange(nodes.size)
    ijk = np.stack(g.ijk(nodes), axis=1)
    m = nodes.size

    # neighbor table and travel lengths, computed directly from offsets
    nb = -np.ones((m, 26), int)
    tl = np.zeros((m, 26))
    sp = np.asarray(g.spacing_mm)
    for d, o in enumerate(OFFS):
        q = ijk + o
        ok = np.all((q >= 0) & (q < [nx, ny, nz]), axis=1)
        vox = np.where(ok, q[:, 0] + nx * (q[:, 1] + ny * q[:, 2]), 0)
        nb[:, d] = np.where(ok, idx[vox], -1)
        vec = o * sp
        L = np.linalg.norm(vec)
        c = np.abs(twin.fibers[nodes].astype(float) @ (vec / L))
        c = np.minimum(c, 1.0)
        tl[:, d] = L * np.sqrt(c * c + k * k * (1 - c * c))
    rev = np.array([int(np.flatnonzero((OFFS == -o).all(axis=1))[0]) for o in OFFS])

    arr_t = np.full((m, 27), np.inf)
    arr_src = np.full((m, 27), -1, int)       # source node, or -(i+1) for stimulus i
    arr_st = np.zeros((m, 27))
    last = np.full(m, -np.inf)
    apd = np.zeros(m)
    prev_cv = np.full(m, np.nan)
    fired = np.zeros(m, int)
    acts = [[] for _ in range(m)]
    sources = [[] for _ in range(m)]

    stim_queue = []
    for i, (ts, reg) in enumerate(zip(stim_times, regions)):
        r = idx[np.asarray(reg, int)]
        stim_queue.append((ts, i, np.unique(r[r >= 0])))

    n_steps = int(np.ceil(t_end / dt)) + 1
    for step in range(n_steps):
        t0, t1 = step * dt, (step + 1) * dt
        for ts, i, reg in stim_queue:
            if t0 <= ts < t1:
                arr_t[reg, 26] = ts
                arr_src[reg, 26] = -(i + 1)
                arr_st[reg, 26] = ts
        while True:
            due = np.flatnonzero(arr_t.min(axis=1) < t1)
            if due.size == 0:
                break
            cand = []
            for n in due:
                for d in np.flatnonzero(arr_t[n] < t1):
                    s = arr_src[n, d]
                    # sources are compared by voxel index, stimuli first
                    skey = s if s < 0 else nodes[s]
                    cand.append((arr_t[n, d], nodes[n], skey, n, d))
            ta, _, _, n, d = min(cand)
            src, st = arr_src[n, d], arr_st[n, d]
            arr_t[n, d] = np.inf
            if ta > t_end:
                continue
            if fired[n]:
                di = ta - (last[n] + apd[n])
                if di < dmin_p[n]:
                    continue
                a_loc = (apd_p[n, 0] - apd_p[n, 1] * np.exp(-di / apd_p[n, 2])) * rset.apd_factor
                cv_new = cv_p[n, 0] * (1 - cv_p[n, 1] * np.exp(-di / cv_p[n, 2])) * rset.cv_factor
            else:
                a_loc = apd_p[n, 0] * rset.apd_factor
                cv_new = cv_p[n, 0] * rset.cv_factor
            nbs = nb[n][nb[n] >= 0]
            active = nbs[(fired[nbs] > 0) & (last[nbs] <= ta) & (ta < last[nbs] + apd[nbs])]
            new_apd = (1 - w_e) * a_loc + w_e * apd[active].mean() if active.size else a_loc
            cv = cv_new if np.isnan(prev_cv[n]) else (1 - w_m) * cv_new + w_m * prev_cv[n]
            last[n], apd[n], prev_cv[n] = ta, new_apd, cv
            fired[n] += 1
            acts[n].append(ta)
            sources[n].append(src if src < 0 else nodes[src])
            # drop arrivals that are now inside the refractory window
            for dd in range(27):
                if arr_t[n, dd] < np.inf and arr_t[n, dd] - (ta + new_apd) < dmin_p[n]:
                    arr_t[n, dd] = np.inf
            for dd in range(26):
                q = nb[n, dd]
                if q < 0:
                    continue
                tq = ta + tl[n, dd] / cv
                slot = rev[dd]
                if fired[q] and tq - (last[q] + apd[q]) < dmin_p[q]:
                    continue
                if tq < arr_t[q, slot]:
                    arr_t[q, slot] = tq
                    arr_src[q, slot] = n
                    arr_st[q, slot] = ta
    out = {}
    for n in range(m):
        out[int(nodes[n])] = np.array(acts[n])
    return out


# ------------------------------------------------------------- SCC length


def bfs_channel_voxels(twin):
    """Voxel count of the shortest 26-connected BZ path joining the two
    groups of BZ voxels that touch healthy tissue."""
    g = twin.grid
    lab = g.volume(g.labels)
    bz = lab == TissueLabel.BORDER_ZONE
    shape = np.array(lab.shape)

    def nbrs(v):
        for o in OFFS:
            w = tuple(np.array(v) + o)
            if all(0 <= w[a] < shape[a] for a in range(3)):
                yield w

    mouth = set()
    for v in zip(*np.nonzero(bz)):
        if any(lab[w] == TissueLabel.HEALTHY for w in nbrs(v)):
            mouth.add(tuple(int(c) for c in v))
    # split mouth voxels into connected groups
    groups, seen = [], set()
    for v in sorted(mouth):
        if v in seen:
            continue
        grp, q = [], deque([v])
        seen.add(v)
        while q:
            u = q.popleft()
            grp.append(u)
            for w in nbrs(u):
                w = tuple(int(c) for c in w)
                if w in mouth and w not in seen:
                    seen.add(w)
                    q.append(w)
        groups.append(grp)
    assert len(groups) == 2, f"expected two channel mouths, got {len(groups)}"
    targets = set(groups[1])
    dist = {v: 1 for v in groups[0]}
    q = deque(groups[0])
    while q:
        u = q.popleft()
        if u in targets:
            return dist[u]
        for w in nbrs(u):
            w = tuple(int(c) for c in w)
            if bz[w] and w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    raise AssertionError("mouths not connected through BZ")


# ------------------------------------------------------------- exit mouth


def first_bz_to_healthy_edge(result, twin, t_from):
    """Manual trace: first logged activation after ``t_from`` of a HEALTHY
    voxel whose recorded source is a BZ voxel."""
    lab = twin.labels
    for t, n, s in zip(result.t, result.node, result.source):
        if t < t_from or s < 0:
            continue
        if lab[n] == TissueLabel.HEALTHY and lab[s] == TissueLabel.BORDER_ZONE:
            return int(n)
    return None


# ------------------------------------------------------------- KDE crossing


def silverman_mixture(samples):
    """Analytic Gaussian-mixture density with Silverman's bandwidth (1-D)."""
    x = np.asarray(samples, float)
    n = x.size
    h = x.std(ddof=1) * (n * 3 / 4.0) ** (-1 / 5.0)

    def pdf(g):
        z = (np.asarray(g)[:, None] - x[None, :]) / h
        return np.exp(-0.5 * z * z).sum(axis=1) / (n * h * math.sqrt(2 * math.pi))

    return pdf


def grid_crossing(low, high, step=1e-5):
    f, g = silverman_mixture(low), silverman_mixture(high)
    a, b = np.mean(low), np.mean(high)
    grid = np.arange(a, b, step)
    diff = f(grid) - g(grid)
    # first point where the LOW density no longer dominates
    return grid[np.argmax(diff <= 0)]
