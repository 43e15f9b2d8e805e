"""Event-driven anisotropic eikonal / cellular-automaton propagation.

Every excitable voxel is a node. Activating node ``n`` at time ``t`` offers
arrival ``t + tau(n, m) / cv`` to each excitable neighbor ``m``; a node
accepts the earliest offer it is excitable for (``DI >= di_min``) and rejects
the rest. Offers are processed in ``(time, target, source)`` order, which also
orders the activation log.

The kernel keeps only the best pending offer per node (the others are
provably rejected), so the heap holds a few entries per node per wave instead
of one per edge.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .anatomy import OFFSETS_26, OFFSETS_6, capture_region, neighbor_table
from .errors import ConfigError, PacingSiteNonExcitable
from .voxel_model import Layer, TissueLabel

NEVER = -np.inf


@dataclass(frozen=True)
class EngineParams:
    anisotropy_ratio: float = 2.5
    electrotonic_weight: float = 0.85
    cv_memory_weight: float = 0.05
    t_end: float = 6000.0
    capture_radius_mm: float = 2.0
    neighborhood: int = 26
    metric: str = "ray"

    def __post_init__(self):
        if not (0 <= self.electrotonic_weight <= 1 and 0 <= self.cv_memory_weight <= 1):
            raise ConfigError("electrotonic and memory weights must lie in [0, 1]")
        if self.anisotropy_ratio < 1:
            raise ConfigError("anisotropy ratio must be >= 1")
        if self.neighborhood not in (6, 26):
            raise ConfigError("neighborhood must be 6 or 26")
        if self.metric not in ("ray", "normal"):
            raise ConfigError("metric must be 'ray' or 'normal'")


# ------------------------------------------------------------- local rules


def edge_speed(cv, edge_dir, fiber, k, metric="ray"):
    """Conduction speed along a lattice edge in an elliptically anisotropic medium.

    ``metric="ray"`` is the speed at which the wave travels along the edge
    (the elliptic travel-time metric, ``cv / sqrt(c^2 + k^2 (1 - c^2))``);
    ``metric="normal"`` is the speed of a front whose normal is the edge
    (``cv * sqrt(c^2 + (1 - c^2) / k^2)``). Both give ``cv`` along the fiber
    and ``cv/k`` across it, with ``c = |edge_dir . fiber|``.
    """
    c = abs(float(np.dot(edge_dir, fiber)))
    c2 = min(c * c, 1.0)
    if metric == "ray":
        return cv / math.sqrt(c2 + k * k * (1.0 - c2))
    return cv * math.sqrt(c2 + (1.0 - c2) / (k * k))


def electrotonic_apd(apd_local, activated_neighbor_apds, w_e):
    if len(activated_neighbor_apds) == 0:
        return apd_local
    return (1.0 - w_e) * apd_local + w_e * float(np.mean(activated_neighbor_apds))


def cv_with_memory(cv_new, prev_cv, w_m):
    if prev_cv is None or (isinstance(prev_cv, float) and math.isnan(prev_cv)):
        return cv_new
    return (1.0 - w_m) * cv_new + w_m * prev_cv


# ----------------------------------------------------------- model arrays


@dataclass(frozen=True, eq=False)
class PreparedTwin:
    """Node arrays for one twin and one anisotropy setting."""

    nodes: np.ndarray      # voxel index of each node, ascending
    node_of: np.ndarray    # voxel index -> node, -1 for non-excitable
    nbr: np.ndarray        # (M, K) node neighbors, -1 where absent
    travel: np.ndarray     # (M, K) travel time * cv for each edge (mm)
    tissue: np.ndarray
    layer: np.ndarray


_PREP_CACHE = {}


def prepare(twin, params=EngineParams()):
    key = (id(twin), params.anisotropy_ratio, params.neighborhood, params.metric)
    hit = _PREP_CACHE.get(key)
    if hit is not None and hit[0] is twin:
        return hit[1]
    if twin.fibers is None or twin.layers is None:
        raise ConfigError("twin must be preprocessed (layers and fibers) before simulation")
    grid = twin.grid
    exc = twin.excitable
    nodes = np.flatnonzero(exc)
    node_of = np.full(grid.n_voxels, -1, dtype=np.int64)
    node_of[nodes] = np.arange(nodes.size)
    offsets = OFFSETS_26 if params.neighborhood == 26 else OFFSETS_6
    vox_nbr = neighbor_table(grid.dims, offsets)[nodes]
    nbr = np.where(vox_nbr >= 0, node_of[np.maximum(vox_nbr, 0)], -1)

    vec = offsets * np.asarray(grid.spacing_mm)        # (K, 3) mm
    length = np.linalg.norm(vec, axis=1)
    unit = vec / length[:, None]
    fib = twin.fibers[nodes].astype(np.float64)
    c = np.minimum(np.abs(fib @ unit.T), 1.0)          # (M, K)
    k = params.anisotropy_ratio
    if params.metric == "ray":
        travel = length[None, :] * np.sqrt(c**2 + k * k * (1.0 - c**2))
    else:
        travel = length[None, :] / np.sqrt(c**2 + (1.0 - c**2) / (k * k))
    prepared = PreparedTwin(
        nodes=nodes,
        node_of=node_of,
        nbr=np.ascontiguousarray(nbr, dtype=np.int64),
        travel=np.ascontiguousarray(travel, dtype=np.float64),
        tissue=twin.grid.labels[nodes].copy(),
        layer=twin.layers[nodes].copy(),
    )
    if len(_PREP_CACHE) > 8:
        _PREP_CACHE.clear()
    _PREP_CACHE[key] = (twin, prepared)
    return prepared


def node_restitution(prepared, rset):
    """Per-node curve parameters (asymptote, amplitude, tau) for APD and CV."""
    m = prepared.nodes.size
    apd_p = np.empty((m, 3))
    cv_p = np.empty((m, 3))
    di_min = np.empty(m)
    for tissue in (TissueLabel.HEALTHY, TissueLabel.BORDER_ZONE):
        t_mask = prepared.tissue == tissue
        cc = rset.cv_curve(tissue)
        cv_p[t_mask] = (cc.asymptote, cc.amplitude, cc.tau)
        for layer in (Layer.ENDO, Layer.MID, Layer.EPI):
            mask = t_mask & (prepared.layer == layer)
            ac = rset.apd_curve(tissue, layer)
            apd_p[mask] = (ac.asymptote, ac.amplitude, ac.tau)
            di_min[mask] = ac.di_min
    return apd_p, cv_p, di_min


# ------------------------------------------------------------------ kernel


@numba.njit(cache=True, nogil=True)
def _grow(a, n):
    out = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@numba.njit(cache=True, nogil=True)
def _run(nbr, travel, apd_p, cv_p, di_min, apd_scale, cv_scale, w_e, w_m,
         stim_t, stim_ptr, stim_nodes, t_end):
    m_nodes, kn = nbr.shape
    last = np.full(m_nodes, -np.inf)
    apd = np.zeros(m_nodes)
    prev_cv = np.full(m_nodes, np.nan)
    count = np.zeros(m_nodes, dtype=np.int64)
    pend_t = np.full(m_nodes, np.inf)
    pend_src = np.full(m_nodes, np.iinfo(np.int64).max)
    pend_srct = np.zeros(m_nodes)

    cap = max(1024, 4 * m_nodes)
    log_t = np.empty(cap)
    log_n = np.empty(cap, dtype=np.int64)
    log_s = np.empty(cap, dtype=np.int64)
    log_st = np.empty(cap)
    log_apd = np.empty(cap)
    n_log = 0

    n_stim = stim_t.shape[0]
    captured = np.zeros(n_stim, dtype=np.bool_)
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    si = 0
    while True:
        top = heap[0][0] if len(heap) > 0 else np.inf
        if si < n_stim and stim_t[si] <= top:
            ts = stim_t[si]
            if ts > t_end:
                si = n_stim
                continue
            src = -(si + 1)
            for p in range(stim_ptr[si], stim_ptr[si + 1]):
                v = stim_nodes[p]
                if count[v] > 0 and ts - (last[v] + apd[v]) < di_min[v]:
                    continue
                if ts < pend_t[v] or (ts == pend_t[v] and src < pend_src[v]):
                    pend_t[v] = ts
                    pend_src[v] = src
                    pend_srct[v] = ts
                    heapq.heappush(heap, (ts, np.int64(v), np.int64(src)))
            si += 1
            continue
        if len(heap) == 0:
            break
        t, n, src = heapq.heappop(heap)
        if t > t_end:
            break
        if t != pend_t[n] or src != pend_src[n]:
            continue
        pend_t[n] = np.inf
        pend_src[n] = np.iinfo(np.int64).max
        if count[n] > 0:
            di = t - (last[n] + apd[n])
            if di < di_min[n]:
                continue
            apd_local = (apd_p[n, 0] - apd_p[n, 1] * np.exp(-di / apd_p[n, 2])) * apd_scale
            cv_new = cv_p[n, 0] * (1.0 - cv_p[n, 1] * np.exp(-di / cv_p[n, 2])) * cv_scale
        else:
            apd_local = apd_p[n, 0] * apd_scale
            cv_new = cv_p[n, 0] * cv_scale
        # electrotonic blending with neighbors currently in their action potential
        acc = 0.0
        na = 0
        for j in range(kn):
            q = nbr[n, j]
            if q >= 0 and count[q] > 0 and last[q] <= t and t < last[q] + apd[q]:
                acc += apd[q]
                na += 1
        if na > 0:
            new_apd = (1.0 - w_e) * apd_local + w_e * (acc / na)
        else:
            new_apd = apd_local
        if np.isnan(prev_cv[n]):
            cv = cv_new
        else:
            cv = (1.0 - w_m) * cv_new + w_m * prev_cv[n]
        last[n] = t
        apd[n] = new_apd
        prev_cv[n] = cv
        count[n] += 1

        if n_log >= log_t.shape[0]:
            log_t = _grow(log_t, n_log + 1)
            log_n = _grow(log_n, n_log + 1)
            log_s = _grow(log_s, n_log + 1)
            log_st = _grow(log_st, n_log + 1)
            log_apd = _grow(log_apd, n_log + 1)
        log_t[n_log] = t
        log_n[n_log] = n
        log_s[n_log] = src
        log_st[n_log] = pend_srct[n] if src >= 0 else t
        log_apd[n_log] = new_apd
        n_log += 1
        if src < 0:
            captured[-src - 1] = True

        for j in range(kn):
            q = nbr[n, j]
            if q < 0:
                continue
            ta = t + travel[n, j] / cv
            if ta > t_end:
                continue
            if count[q] > 0 and ta - (last[q] + apd[q]) < di_min[q]:
                continue
            if ta < pend_t[q] or (ta == pend_t[q] and n < pend_src[q]):
                pend_t[q] = ta
                pend_src[q] = n
                pend_srct[q] = t
                heapq.heappush(heap, (ta, np.int64(q), np.int64(n)))
    return (log_t[:n_log].copy(), log_n[:n_log].copy(), log_s[:n_log].copy(),
            log_st[:n_log].copy(), log_apd[:n_log].copy(), captured)


# ----------------------------------------------------------------- results


@dataclass(eq=False)
class SimulationResult:
    """Activation log (voxel indices) plus capture bookkeeping.

    ``source`` holds the activating voxel, or ``-(i+1)`` for stimulus ``i``.
    """

    effective: bool
    captured: np.ndarray
    stim_times: np.ndarray
    t: np.ndarray
    node: np.ndarray
    source: np.ndarray
    source_t: np.ndarray
    apd: np.ndarray
    di_min: np.ndarray = field(default=None, repr=False)
    note: str = ""

    @property
    def n_activations(self):
        return int(self.t.size)

    @property
    def t_last_stim(self):
        return float(self.stim_times[-1]) if self.stim_times.size else 0.0

    def activation_times(self, voxel):
        return self.t[self.node == voxel]

    def first_activation(self, n_voxels):
        out = np.full(n_voxels, np.inf)
        # log is time-sorted, so the reversed assignment leaves the earliest
        out[self.node[::-1]] = self.t[::-1]
        return out

    def iter_jsonl(self):
        for t, n, s in zip(self.t.tolist(), self.node.tolist(), self.source.tolist()):
            yield json.dumps({"t_ms": round(t, 6), "node": n, "source": s})

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for line in self.iter_jsonl():
                fh.write(line + "\n")


def simulate_regions(twin, rset, stim_times, regions, params=EngineParams()):
    """Run the engine with explicit stimulus regions (voxel index arrays)."""
    prepared = prepare(twin, params)
    apd_p, cv_p, di_min = node_restitution(prepared, rset)
    stim_times = np.asarray(stim_times, dtype=np.float64)
    if stim_times.size and np.any(np.diff(stim_times) <= 0):
        raise ConfigError("stimulus times must be strictly increasing")
    ptr = [0]
    flat = []
    for reg in regions:
        nodes = prepared.node_of[np.asarray(reg, dtype=np.int64)]
        nodes = np.unique(nodes[nodes >= 0])
        flat.append(nodes)
        ptr.append(ptr[-1] + nodes.size)
    stim_nodes = np.concatenate(flat) if flat else np.empty(0, np.int64)
    lt, ln, ls, lst, lapd, captured = _run(
        prepared.nbr, prepared.travel, apd_p, cv_p, di_min,
        float(rset.apd_factor), float(rset.cv_factor),
        float(params.electrotonic_weight), float(params.cv_memory_weight),
        stim_times, np.asarray(ptr, dtype=np.int64), stim_nodes.astype(np.int64), float(params.t_end),
    )
    node = prepared.nodes[ln]
    source = np.where(ls >= 0, prepared.nodes[np.maximum(ls, 0)], ls)
    effective = bool(captured.all()) if captured.size else False
    return SimulationResult(
        effective=effective,
        captured=captured,
        stim_times=stim_times,
        t=lt,
        node=node,
        source=source,
        source_t=lst,
        apd=lapd,
        di_min=di_min[ln],
    )


def simulate(twin, rset, schedule, params=EngineParams()):
    """Simulate a :class:`~vtrisk.protocol.StimulusSchedule` on ``twin``."""
    regions = []
    for site_id in schedule.site_ids:
        site = twin.site(site_id)
        regions.append(capture_region(twin, site, params.capture_radius_mm))
    res = simulate_regions(twin, rset, schedule.times, regions, params)
    if all(len(r) == 0 for r in regions):
        res.note = PacingSiteNonExcitable.__name__
    return res


def check_log_invariants(result, twin):
    """Return a list of violated engine invariants (empty when all hold)."""
    problems = []
    t, node, src, st = result.t, result.node, result.source, result.source_t
    if t.size == 0:
        return problems
    key_ok = (np.diff(t) > 0) | ((np.diff(t) == 0) & (
        (np.diff(node) > 0) | ((np.diff(node) == 0) & (np.diff(src) > 0))))
    if not np.all(key_ok):
        problems.append("log not sorted by (time, node, source)")
    lab = twin.grid.labels[node]
    if np.any((lab != TissueLabel.HEALTHY) & (lab != TissueLabel.BORDER_ZONE)):
        problems.append("non-excitable voxel activated")
    if np.any(st > t):
        problems.append("activation precedes its source")
    nb = src >= 0
    if np.any(nb):
        # every neighbor source must itself have activated at the recorded time
        n_vox = np.int64(twin.grid.n_voxels)
        keys = np.round(t * 1e6).astype(np.int64) * n_vox + node
        want = np.round(st[nb] * 1e6).astype(np.int64) * n_vox + src[nb]
        if not np.all(np.isin(want, keys)):
            problems.append("source activation missing from log")
    stim = ~nb
    if np.any(stim):
        idx = -src[stim] - 1
        if np.any(np.abs(result.stim_times[idx] - t[stim]) > 1e-9):
            problems.append("stimulus activation off its programmed time")
    order = np.lexsort((t, node))
    n_s, t_s, apd_s = node[order], t[order], result.apd[order]
    same = n_s[1:] == n_s[:-1]
    gap = t_s[1:] - t_s[:-1]
    di_min = result.di_min[order][1:] if result.di_min is not None else 0.0
    if np.any(same & (gap < apd_s[:-1] + di_min - 1e-9)):
        problems.append("refractoriness violated")
    return problems
