"""Reentry detection, exit-site extraction and exit-site clustering."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import ConfigError, NoExitFound
from .voxel_model import TissueLabel

MIN_CYCLES = 10
PERIODIC_TOL = 0.2
CL_WINDOW_MS = (120.0, 500.0)


@dataclass(frozen=True)
class ReentryEvent:
    initiating_node: int
    onset_ms: float
    cycle_length_ms: float
    n_cycles: int
    tracked_node: int
    sustained: bool
    exit_node: int | None = None
    exit_aha_segment: int | None = None

    def with_exit(self, node, segment):
        return ReentryEvent(
            self.initiating_node, self.onset_ms, self.cycle_length_ms, self.n_cycles,
            self.tracked_node, self.sustained, node, segment,
        )

    def to_json(self):
        return {
            "initiating_node": self.initiating_node,
            "onset_ms": round(self.onset_ms, 6),
            "cycle_length_ms": round(self.cycle_length_ms, 6),
            "n_cycles": self.n_cycles,
            "tracked_node": self.tracked_node,
            "sustained": self.sustained,
            "exit_node": self.exit_node,
            "exit_aha_segment": self.exit_aha_segment,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            int(d["initiating_node"]), float(d["onset_ms"]), float(d["cycle_length_ms"]),
            int(d["n_cycles"]), int(d["tracked_node"]), bool(d["sustained"]),
            d.get("exit_node"), d.get("exit_aha_segment"),
        )


def _periodic(times, tol):
    iv = np.diff(times)
    med = float(np.median(iv))
    return med, bool(np.all(np.abs(iv - med) <= tol * med))


def detect_reentry(result, t_last_stim, apd_max_global, min_cycles=MIN_CYCLES,
                   tol=PERIODIC_TOL, require_sustained=True):
    """Find self-sustained activity after the stimulus waves have died out.

    Onset is the first activation later than ``t_last_stim + apd_max_global``.
    A node is tracked when it fires at least ``min_cycles`` times after onset
    with every interval within ``tol`` of the median interval; the node with
    the most such activations wins (lowest index on ties).  Returns None when
    nothing qualifies, or an unsustained event if ``require_sustained`` is off.
    """
    horizon = t_last_stim + apd_max_global
    post = np.flatnonzero(result.t > horizon)
    if post.size == 0:
        return None
    first = post[0]
    onset = float(result.t[first])
    nodes = result.node[post]
    times = result.t[post]
    order = np.lexsort((times, nodes))
    nodes, times = nodes[order], times[order]
    uniq, start, counts = np.unique(nodes, return_index=True, return_counts=True)
    # most activations first, then lowest node index
    rank = np.lexsort((uniq, -counts))
    best = None
    for r in rank:
        c = int(counts[r])
        if c < 2:
            break
        tt = times[start[r]:start[r] + c]
        med, ok = _periodic(tt, tol)
        ok = ok and CL_WINDOW_MS[0] <= med <= CL_WINDOW_MS[1]
        if best is None:
            best = (int(uniq[r]), c, med)
        if c < min_cycles:
            break
        if ok:
            return ReentryEvent(int(result.node[first]), onset, med, c, int(uniq[r]), True)
    if require_sustained or best is None:
        return None
    node, c, med = best
    return ReentryEvent(int(result.node[first]), onset, med, c, node, False)


def find_exit_site(result, twin, reentry):
    """First HEALTHY activation after onset whose source is a BORDER_ZONE node."""
    lab = twin.labels
    i0 = int(np.searchsorted(result.t, reentry.onset_ms, side="left"))
    node = result.node[i0:]
    src = result.source[i0:]
    ok = (src >= 0) & (lab[node] == TissueLabel.HEALTHY)
    ok[ok] = lab[src[ok]] == TissueLabel.BORDER_ZONE
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        raise NoExitFound("no BZ to HEALTHY activation after reentry onset")
    exit_node = int(node[hits[0]])
    seg = int(twin.aha_segment[exit_node]) if twin.aha_segment is not None else None
    return exit_node, seg


def analyze_result(result, twin, rset):
    """Reentry event with exit attached, or None."""
    if not result.effective or result.t.size == 0:
        return None
    ev = detect_reentry(result, result.t_last_stim, rset.max_apd())
    if ev is None:
        return None
    try:
        node, seg = find_exit_site(result, twin, ev)
    except NoExitFound:
        return ev
    return ev.with_exit(node, seg)


@dataclass(frozen=True)
class RiskZone:
    zone_id: int
    members_mm: np.ndarray
    member_index: tuple
    centroid_mm: tuple
    aha_segments: tuple = ()
    support: int = 0
    config_indices: tuple = field(default=())

    def to_json(self):
        return {
            "zone_id": self.zone_id,
            "centroid_mm": [round(float(v), 6) for v in self.centroid_mm],
            "support": self.support,
            "aha_segments": list(self.aha_segments),
            "members_mm": [[round(float(v), 6) for v in p] for p in self.members_mm],
            "config_indices": list(self.config_indices),
        }


def cluster_exit_sites(points, radius_mm=10.0, segments=None, config_indices=None):
    """Single-linkage clusters of exit points; two points join when <= radius apart.

    Zones are sorted by support (descending), then by their smallest member
    index, and numbered from 1.
    """
    if radius_mm <= 0:
        raise ConfigError("clustering radius must be > 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return []
    if n == 1:
        labels = np.ones(1, dtype=int)
    else:
        # nudge so pairs at exactly radius still join under fcluster's <= rule
        labels = fcluster(linkage(pts, method="single"), t=radius_mm * (1 + 1e-12), criterion="distance")
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    ordered = sorted(groups.values(), key=lambda g: (-len(g), g[0]))
    zones = []
    for zid, idx in enumerate(ordered, start=1):
        mem = pts[idx]
        segs = ()
        if segments is not None:
            cnt = Counter(int(segments[i]) for i in idx if segments[i] is not None)
            segs = tuple(s for s, _ in sorted(cnt.items(), key=lambda kv: (-kv[1], kv[0])))
        cfg = tuple(int(config_indices[i]) for i in idx) if config_indices is not None else ()
        zones.append(RiskZone(zid, mem, tuple(idx), tuple(mem.mean(axis=0)), segs, len(idx), cfg))
    return zones


def write_zones(zones, path):
    Path(path).write_text(json.dumps([z.to_json() for z in zones], indent=1) + "\n")
