"""Automated preprocessing of a twin: layers, fibers, AHA segments, SCCs."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import AxisUndefined, NoWallFound
from .voxel_model import (
    Layer,
    PacingSite,
    Surface,
    TissueLabel,
    mass_from_voxels,
    shell_depth,
)

log = logging.getLogger(__name__)

ENDO_HELIX_DEG = 60.0
EPI_HELIX_DEG = -60.0
APEX_CAP = 0.9  # long-axis fraction where segment 17 starts

OFFSETS_26 = np.array(
    [(di, dj, dk) for dk in (-1, 0, 1) for dj in (-1, 0, 1) for di in (-1, 0, 1) if (di, dj, dk) != (0, 0, 0)],
    dtype=np.int64,
)
OFFSETS_6 = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], dtype=np.int64)


def neighbor_table(dims, offsets=OFFSETS_26):
    """``(n_voxels, len(offsets))`` linear neighbor indices, -1 off-grid."""
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz, dtype=np.int64)
    i, j, k = idx % nx, (idx // nx) % ny, idx // (nx * ny)
    out = np.empty((idx.size, len(offsets)), dtype=np.int64)
    for c, (di, dj, dk) in enumerate(offsets):
        ii, jj, kk = i + di, j + dj, k + dk
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny) & (kk >= 0) & (kk < nz)
        out[:, c] = np.where(ok, ii + nx * (jj + ny * kk), -1)
    return out


# ------------------------------------------------------------------- depth


def transmural_depth(twin):
    """Per-voxel depth in [0, 1] (0 endocardium, 1 epicardium); NaN outside."""
    grid = twin.grid
    myo = twin.myocardium
    if not np.any(myo):
        raise NoWallFound("twin has no myocardial voxels")
    geom = twin.geometry
    kind = geom.get("kind")
    depth = np.full(grid.n_voxels, np.nan)
    if kind == "slab":
        axis = int(geom.get("normal_axis", 2))
        coord = np.asarray(grid.ijk(np.arange(grid.n_voxels))[axis], dtype=np.float64)
        n = grid.dims[axis]
        depth[myo] = coord[myo] / (n - 1) if n > 1 else 0.0
    elif kind == "ellipsoid_shell":
        pts = grid.centers_mm()[myo]
        d = shell_depth(pts, geom["center_mm"], geom["inner_axes_mm"], geom["wall_mm"])
        depth[myo] = np.clip(d, 0.0, 1.0)
    else:
        depth = _distance_depth(twin)
    return depth


def _distance_depth(twin):
    """Depth from distance transforms when the geometry kind is unknown.

    OUTSIDE voxels connected to the grid border are exterior (epicardial side);
    the remaining OUTSIDE components are cavities (endocardial side).
    """
    grid = twin.grid
    outside = grid.volume(~twin.myocardium)
    comp, n = ndimage.label(outside)
    border = np.zeros(outside.shape, bool)
    border[[0, -1], :, :] = border[:, [0, -1], :] = border[:, :, [0, -1]] = True
    exterior_ids = np.unique(comp[border & outside])
    exterior = np.isin(comp, exterior_ids[exterior_ids > 0])
    cavity = outside & ~exterior
    if not cavity.any() or not exterior.any():
        raise NoWallFound("cannot tell endocardial from epicardial boundary")
    d_endo = ndimage.distance_transform_edt(~cavity, sampling=grid.spacing_mm)
    d_epi = ndimage.distance_transform_edt(~exterior, sampling=grid.spacing_mm)
    d = d_endo / (d_endo + d_epi)
    out = grid.flatten(d)
    out[~twin.myocardium] = np.nan
    return out


def layers_from_depth(depth):
    layers = np.full(depth.shape, Layer.NONE, dtype=np.uint8)
    ok = ~np.isnan(depth)
    d = depth[ok]
    layers[ok] = np.where(d < 1.0 / 3.0, Layer.ENDO, np.where(d < 2.0 / 3.0, Layer.MID, Layer.EPI))
    return layers


def assign_layers(twin):
    return twin.replace(layers=layers_from_depth(transmural_depth(twin)))


# ------------------------------------------------------------------- fibers


def helix_angle_deg(depth, endo_deg=ENDO_HELIX_DEG, epi_deg=EPI_HELIX_DEG):
    return endo_deg + (epi_deg - endo_deg) * np.asarray(depth)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, v / n, 0.0)


def local_frames(twin, depth=None):
    """Circumferential, longitudinal and wall-normal unit vectors per voxel.

    Returns ``(circ, long, normal, degenerate)``; ``degenerate`` flags voxels
    where the long axis is parallel to the wall normal and the grid x axis was
    used instead.
    """
    grid = twin.grid
    n = grid.n_voxels
    geom = twin.geometry
    kind = geom.get("kind")
    if kind == "slab":
        axes = np.eye(3)
        circ = np.tile(axes[int(geom.get("circ_axis", 0))], (n, 1))
        long_ = np.tile(axes[int(geom.get("long_axis", 1))], (n, 1))
        normal = np.tile(axes[int(geom.get("normal_axis", 2))], (n, 1))
        return circ, long_, normal, np.zeros(n, bool)

    if depth is None:
        depth = transmural_depth(twin)
    if kind == "ellipsoid_shell":
        p = grid.centers_mm() - np.asarray(geom["center_mm"])
        a, c = geom["inner_axes_mm"]
        t = geom["wall_mm"]
        s = np.nan_to_num(depth)
        A, C = a + s * t, c + s * t
        normal = _unit(np.stack([p[:, 0] / A**2, p[:, 1] / A**2, p[:, 2] / C**2], axis=1))
    else:
        g = np.stack(np.gradient(np.nan_to_num(grid.volume(depth), nan=0.0), *grid.spacing_mm), axis=-1)
        normal = _unit(grid.flatten(g))
    axis = np.asarray(geom.get("long_axis", (0.0, 0.0, -1.0)), dtype=np.float64)
    base_dir = -axis / np.linalg.norm(axis)  # apex -> base
    long_ = base_dir - (normal @ base_dir)[:, None] * normal
    lnorm = np.linalg.norm(long_, axis=1)
    degenerate = lnorm < 1e-6
    if np.any(degenerate):
        ex = np.array([1.0, 0.0, 0.0])
        alt = ex - (normal[degenerate] @ ex)[:, None] * normal[degenerate]
        long_[degenerate] = alt
    long_ = _unit(long_)
    circ = _unit(np.cross(long_, normal))
    return circ, long_, normal, degenerate


def assign_fibers(twin, endo_deg=ENDO_HELIX_DEG, epi_deg=EPI_HELIX_DEG):
    """Rule-based fibers: helix angle linear in depth within the wall tangent plane."""
    depth = transmural_depth(twin)
    circ, long_, _, degenerate = local_frames(twin, depth)
    alpha = np.deg2rad(helix_angle_deg(np.nan_to_num(depth), endo_deg, epi_deg))
    f = np.cos(alpha)[:, None] * circ + np.sin(alpha)[:, None] * long_
    f = _unit(f)
    f[~twin.excitable] = 0.0
    fibers = f.astype(np.float32)
    # renormalize after the float32 cast so the stored vectors are unit to 1e-6
    norms = np.linalg.norm(fibers.astype(np.float64), axis=1)
    ok = norms > 0
    fibers[ok] = (fibers[ok].astype(np.float64) / norms[ok, None]).astype(np.float32)
    geometry = dict(twin.geometry)
    n_deg = int(np.count_nonzero(degenerate & twin.excitable))
    if n_deg:
        log.warning("degenerate fiber frame on %d voxels; fell back to grid x axis", n_deg)
        geometry["fiber_degenerate_voxels"] = n_deg
    return twin.replace(fibers=fibers, geometry=geometry)


# ---------------------------------------------------------------------- AHA


def segment_from_coords(u, phi):
    """17-segment id from long-axis fraction ``u`` (0 base, 1 apex) and
    circumferential fraction ``phi`` in [0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    phi = np.mod(np.asarray(phi, dtype=np.float64), 1.0)
    band = np.minimum((u / (APEX_CAP / 3.0)).astype(np.int64), 2)
    six = np.minimum((phi * 6).astype(np.int64), 5)
    four = np.minimum((phi * 4).astype(np.int64), 3)
    seg = np.where(band == 0, 1 + six, np.where(band == 1, 7 + six, 13 + four))
    return np.where(u >= APEX_CAP, 17, seg).astype(np.uint8)


def long_axis_coords(twin):
    """``(u, phi)`` per voxel for the twin's geometry."""
    grid = twin.grid
    geom = twin.geometry
    kind = geom.get("kind")
    idx = np.arange(grid.n_voxels)
    if kind == "slab":
        ijk = grid.ijk(idx)
        la, ca = int(geom.get("long_axis", 1)), int(geom.get("circ_axis", 0))
        u = (ijk[la] + 0.5) / grid.dims[la]
        phi = (ijk[ca] + 0.5) / grid.dims[ca]
        return u, phi
    if "long_axis" not in geom:
        raise AxisUndefined("geometry declares no long axis")
    axis = np.asarray(geom["long_axis"], dtype=np.float64)
    if not np.all(np.isfinite(axis)) or np.linalg.norm(axis) == 0:
        raise AxisUndefined("long axis is degenerate")
    axis = axis / np.linalg.norm(axis)  # base -> apex
    pts = grid.centers_mm()
    myo = twin.myocardium
    origin = np.asarray(geom.get("center_mm", pts[myo].mean(axis=0)))
    proj = (pts - origin) @ axis
    if kind == "ellipsoid_shell":
        # normalize by the local semi-axis so u is constant across the wall and
        # the apical cap keeps endocardial voxels
        a, c = geom["inner_axes_mm"]
        s = np.clip(shell_depth(pts, origin, (a, c), geom["wall_mm"]), 0.0, 1.0)
        u = np.clip(proj / (c + s * geom["wall_mm"]), 0.0, 1.0)
    else:
        lo, hi = proj[myo].min(), proj[myo].max()
        u = (proj - lo) / max(hi - lo, 1e-12)
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    rel = pts - origin
    phi = np.arctan2(rel @ e2, rel @ e1) / (2 * np.pi)
    return u, np.mod(phi, 1.0)


def surface_mask(twin):
    """Myocardial voxels with a 6-neighbor that is OUTSIDE or off-grid."""
    myo = twin.myocardium
    nb = neighbor_table(twin.grid.dims, OFFSETS_6)
    open_face = (nb < 0) | ~myo[np.maximum(nb, 0)]
    return myo & open_face.any(axis=1)


def aha_partition(twin, capture_radius_mm=2.0):
    """Assign AHA segments and place the 34 pacing sites."""
    if twin.layers is None:
        raise AxisUndefined("assign_layers must run before aha_partition")
    myo = twin.myocardium
    u, phi = long_axis_coords(twin)
    aha = np.zeros(twin.grid.n_voxels, dtype=np.uint8)
    aha[myo] = segment_from_coords(u[myo], phi[myo])

    pts = twin.grid.centers_mm()
    surf = surface_mask(twin)
    sites = []
    for surface, layer, base_id in ((Surface.ENDO, Layer.ENDO, 0), (Surface.EPI, Layer.EPI, 17)):
        for seg in range(1, 18):
            in_seg = aha == seg
            if not in_seg.any():
                raise AxisUndefined(f"AHA segment {seg} is empty; grid too small")
            centroid = pts[in_seg].mean(axis=0)
            cand = np.flatnonzero(in_seg & surf & (twin.layers == layer))
            if cand.size == 0:
                cand = np.flatnonzero(in_seg & (twin.layers == layer))
            if cand.size == 0:
                raise AxisUndefined(f"segment {seg} has no {surface.value} voxels")
            d2 = ((pts[cand] - centroid) ** 2).sum(axis=1)
            best = int(cand[np.argmin(d2)])  # argmin returns the lowest index on ties
            i, j, k = (int(v) for v in twin.grid.ijk(best))
            sites.append(PacingSite(base_id + seg, seg, surface, (i, j, k), capture_radius_mm))
    return twin.replace(aha_segment=aha, pacing_sites=tuple(sites))


def capture_region(twin, site, radius_mm=None):
    """Excitable voxel indices within the capture radius of ``site``."""
    radius = site.capture_radius_mm if radius_mm is None else radius_mm
    c = np.asarray(twin.grid.origin_mm) + np.asarray(site.center_voxel) * np.asarray(twin.grid.spacing_mm)
    d = np.linalg.norm(twin.grid.centers_mm() - c, axis=1)
    return np.flatnonzero((d <= radius + 1e-9) & twin.excitable)


# ---------------------------------------------------------------------- SCCs


@dataclass
class SCC:
    id: int
    centerline: list
    length_mm: float
    mass_g: float
    endpoints: tuple

    def to_json(self):
        return {
            "id": self.id,
            "centerline": [list(map(int, v)) for v in self.centerline],
            "length_mm": round(float(self.length_mm), 6),
            "mass_g": round(float(self.mass_g), 6),
            "endpoints": [list(map(int, v)) for v in self.endpoints],
        }


def _run_stops(lab, axis, sign, max_steps):
    """Label of the first non-BZ voxel walking from each voxel along one
    direction (OUTSIDE when walking off-grid); -1 when not reached within
    ``max_steps``."""
    n = lab.shape[axis]
    stops = np.full(lab.shape, -1, dtype=np.int16)
    pending = np.ones(lab.shape, bool)
    for step in range(1, max_steps + 1):
        shifted = np.full(lab.shape, TissueLabel.OUTSIDE, dtype=lab.dtype)
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if step < n:
            if sign > 0:
                src[axis], dst[axis] = slice(step, None), slice(0, n - step)
            else:
                src[axis], dst[axis] = slice(0, n - step), slice(step, None)
            shifted[tuple(dst)] = lab[tuple(src)]
        hit = pending & (shifted != TissueLabel.BORDER_ZONE)
        stops[hit] = shifted[hit]
        pending &= ~hit
    return stops


def enclosed_bz(twin, max_width_mm=10.0):
    """BZ voxels whose cross-section is closed by core zone.

    A voxel is enclosed when along at least two grid axes the BZ run through
    it ends in CZ or OUTSIDE on both sides, within ``max_width_mm``, and at
    least one of those ends is CZ.
    """
    grid = twin.grid
    lab = grid.volume(grid.labels)
    bz = lab == TissueLabel.BORDER_ZONE
    bounded = np.zeros((3,) + lab.shape, bool)
    has_cz = np.zeros((3,) + lab.shape, bool)
    for axis in range(3):
        steps = max(1, int(np.ceil(max_width_mm / grid.spacing_mm[axis])))
        a = _run_stops(lab, axis, +1, steps)
        b = _run_stops(lab, axis, -1, steps)
        closed = lambda s: (s == TissueLabel.CORE_ZONE) | (s == TissueLabel.OUTSIDE)  # noqa: E731
        bounded[axis] = closed(a) & closed(b)
        has_cz[axis] = (a == TissueLabel.CORE_ZONE) | (b == TissueLabel.CORE_ZONE)
    n_bounded = bounded.sum(axis=0)
    any_cz = (bounded & has_cz).any(axis=0)
    return grid.flatten(bz & (n_bounded >= 2) & any_cz)


def _bfs(start_set, allowed, nbr, targets=None):
    """Multi-source BFS over ``allowed`` voxels. Returns (dist, parent) dicts,
    stopping at the first target reached when ``targets`` is given."""
    dist = {}
    parent = {}
    q = deque()
    for s in start_set:
        s = int(s)
        dist[s] = 0
        parent[s] = -1
        q.append(s)
        if targets is not None and s in targets:
            return dist, parent, s
    while q:
        v = q.popleft()
        for w in nbr[v]:
            w = int(w)
            if w < 0 or not allowed[w] or w in dist:
                continue
            dist[w] = dist[v] + 1
            parent[w] = v
            if targets is not None and w in targets:
                return dist, parent, w
            q.append(w)
    return dist, parent, None


def _path(parent, end):
    out = []
    while end != -1:
        out.append(end)
        end = parent[end]
    return out[::-1]


def _chain_from_skeleton(skel_idx, nbr):
    """Order skeleton voxels as the longest shortest path (double BFS)."""
    allowed = np.zeros(nbr.shape[0], bool)
    allowed[skel_idx] = True
    start = int(min(skel_idx))
    dist, _, _ = _bfs([start], allowed, nbr)
    far = max(dist, key=lambda v: (dist[v], -v))
    dist, parent, _ = _bfs([far], allowed, nbr)
    other = max(dist, key=lambda v: (dist[v], -v))
    chain = _path(parent, other)
    if chain[0] > chain[-1]:
        chain = chain[::-1]
    return chain


def extract_sccs(twin, max_width_mm=10.0, min_length_mm=3.0):
    """Slow conduction channels: BZ corridors through CZ with two healthy ends."""
    grid = twin.grid
    labels = grid.labels
    bz = labels == TissueLabel.BORDER_ZONE
    healthy = labels == TissueLabel.HEALTHY
    if not bz.any():
        return []
    nbr = neighbor_table(grid.dims)
    safe = np.maximum(nbr, 0)
    valid = nbr >= 0
    touches_healthy = bz & (valid & healthy[safe]).any(axis=1)
    corridor = enclosed_bz(twin, max_width_mm)
    comp, n_comp = ndimage.label(grid.volume(corridor), structure=np.ones((3, 3, 3)))
    comp = grid.flatten(comp)
    excitable = (labels == TissueLabel.HEALTHY) | bz

    sccs = []
    for cid in range(1, n_comp + 1):
        members = comp == cid
        # mouths: corridor voxels adjacent to excitable tissue outside the corridor
        outside_nb = valid & excitable[safe] & ~members[safe]
        mouth = members & outside_nb.any(axis=1)
        mouth_vol, n_mouth = ndimage.label(grid.volume(mouth), structure=np.ones((3, 3, 3)))
        if n_mouth < 2:
            continue
        skel = skeletonize(grid.volume(members))
        skel_idx = np.flatnonzero(grid.flatten(skel.astype(bool)))
        if skel_idx.size == 0:
            skel_idx = np.flatnonzero(members)
        chain = _chain_from_skeleton(skel_idx, nbr)
        # extend both ends through BZ to voxels touching healthy tissue
        hset = set(np.flatnonzero(touches_healthy).tolist())
        _, par, hit = _bfs([chain[0]], bz, nbr, hset)
        head = _path(par, hit)[::-1] if hit is not None else [chain[0]]
        _, par, hit = _bfs([chain[-1]], bz, nbr, hset)
        tail = _path(par, hit) if hit is not None else [chain[-1]]
        full = head[:-1] + chain + tail[1:]
        if full[0] == full[-1]:
            continue
        xyz = grid.centers_mm(np.asarray(full))
        length = float(np.linalg.norm(np.diff(xyz, axis=0), axis=1).sum())
        if length < min_length_mm:
            continue
        ijk = [tuple(int(c) for c in grid.ijk(v)) for v in full]
        mass = mass_from_voxels(int(members.sum()), grid.voxel_volume_mm3)
        sccs.append(SCC(len(sccs) + 1, ijk, length, mass, (ijk[0], ijk[-1])))
    return sccs


def preprocess(twin, capture_radius_mm=2.0, force=False):
    """Run whichever of layers / fibers / AHA partition is still missing."""
    if force or twin.layers is None:
        twin = assign_layers(twin)
    if force or twin.fibers is None:
        twin = assign_fibers(twin)
    if force or twin.aha_segment is None or len(twin.pacing_sites) != 34:
        twin = aha_partition(twin, capture_radius_mm)
    return twin.validate()
