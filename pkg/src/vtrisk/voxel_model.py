"""Voxel digital twin: data model, on-disk format, phantoms and mass metrics.

Per-voxel arrays are flat, length ``nx*ny*nz``, in x-fastest order
(``index = i + nx*(j + ny*k)``). ``DigitalTwin.volume(arr)`` gives an
``[i, j, k]`` view.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    IllegalLabelByte,
    IoFailure,
    MissingFile,
    NonUnitFiber,
    ScarDoesNotFit,
    InputDataError,
)

MYOCARDIAL_DENSITY_G_PER_ML = 1.053
FIBER_NORM_TOL = 1e-6


class TissueLabel(enum.IntEnum):
    OUTSIDE = 0
    HEALTHY = 1
    BORDER_ZONE = 2
    CORE_ZONE = 3


class Layer(enum.IntEnum):
    NONE = 0
    ENDO = 1
    MID = 2
    EPI = 3


class Surface(str, enum.Enum):
    ENDO = "ENDO"
    EPI = "EPI"


EXCITABLE = (TissueLabel.HEALTHY, TissueLabel.BORDER_ZONE)


def _frozen(arr):
    if arr is None:
        return None
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    dims: tuple
    spacing_mm: tuple
    origin_mm: tuple
    labels: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or min(dims) < 1:
            raise DimensionMismatch(f"dims must be three positive ints, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DimensionMismatch(f"spacing must be three positive values, got {self.spacing_mm}")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size != dims[0] * dims[1] * dims[2]:
            raise DimensionMismatch(
                f"labels has {labels.size} entries, expected {dims[0] * dims[1] * dims[2]}"
            )
        bad = labels[(labels < 0) | (labels > 3)] if labels.size else labels
        if bad.size:
            raise IllegalLabelByte(f"illegal tissue label {int(bad[0])}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def ijk(self, index):
        """Linear index (or array of them) to ``(i, j, k)``."""
        nx, ny, _ = self.dims
        index = np.asarray(index)
        return index % nx, (index // nx) % ny, index // (nx * ny)

    def index(self, i, j, k):
        nx, ny, _ = self.dims
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def centers_mm(self, index=None):
        """Voxel-center coordinates in mm, shape ``(n, 3)``."""
        if index is None:
            index = np.arange(self.n_voxels)
        i, j, k = self.ijk(index)
        ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
        return np.asarray(self.origin_mm) + ijk * np.asarray(self.spacing_mm)

    def volume(self, arr):
        """View a flat per-voxel array as ``[i, j, k, ...]``."""
        nx, ny, nz = self.dims
        arr = np.asarray(arr)
        return arr.reshape((nz, ny, nx) + arr.shape[1:]).transpose((2, 1, 0) + tuple(range(3, arr.ndim + 2)))

    def flatten(self, vol):
        """Inverse of :meth:`volume`."""
        vol = np.asarray(vol)
        extra = tuple(range(3, vol.ndim))
        return np.ascontiguousarray(vol.transpose((2, 1, 0) + extra)).reshape((self.n_voxels,) + vol.shape[3:])


@dataclass(frozen=True)
class PacingSite:
    id: int
    aha_segment: int
    surface: Surface
    center_voxel: tuple
    capture_radius_mm: float = 2.0

    def to_json(self):
        return {
            "id": int(self.id),
            "aha_segment": int(self.aha_segment),
            "surface": self.surface.value,
            "center_voxel": [int(c) for c in self.center_voxel],
            "capture_radius_mm": float(self.capture_radius_mm),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            id=int(d["id"]),
            aha_segment=int(d["aha_segment"]),
            surface=Surface(d["surface"]),
            center_voxel=tuple(int(c) for c in d["center_voxel"]),
            capture_radius_mm=float(d.get("capture_radius_mm", 2.0)),
        )


@dataclass(frozen=True, eq=False)
class DigitalTwin:
    """Anatomical substrate. Optional fields are ``None`` until preprocessing."""

    grid: VoxelGrid
    layers: np.ndarray | None = None
    fibers: np.ndarray | None = None
    aha_segment: np.ndarray | None = None
    pacing_sites: tuple = ()
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_voxels
        if self.layers is not None:
            layers = np.asarray(self.layers, dtype=np.uint8)
            if layers.shape != (n,):
                raise DimensionMismatch(f"layers has shape {layers.shape}, expected ({n},)")
            if np.any(layers > 3):
                raise InputDataError("layer byte outside 0..3")
            object.__setattr__(self, "layers", _frozen(layers))
        if self.fibers is not None:
            fibers = np.asarray(self.fibers, dtype=np.float32)
            if fibers.shape != (n, 3):
                raise DimensionMismatch(f"fibers has shape {fibers.shape}, expected ({n}, 3)")
            object.__setattr__(self, "fibers", _frozen(fibers))
        if self.aha_segment is not None:
            aha = np.asarray(self.aha_segment, dtype=np.uint8)
            if aha.shape != (n,):
                raise DimensionMismatch(f"aha has shape {aha.shape}, expected ({n},)")
            if np.any(aha > 17):
                raise InputDataError("AHA segment outside 0..17")
            object.__setattr__(self, "aha_segment", _frozen(aha))
        object.__setattr__(self, "pacing_sites", tuple(self.pacing_sites))
        object.__setattr__(self, "geometry", dict(self.geometry))

    @property
    def labels(self):
        return self.grid.labels

    @property
    def myocardium(self):
        return self.grid.labels != TissueLabel.OUTSIDE

    @property
    def excitable(self):
        lab = self.grid.labels
        return (lab == TissueLabel.HEALTHY) | (lab == TissueLabel.BORDER_ZONE)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def site(self, site_id):
        for s in self.pacing_sites:
            if s.id == site_id:
                return s
        raise KeyError(f"no pacing site {site_id}")

    def validate(self):
        """Check the cross-field invariants; raises on the first violation."""
        myo = self.myocardium
        if self.layers is not None:
            if np.any((self.layers == Layer.NONE) != ~myo):
                raise InputDataError("layers must be NONE exactly on OUTSIDE voxels")
        if self.fibers is not None:
            norms = np.linalg.norm(self.fibers.astype(np.float64), axis=1)
            exc = self.excitable
            if np.any(np.abs(norms[exc] - 1.0) > FIBER_NORM_TOL):
                raise NonUnitFiber("fiber vector on excitable voxel is not unit length")
            if np.any(norms[~exc] != 0.0):
                raise NonUnitFiber("fiber vector must be zero on OUTSIDE/CORE_ZONE voxels")
        if self.aha_segment is not None:
            if np.any((self.aha_segment == 0) != ~myo):
                raise InputDataError("AHA segment 0 must occur exactly on OUTSIDE voxels")
        return self

    def __eq__(self, other):
        if not isinstance(other, DigitalTwin):
            return NotImplemented
        g, h = self.grid, other.grid
        if (g.dims, g.spacing_mm, g.origin_mm) != (h.dims, h.spacing_mm, h.origin_mm):
            return False
        if not np.array_equal(g.labels, h.labels):
            return False
        for name in ("layers", "fibers", "aha_segment"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.dtype != b.dtype or a.tobytes() != b.tobytes()):
                return False
        return self.pacing_sites == other.pacing_sites and self.geometry == other.geometry


# --------------------------------------------------------------------------- I/O

_FILES = {
    "labels": "labels.raw",
    "layers": "layers.raw",
    "fibers": "fibers.raw",
    "aha": "aha.raw",
}


def _read_raw(path, dtype, count):
    if not path.exists():
        raise MissingFile(f"missing {path.name}")
    data = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    if data.size != count:
        raise DimensionMismatch(f"{path.name} holds {data.size} values, expected {count}")
    return data.astype(np.dtype(dtype).newbyteorder("="))


def load_twin(path):
    """Read and validate a twin directory written by :func:`save_twin`."""
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.exists():
        raise MissingFile(f"{header_path} not found")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputDataError(f"header.json: {exc}") from exc
    if header.get("order", "x-fastest") != "x-fastest":
        raise InputDataError(f"unsupported voxel order {header.get('order')!r}")
    dims = tuple(int(d) for d in header["dims"])
    n = dims[0] * dims[1] * dims[2]
    files = header.get("files", {"labels": _FILES["labels"]})
    if "labels" not in files:
        raise MissingFile("header lists no labels file")

    labels = _read_raw(path / files["labels"], np.uint8, n)
    if labels.size and labels.max() > 3:
        raise IllegalLabelByte(f"label byte {int(labels[labels > 3][0])} in {files['labels']}")
    grid = VoxelGrid(dims, header["spacing_mm"], header.get("origin_mm", (0.0, 0.0, 0.0)), labels)

    layers = fibers = aha = None
    if "layers" in files:
        layers = _read_raw(path / files["layers"], np.uint8, n)
    if "fibers" in files:
        fibers = _read_raw(path / files["fibers"], np.float32, 3 * n).reshape(n, 3)
    if "aha" in files:
        aha = _read_raw(path / files["aha"], np.uint8, n)
    sites = tuple(PacingSite.from_json(s) for s in header.get("pacing_sites", []))
    twin = DigitalTwin(grid, layers, fibers, aha, sites, header.get("geometry", {}))
    return twin.validate()


def _header(twin, files):
    g = twin.grid
    return {
        "dims": list(g.dims),
        "spacing_mm": list(g.spacing_mm),
        "origin_mm": list(g.origin_mm),
        "order": "x-fastest",
        "files": files,
        "geometry": twin.geometry,
        "pacing_sites": [s.to_json() for s in twin.pacing_sites],
    }


def save_twin(twin, path):
    path = Path(path)
    files = {"labels": _FILES["labels"]}
    arrays = {"labels": (twin.grid.labels, "u1")}
    if twin.layers is not None:
        files["layers"] = _FILES["layers"]
        arrays["layers"] = (twin.layers, "u1")
    if twin.fibers is not None:
        files["fibers"] = _FILES["fibers"]
        arrays["fibers"] = (twin.fibers, "<f4")
    if twin.aha_segment is not None:
        files["aha"] = _FILES["aha"]
        arrays["aha"] = (twin.aha_segment, "u1")
    try:
        path.mkdir(parents=True, exist_ok=True)
        for key, (arr, dtype) in arrays.items():
            (path / files[key]).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        # drop stale optional arrays from a previous save
        for key, name in _FILES.items():
            if key not in files and (path / name).exists():
                os.remove(path / name)
        (path / "header.json").write_text(json.dumps(_header(twin, files), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write twin to {path}: {exc}") from exc


# ---------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class ScarSpec:
    cz_extent_mm: tuple = (20.0, 20.0, 10.0)
    channel_width_mm: float = 3.0
    channel_length_mm: float | None = None
    bz_rim_mm: float = 0.0
    center_mm: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "cz_extent_mm", tuple(float(v) for v in self.cz_extent_mm))
        if self.channel_width_mm <= 0:
            raise ScarDoesNotFit("channel_width_mm must be > 0")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "SLAB"
    dims: tuple = (60, 60, 10)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    scar: ScarSpec | None = None
    wall_mm: float = 8.0

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in ("SLAB", "ELLIPSOID_SHELL"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        scar = d.pop("scar", None)
        if scar is not None:
            scar = ScarSpec(**scar)
        return cls(scar=scar, **d)

    def to_dict(self):
        out = dataclasses.asdict(self)
        return out


def _span(center, extent, spacing, n):
    """Voxel range [lo, hi) of ``extent`` mm centered at ``center`` mm."""
    nv = int(round(extent / spacing))
    lo = int(round(center / spacing - nv / 2.0))
    return lo, lo + nv


def _slab_phantom(spec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    lab = np.full((nx, ny, nz), TissueLabel.HEALTHY, dtype=np.uint8)
    geometry = {"kind": "slab", "normal_axis": 2, "long_axis": 1, "circ_axis": 0}
    scar = spec.scar
    if scar is not None:
        ex, ey, ez = scar.cz_extent_mm
        if scar.channel_length_mm is not None:
            ex = scar.channel_length_mm
        cx, cy = (scar.center_mm or ((nx - 1) * sx / 2.0 + sx / 2.0, (ny - 1) * sy / 2.0 + sy / 2.0))[:2]
        i0, i1 = _span(cx, ex, sx, nx)
        j0, j1 = _span(cy, ey, sy, ny)
        kz = min(nz, max(1, int(round(ez / sz))))
        rim_i = int(round(scar.bz_rim_mm / sx))
        rim_j = int(round(scar.bz_rim_mm / sy))
        nw = int(round(scar.channel_width_mm / sy))
        if nw < 1:
            raise ScarDoesNotFit("channel narrower than one voxel")
        if i0 - rim_i < 1 or i1 + rim_i > nx - 1 or j0 - rim_j < 0 or j1 + rim_j > ny:
            raise ScarDoesNotFit("scar block (plus rim) does not fit inside the slab with healthy ends")
        if nw > (j1 - j0) - 2:
            raise ScarDoesNotFit("channel leaves no core zone on its flanks")
        k0 = (nz - kz) // 2
        if rim_i or rim_j:
            lab[i0 - rim_i:i1 + rim_i, max(j0 - rim_j, 0):j1 + rim_j, k0:k0 + kz] = TissueLabel.BORDER_ZONE
        lab[i0:i1, j0:j1, k0:k0 + kz] = TissueLabel.CORE_ZONE
        c0 = j0 + ((j1 - j0) - nw) // 2
        lab[i0:i1, c0:c0 + nw, k0:k0 + kz] = TissueLabel.BORDER_ZONE
        geometry["scar_box_voxels"] = [[i0, i1], [j0, j1], [k0, k0 + kz]]
        geometry["channel_voxels"] = [[i0, i1], [c0, c0 + nw], [k0, k0 + kz]]
    return lab, geometry


def shell_depth(points_mm, center_mm, inner_axes_mm, wall_mm, iterations=50):
    """Normalized transmural depth of points in a truncated ellipsoidal shell.

    Depth ``s`` solves ``(x^2+y^2)/(a+s*t)^2 + z^2/(c+s*t)^2 = 1``; it is 0 on
    the inner (endocardial) ellipsoid and 1 on the outer one.
    """
    p = np.asarray(points_mm, dtype=np.float64) - np.asarray(center_mm, dtype=np.float64)
    r2 = p[:, 0] ** 2 + p[:, 1] ** 2
    z2 = p[:, 2] ** 2
    a, c = inner_axes_mm
    lo = np.full(len(p), -1.0)
    hi = np.full(len(p), 2.0)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        f = r2 / (a + mid * wall_mm) ** 2 + z2 / (c + mid * wall_mm) ** 2 - 1.0
        outside = f > 0
        lo = np.where(outside, mid, lo)
        hi = np.where(outside, hi, mid)
    return 0.5 * (lo + hi)


def _shell_phantom(spec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    t = float(spec.wall_mm)
    center = np.array([(nx - 1) * sx / 2.0, (ny - 1) * sy / 2.0, (nz - 1) * sz - sz])
    a_out = min((nx - 1) * sx, (ny - 1) * sy) / 2.0 - max(sx, sy)
    c_out = center[2] - sz
    a_in, c_in = a_out - t, c_out - t
    if a_in <= 0 or c_in <= 0:
        raise ScarDoesNotFit("grid too small for the requested wall thickness")
    grid = VoxelGrid(spec.dims, spec.spacing_mm, (0.0, 0.0, 0.0), np.zeros(nx * ny * nz, np.uint8))
    pts = grid.centers_mm()
    depth = shell_depth(pts, center, (a_in, c_in), t)
    myo = (depth >= 0.0) & (depth <= 1.0) & (pts[:, 2] <= center[2])
    lab_flat = np.where(myo, TissueLabel.HEALTHY, TissueLabel.OUTSIDE).astype(np.uint8)
    geometry = {
        "kind": "ellipsoid_shell",
        "center_mm": center.tolist(),
        "inner_axes_mm": [a_in, c_in],
        "wall_mm": t,
        "long_axis": [0.0, 0.0, -1.0],
    }
    scar = spec.scar
    if scar is not None:
        ex, ey, ez = scar.cz_extent_mm
        if scar.channel_length_mm is not None:
            ey = scar.channel_length_mm
        mid_r = a_in + t / 2.0
        zc = center[2] - 0.5 * c_in
        ctr = np.asarray(scar.center_mm) if scar.center_mm is not None else np.array(
            [center[0] + mid_r * np.sqrt(1 - 0.25), center[1], zc]
        )
        rel = pts - ctr
        in_box = (np.abs(rel[:, 0]) <= ex / 2) & (np.abs(rel[:, 1]) <= ey / 2) & (np.abs(rel[:, 2]) <= ez / 2)
        in_rim = (
            (np.abs(rel[:, 0]) <= ex / 2 + scar.bz_rim_mm)
            & (np.abs(rel[:, 1]) <= ey / 2 + scar.bz_rim_mm)
            & (np.abs(rel[:, 2]) <= ez / 2 + scar.bz_rim_mm)
        )
        channel = in_box & (np.abs(rel[:, 2]) < scar.channel_width_mm / 2)
        if not np.any(myo & in_box & ~channel) or not np.any(myo & channel):
            raise ScarDoesNotFit("scar box misses the myocardial wall")
        if scar.channel_width_mm >= ez - 2 * sz:
            raise ScarDoesNotFit("channel leaves no core zone on its flanks")
        lab_flat[myo & in_rim] = TissueLabel.BORDER_ZONE
        lab_flat[myo & in_box] = TissueLabel.CORE_ZONE
        lab_flat[myo & channel] = TissueLabel.BORDER_ZONE
        geometry["scar_center_mm"] = ctr.tolist()
    return grid.volume(lab_flat), geometry


def packaged_phantom_names():
    root = resources.files("vtrisk.data").joinpath("phantoms")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def packaged_phantom(name):
    """Shipped phantom spec by name (``channel``, ``control``, ...)."""
    if name not in packaged_phantom_names():
        raise KeyError(f"no packaged phantom {name!r}; have {packaged_phantom_names()}")
    text = resources.files("vtrisk.data").joinpath("phantoms", f"{name}.json").read_text()
    return PhantomSpec.from_dict(json.loads(text))


def generate_phantom(spec):
    """Deterministic synthetic twin (labels + geometry only; run anatomy to finish)."""
    if spec.kind == "SLAB":
        vol, geometry = _slab_phantom(spec)
    else:
        vol, geometry = _shell_phantom(spec)
    nx, ny, nz = spec.dims
    labels = np.ascontiguousarray(np.asarray(vol).transpose(2, 1, 0)).reshape(-1)
    grid = VoxelGrid(spec.dims, spec.spacing_mm, (0.0, 0.0, 0.0), labels)
    if not np.any(grid.labels != TissueLabel.OUTSIDE):
        raise ScarDoesNotFit("phantom contains no myocardium")
    return DigitalTwin(grid, geometry=geometry)


# ------------------------------------------------------------------------ metrics


def voxel_count(twin, label):
    return int(np.count_nonzero(twin.grid.labels == TissueLabel(label)))


def mass_from_voxels(n_voxels, voxel_volume_mm3, density=MYOCARDIAL_DENSITY_G_PER_ML):
    return n_voxels * voxel_volume_mm3 / 1000.0 * density


def tissue_mass(twin, label, density=MYOCARDIAL_DENSITY_G_PER_ML):
    """Mass in grams of all voxels carrying ``label``."""
    return mass_from_voxels(voxel_count(twin, label), twin.grid.voxel_volume_mm3, density)


def myocardial_mass(twin, density=MYOCARDIAL_DENSITY_G_PER_ML):
    n = int(np.count_nonzero(twin.myocardium))
    return mass_from_voxels(n, twin.grid.voxel_volume_mm3, density)
