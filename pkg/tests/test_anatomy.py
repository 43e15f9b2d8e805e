import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_channel_voxels
from vtrisk.anatomy import (OFFSETS_26, aha_partition, assign_fibers, assign_layers, capture_region,
                            extract_sccs, helix_angle_deg, layers_from_depth, neighbor_table,
                            preprocess, segment_from_coords, transmural_depth)
from vtrisk.errors import NoWallFound
from vtrisk.voxel_model import (DigitalTwin, Layer, PhantomSpec, ScarSpec, Surface, TissueLabel,
                                VoxelGrid, generate_phantom)

CHANNEL = PhantomSpec("SLAB", (40, 30, 3), scar=ScarSpec(cz_extent_mm=(20, 14, 3), channel_width_mm=3))


@pytest.fixture(scope="module")
def channel():
    return preprocess(generate_phantom(CHANNEL))


@pytest.fixture(scope="module")
def shell():
    return preprocess(generate_phantom(PhantomSpec("ELLIPSOID_SHELL", (40, 40, 40), wall_mm=6)))


def test_neighbor_table_matches_offsets():
    dims = (4, 3, 5)
    nb = neighbor_table(dims)
    g = VoxelGrid(dims, (1, 1, 1), (0, 0, 0), np.ones(60, np.uint8))
    v = int(g.index(1, 1, 2))
    for c, o in enumerate(OFFSETS_26):
        assert nb[v, c] == g.index(1 + o[0], 1 + o[1], 2 + o[2])
    corner = nb[0]
    assert np.count_nonzero(corner >= 0) == 7


def test_all_outside_has_no_wall():
    twin = DigitalTwin(VoxelGrid((3, 3, 3), (1, 1, 1), (0, 0, 0), np.zeros(27, np.uint8)))
    with pytest.raises(NoWallFound):
        transmural_depth(twin)


def test_layer_thirds():
    d = np.array([0.0, 0.2, 1 / 3, 0.5, 2 / 3, 1.0, np.nan])
    assert layers_from_depth(d).tolist() == [Layer.ENDO, Layer.ENDO, Layer.MID, Layer.MID,
                                             Layer.EPI, Layer.EPI, Layer.NONE]


def test_slab_layers_follow_depth():
    twin = assign_layers(generate_phantom(PhantomSpec("SLAB", (6, 6, 9))))
    k = twin.grid.ijk(np.arange(twin.grid.n_voxels))[2]
    assert set(twin.layers[k <= 2]) == {Layer.ENDO}
    assert set(twin.layers[(k >= 3) & (k <= 5)]) == {Layer.MID}
    assert set(twin.layers[k >= 6]) == {Layer.EPI}


def test_shell_layers(shell):
    myo = shell.myocardium
    assert np.all((shell.layers == Layer.NONE) == ~myo)
    assert {Layer.ENDO, Layer.MID, Layer.EPI} <= set(np.unique(shell.layers[myo]).tolist())


def _check_fibers(twin, depths):
    """Unit norm everywhere excitable and helix angle linear in depth."""
    depth = transmural_depth(twin)
    exc = twin.excitable
    norms = np.linalg.norm(twin.fibers.astype(float), axis=1)
    assert np.all(np.abs(norms[exc] - 1) <= 1e-6)
    assert np.all(norms[~exc] == 0)
    geom = twin.geometry
    circ = np.eye(3)[geom["circ_axis"]]
    long_ = np.eye(3)[geom["long_axis"]]
    for d in depths:
        sel = exc & np.isclose(depth, d)
        assert sel.any()
        f = twin.fibers[sel].astype(float)
        angle = np.degrees(np.arctan2(f @ long_, f @ circ))
        assert np.allclose(angle, 60 - 120 * d, atol=1e-3)


def test_fibers_helix_five_depths():
    twin = preprocess(generate_phantom(PhantomSpec("SLAB", (8, 8, 5))))
    _check_fibers(twin, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_helix_angle_endpoints():
    assert helix_angle_deg(0.0) == 60.0
    assert helix_angle_deg(1.0) == -60.0
    assert helix_angle_deg(0.5) == 0.0


def test_shell_fibers_unit(shell):
    exc = shell.excitable
    norms = np.linalg.norm(shell.fibers.astype(float), axis=1)
    assert np.all(np.abs(norms[exc] - 1) <= 1e-6)
    assert np.all(norms[~exc] == 0)


def test_cz_has_no_fiber(channel):
    cz = channel.labels == TissueLabel.CORE_ZONE
    assert cz.any() and not channel.fibers[cz].any()


@settings(max_examples=200)
@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_segment_ids_in_range(u, phi):
    seg = int(segment_from_coords(u, phi))
    assert 1 <= seg <= 17
    if u >= 0.9:
        assert seg == 17


def _check_sites(twin):
    sites = twin.pacing_sites
    assert len(sites) == 34
    pairs = {(s.aha_segment, s.surface) for s in sites}
    assert pairs == {(seg, surf) for seg in range(1, 18) for surf in (Surface.ENDO, Surface.EPI)}
    assert sorted(s.id for s in sites) == list(range(1, 35))
    for s in sites:
        v = int(twin.grid.index(*s.center_voxel))
        assert twin.aha_segment[v] == s.aha_segment
        want = Layer.ENDO if s.surface == Surface.ENDO else Layer.EPI
        assert twin.layers[v] == want


def test_sites_channel(channel):
    _check_sites(channel)


def test_sites_shell(shell):
    _check_sites(shell)


@settings(max_examples=8, deadline=None)
@given(st.integers(12, 30), st.integers(12, 30), st.integers(3, 6))
def test_sites_slabs(nx, ny, nz):
    twin = aha_partition(assign_layers(generate_phantom(PhantomSpec("SLAB", (nx, ny, nz)))))
    _check_sites(twin)


def test_capture_region_is_excitable_ball(channel):
    for s in channel.pacing_sites:
        reg = capture_region(channel, s)
        assert reg.size > 0 or channel.labels[channel.grid.index(*s.center_voxel)] == TissueLabel.CORE_ZONE
        assert channel.excitable[reg].all()
        c = np.asarray(s.center_voxel, float)
        assert np.all(np.linalg.norm(channel.grid.centers_mm(reg) - c, axis=1) <= 2.0 + 1e-9)


def test_one_scc_on_channel(channel):
    sccs = extract_sccs(channel)
    assert len(sccs) == 1
    n = len(sccs[0].centerline)
    assert abs(n - bfs_channel_voxels(channel)) <= 2
    # the centerline is a 26-connected chain of BZ voxels
    cl = np.array(sccs[0].centerline)
    assert np.all(np.abs(np.diff(cl, axis=0)).max(axis=1) == 1)
    idx = channel.grid.index(*cl.T)
    assert np.all(channel.labels[idx] == TissueLabel.BORDER_ZONE)


def test_no_scc_on_control():
    twin = generate_phantom(PhantomSpec("SLAB", (40, 30, 3)))
    assert extract_sccs(twin) == []


def test_no_scc_for_open_bz_rim():
    # a BZ rim around a solid CZ block has no corridor with two healthy mouths
    spec = PhantomSpec("SLAB", (40, 30, 3), scar=ScarSpec(cz_extent_mm=(12, 10, 3), channel_width_mm=1,
                                                         bz_rim_mm=2))
    twin = generate_phantom(spec)
    lab = twin.grid.volume(twin.labels).copy()
    (i0, i1), (j0, j1), (k0, k1) = twin.geometry["scar_box_voxels"]
    lab[i0:i1, j0:j1, k0:k1] = TissueLabel.CORE_ZONE
    solid = twin.replace(grid=VoxelGrid(twin.grid.dims, twin.grid.spacing_mm, twin.grid.origin_mm,
                                        twin.grid.flatten(lab)))
    assert extract_sccs(solid) == []


@pytest.mark.parametrize("length", [10, 16, 24])
def test_scc_length_tracks_channel(length):
    spec = PhantomSpec("SLAB", (44, 30, 3), scar=ScarSpec(cz_extent_mm=(length, 14, 3), channel_width_mm=3))
    twin = generate_phantom(spec)
    sccs = extract_sccs(twin)
    assert len(sccs) == 1
    assert abs(len(sccs[0].centerline) - bfs_channel_voxels(twin)) <= 2


def test_preprocess_idempotent(channel):
    assert preprocess(channel) == channel
