import numpy as np
import pytest

from ggpfn import model as M
from ggpfn.config import GgpfnConfig
from ggpfn.errors import ShapeError
from ggpfn.inference import (dsc, evaluate, f_score, fuse_p3d, pr_curve, segment_p3d, segment_slice,
                             segment_volume_view, threshold_mask, write_pr_table)
from ggpfn.patches import neighbour_stack
from ggpfn.volume_io import VolumeGrid, make_phantom

from oracles import pr_counts

CFG = GgpfnConfig.tiny()


def stub(bias=0.0):
    """Every weight zero, so the output is sigmoid(bias) everywhere."""
    p = M.build_model(CFG)
    for k in p.names():
        p[k].data[...] = 0
    p["dec.out.b"].data[...] = bias
    return p


@pytest.fixture(scope="module")
def small_volume():
    rng = np.random.default_rng(0)
    return VolumeGrid(rng.random((8, 40, 36)).astype(np.float32))


# ---------------------------------------------------------------- segmentation

def test_zero_stub_gives_one_half(small_volume):
    out = segment_volume_view(small_volume, "axial", stub(), CFG)
    assert out.shape == small_volume.extents
    np.testing.assert_array_equal(out, 0.5)


def test_negative_bias_gives_near_zero(small_volume):
    out = segment_volume_view(small_volume, "coronal", stub(-20.0), CFG)
    assert out.max() < 1e-6


@pytest.mark.parametrize("plane", ["axial", "sagittal", "coronal"])
def test_view_volumes_keep_extents(small_volume, plane):
    p = M.build_model(CFG, 1)
    out = segment_volume_view(small_volume, plane, p, CFG)
    assert out.shape == small_volume.extents and out.dtype == np.float32
    assert np.all((out >= 0) & (out <= 1))


def test_single_window_equals_whole_slice():
    vg = make_phantom(2, extents=(16, 32, 32))
    p = M.build_model(CFG, 2)
    stack = vg.intensities
    nb = neighbour_stack(stack, 4, CFG.T)
    a = segment_slice(stack[4], nb, p, CFG, patch=32, overlap=0)
    b = segment_slice(stack[4], nb, p, CFG, whole_slice=True)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeError):
        segment_slice(stack[4], nb[:3], p, CFG)


def test_segmentation_is_deterministic(small_volume):
    p = M.build_model(CFG, 3)
    a = segment_volume_view(small_volume, "sagittal", p, CFG)
    b = segment_volume_view(small_volume, "sagittal", p, CFG)
    assert a.tobytes() == b.tobytes()


def test_segment_p3d_views(small_volume):
    models = {v: (M.build_model(CFG, i), CFG) for i, v in enumerate(("axial", "sagittal", "coronal"))}
    fused, per_view = segment_p3d(small_volume, models, weights=(0.5, 0.25, 0.25))
    np.testing.assert_allclose(
        fused, 0.5 * per_view["axial"] + 0.25 * per_view["sagittal"] + 0.25 * per_view["coronal"], rtol=1e-6)
    single, pv = segment_p3d(small_volume, models, views=("coronal",))
    assert list(pv) == ["coronal"] and single is pv["coronal"]
    with pytest.raises(KeyError):
        segment_p3d(small_volume, {"axial": models["axial"]})
    with pytest.raises(ValueError):
        segment_p3d(small_volume, models, views=("axial", "coronal"))


# ---------------------------------------------------------------- fusion

def test_fuse_examples():
    ones, zeros = np.ones((2, 3, 4)), np.zeros((2, 3, 4))
    np.testing.assert_allclose(fuse_p3d(ones, zeros, zeros, (0.8, 0.1, 0.1)), 0.8)
    third = fuse_p3d(ones, zeros, zeros, (1 / 3, 1 / 3, 1 / 3))
    np.testing.assert_allclose(third, 1 / 3)
    r = np.random.default_rng(1).random((2, 3, 4))
    np.testing.assert_allclose(fuse_p3d(r, r, r, (0.2, 0.3, 0.5)), r, rtol=1e-12)


def test_fuse_stays_in_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = rng.dirichlet(np.ones(3))
        out = fuse_p3d(rng.random((3, 3, 3)), rng.random((3, 3, 3)), rng.random((3, 3, 3)), w)
        assert out.min() >= 0 and out.max() <= 1


def test_fuse_errors():
    a = np.zeros((2, 2, 2))
    with pytest.raises(ShapeError):
        fuse_p3d(a, a, np.zeros((2, 2, 3)), (0.4, 0.3, 0.3))
    with pytest.raises(ValueError):
        fuse_p3d(a, a, a, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        fuse_p3d(a, a, a, (0.5, 0.5))


# ---------------------------------------------------------------- metrics

def test_dsc_canonical():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = a.copy()
    a[:2] = 1
    b[1:3] = 1
    assert dsc(a, a) == 1.0
    assert dsc(a, 1 - a) == 0.0
    assert dsc(a, b) == 0.5
    assert dsc(np.zeros(5), np.zeros(5)) == 1.0
    assert dsc(np.zeros(5), np.ones(5)) == 0.0
    with pytest.raises(ShapeError):
        dsc(a, np.zeros((4, 5)))


def test_dsc_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.7
        assert dsc(x, y) == dsc(y, x) and 0 <= dsc(x, y) <= 1


def test_threshold_convention_and_monotone():
    V = np.array([0.2, 0.5, 0.7])
    assert threshold_mask(V).tolist() == [0, 1, 1]
    rng = np.random.default_rng(4)
    V = rng.random(1000)
    sizes = [threshold_mask(V, t).sum() for t in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    res = evaluate(V, V >= 0.5)
    assert res.dsc == 1.0 and res.mask.dtype == np.uint8
    assert evaluate(V, None).dsc is None


def test_pr_curve_matches_counting():
    rng = np.random.default_rng(5)
    V = np.round(rng.random((4, 5, 6)), 2)  # ties at grid thresholds exercise the >= convention
    gt = rng.random((4, 5, 6)) > 0.6
    rows = pr_curve(V, gt, 21)
    ref = pr_counts(V, gt, np.linspace(0, 1, 21))
    assert len(rows) == 21
    for got, want in zip(rows, ref):
        np.testing.assert_allclose(got, want, atol=1e-12)
    recalls = [r for _, _, r in rows]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_pr_curve_special_cases():
    gt = np.zeros((3, 3), dtype=bool)
    gt[1, 1] = True
    rows = pr_curve(gt.astype(float), gt, 11)
    assert rows[0][1] == 1 / 9  # at t = 0 every voxel is predicted
    assert all(p == 1.0 for _, p, _ in rows[1:])
    assert rows[0][2] == 1.0 and rows[-1][2] == 1.0
    half = pr_curve(np.full((3, 3), 0.5), gt, 11)
    assert [r for _, _, r in half] == [1.0] * 6 + [0.0] * 5
    with pytest.raises(ValueError):
        pr_curve(np.ones((3, 3)), np.zeros((3, 3)))


def test_write_pr_table(tmp_path):
    rows = pr_curve(np.random.default_rng(6).random(50), np.arange(50) % 3 == 0, 17)
    write_pr_table(rows, tmp_path / "pr.tsv")
    lines = (tmp_path / "pr.tsv").read_text().splitlines()
    assert len(lines) == 17
    t, p, r, f = map(float, lines[5].split("\t"))
    assert f == pytest.approx(f_score(p, r), abs=1e-6)
    assert f_score(0.0, 0.0) == 0.0
