import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddtseg.dataio import synth_touching_pair
from ddtseg.errors import InvalidArgument, NoMarkersWarning
from ddtseg.imgcore import Cls, connected_components, n_instances
from ddtseg.metrics import instance_match
from ddtseg.morphology import (btgt, class_relief, dtgt, edt, edt_squared, extract_markers,
                               inverse_normalize, outline, segment_instances, watershed)

from gen import random_instance_map
from oracles import btgt_bruteforce, dtgt_bruteforce, edt_squared_bruteforce, outline_bruteforce, same_partition

# -- EDT ------------------------------------------------------------------------


def test_edt_all_background():
    assert not edt(np.zeros((4, 6), bool)).any()


def test_edt_single_pixel():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    d = edt(m)
    assert d[2, 2] == 1.0 and d.sum() == 1.0


def test_edt_block_in_5x5():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    d = edt(m)
    assert d[2, 2] == 2.0
    ring = m.copy()
    ring[2, 2] = False
    assert (d[ring] == 1.0).all()


def test_edt_all_foreground_is_capped():
    d = edt(np.ones((3, 7), bool))
    assert (d == 7.0).all()


def test_edt_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(60):
        m = rng.random((24, 24)) < rng.uniform(0.3, 0.97)
        if m.all():
            continue
        np.testing.assert_array_equal(edt_squared(m), edt_squared_bruteforce(m))


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_edt_squared_is_exact_integer(m):
    sq = edt_squared(m)
    assert sq.dtype.kind == "i"
    if (~m).any():
        np.testing.assert_array_equal(sq, edt_squared_bruteforce(m))


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_edt_transpose_invariant(m):
    np.testing.assert_array_equal(edt_squared(m).T, edt_squared(m.T))


# -- DTGT and inverse map ---------------------------------------------------------


def test_dtgt_single_instance_is_plain_edt():
    gt = np.zeros((9, 9), int)
    gt[2:7, 1:8] = 1
    np.testing.assert_array_equal(dtgt(gt), edt(gt > 0))


def test_dtgt_abutting_frontier_is_one():
    gt = np.zeros((6, 6), int)
    gt[1:5, 0:3] = 1
    gt[1:5, 3:6] = 2
    d = dtgt(gt)
    assert (d[1:5, 2] == 1.0).all() and (d[1:5, 3] == 1.0).all()
    np.testing.assert_array_equal(d, dtgt_bruteforce(gt))


def test_dtgt_empty():
    assert not dtgt(np.zeros((5, 5), int)).any()


def test_dtgt_matches_bruteforce_random():
    rng = np.random.default_rng(3)
    for _ in range(30):
        gt = random_instance_map(rng, 24)
        np.testing.assert_allclose(dtgt(gt), dtgt_bruteforce(gt), rtol=0, atol=1e-12)


def test_inverse_single_pixel():
    gt = np.zeros((3, 3), int)
    gt[1, 1] = 1
    assert inverse_normalize(dtgt(gt), gt)[1, 1] == 0.5


def test_inverse_border_vs_core():
    gt = np.zeros((7, 7), int)
    gt[1:6, 1:6] = 1  # distances 1..3
    v = inverse_normalize(dtgt(gt), gt)
    assert v[1, 1] == 0.75
    assert v[3, 3] == 0.25
    assert (v[gt == 0] == 0).all()


def test_inverse_anti_monotone_and_range():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt = random_instance_map(rng, 24)
        d = dtgt(gt)
        v = inverse_normalize(d, gt)
        assert v.min() >= 0 and v.max() <= 1
        assert (v[gt == 0] == 0).all() and (v[gt > 0] > 0).all()
        for i in np.unique(gt[gt > 0]):
            dd, vv = d[gt == i], v[gt == i]
            order = np.argsort(dd)
            # strictly larger distance gives strictly smaller value
            lt = dd[order][:, None] < dd[order][None, :]
            assert (vv[order][:, None] > vv[order][None, :])[lt].all()


# -- outline and BTGT ---------------------------------------------------------------


def test_outline_basics():
    one = np.zeros((3, 3), int)
    one[1, 1] = 1
    assert outline(one)[1, 1]
    sq = np.zeros((8, 8), int)
    sq[2:6, 2:6] = 1
    assert outline(sq).sum() == 12
    assert not outline(sq)[3:5, 3:5].any()
    assert not outline(np.zeros((4, 4), int)).any()


def test_outline_counts_image_edge_as_background():
    assert outline(np.ones((3, 3), int)).sum() == 8


def test_btgt_separated_instances_have_no_border():
    gt = np.zeros((8, 10), int)
    gt[1:7, 1:4] = 1
    gt[1:7, 6:9] = 2  # two background columns between them
    cm = btgt(gt)
    assert not (cm == Cls.BORDER).any()


def test_btgt_abutting_columns_6x6():
    gt = np.zeros((6, 6), int)
    gt[1:5, 0:3] = 1
    gt[1:5, 3:6] = 2
    cm = btgt(gt)
    expected = np.array([
        [0, 0, 2, 2, 0, 0],
        [1, 1, 2, 2, 1, 1],
        [1, 1, 2, 2, 1, 1],
        [1, 1, 2, 2, 1, 1],
        [1, 1, 2, 2, 1, 1],
        [0, 0, 2, 2, 0, 0],
    ])
    np.testing.assert_array_equal(cm, expected)
    np.testing.assert_array_equal(cm, btgt_bruteforce(gt))


def test_btgt_single_instance_has_no_border():
    gt = np.zeros((7, 7), int)
    gt[2:5, 1:6] = 1
    assert set(np.unique(btgt(gt)).tolist()) == {0, 1}


def test_btgt_matches_rule_random():
    rng = np.random.default_rng(5)
    for _ in range(40):
        gt = random_instance_map(rng, 20)
        np.testing.assert_array_equal(btgt(gt), btgt_bruteforce(gt))
        np.testing.assert_array_equal(outline(gt), outline_bruteforce(gt))


# -- markers and watershed ---------------------------------------------------------


def _two_discs(size=40, gap=True):
    yy, xx = np.mgrid[0:size, 0:size]
    gt = np.zeros((size, size), int)
    gt[(yy - 20) ** 2 + (xx - 10) ** 2 <= 49] = 1
    gt[(yy - 20) ** 2 + (xx - 30 + (0 if gap else 5)) ** 2 <= 49] = 2
    return gt


def test_two_separated_blobs_give_two_markers():
    gt = _two_discs()
    v = inverse_normalize(dtgt(gt), gt)
    assert n_instances(extract_markers(v, gt > 0, 0.1)) == 2


def test_no_foreground_no_markers():
    assert not extract_markers(np.zeros((5, 5)), np.zeros((5, 5), bool)).any()


def test_h_zero_single_minimum():
    v = np.array([[0.9, 0.8, 0.9],
                  [0.8, 0.1, 0.8],
                  [0.9, 0.8, 0.9]])
    m = extract_markers(v, np.ones((3, 3), bool), 0.0)
    assert n_instances(m) == 1 and m[1, 1] == 1 and m.sum() == 1


def test_markers_reject_bad_h():
    with pytest.raises(InvalidArgument):
        extract_markers(np.zeros((2, 2)), np.ones((2, 2), bool), 1.0)
    with pytest.raises(InvalidArgument):
        extract_markers(np.zeros((2, 2)), np.ones((2, 2), bool), -0.1)


def test_h_minima_against_brute_force():
    """Each marker is the set of pixels within h of a regional minimum that is deeper than h."""
    rng = np.random.default_rng(6)
    for _ in range(30):
        v = np.round(rng.random((9, 9)), 2)
        fg = np.ones((9, 9), bool)
        h = 0.15
        m = extract_markers(v, fg, h)
        # every marker pixel is within h of the lowest value in its marker
        for k in np.unique(m[m > 0]):
            zone = m == k
            assert v[zone].max() <= v[zone].min() + h + 1e-12
        # the global minimum always seeds a marker
        assert m.flat[np.argmin(v)] > 0


def test_watershed_single_marker_fills_blob():
    gt = np.zeros((9, 9), int)
    gt[2:7, 2:7] = 1
    markers = np.zeros_like(gt)
    markers[4, 4] = 1
    v = inverse_normalize(dtgt(gt), gt)
    np.testing.assert_array_equal(watershed(v, markers, gt > 0), gt)


def test_watershed_markers_equal_fg():
    gt = _two_discs()
    out = watershed(np.zeros(gt.shape), gt, gt > 0)
    np.testing.assert_array_equal(out, gt)


def test_watershed_without_markers_warns():
    with pytest.warns(NoMarkersWarning):
        out = watershed(np.zeros((4, 4)), np.zeros((4, 4), int), np.ones((4, 4), bool))
    assert not out.any()


def test_touching_pair_split():
    image, gt = synth_touching_pair(48, seed=3)
    assert n_instances(connected_components(gt > 0)) == 1
    v = inverse_normalize(dtgt(gt), gt)
    out = segment_instances(v, gt > 0, 0.1)
    res = instance_match(out, gt, 0.9)
    assert res.n_matched == 2


def test_watershed_partition_properties():
    rng = np.random.default_rng(7)
    for _ in range(20):
        gt = random_instance_map(rng, 24)
        fg = gt > 0
        v = inverse_normalize(dtgt(gt), gt)
        markers = extract_markers(v, fg, 0.1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoMarkersWarning)
            out = watershed(v, markers, fg)
        # labelled pixels cover the reachable foreground, nothing outside it
        assert not out[~fg].any()
        reach = connected_components(fg)
        seeded = np.unique(reach[markers > 0])
        np.testing.assert_array_equal(out > 0, np.isin(reach, seeded) & fg)
        for k in np.unique(markers[markers > 0]):
            assert (out[markers == k] == k).all()
            assert n_instances(connected_components(out == k)) == 1


def test_non_touching_recovery():
    rng = np.random.default_rng(8)
    for _ in range(10):
        gt = random_instance_map(rng, 32)
        # keep only instances that do not touch any other
        sep = np.zeros_like(gt)
        for i in np.unique(gt[gt > 0]):
            grown = np.zeros_like(gt, dtype=bool)
            ys, xs = np.nonzero(gt == i)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = np.clip(ys + dy, 0, 31), np.clip(xs + dx, 0, 31)
                    grown[yy, xx] = True
            if not ((gt > 0) & (gt != i) & grown).any():
                sep[gt == i] = i
        out = segment_instances(inverse_normalize(dtgt(sep), sep), sep > 0, 0.1)
        assert same_partition(out, sep)


def test_class_relief_from_btgt():
    gt = _two_discs(gap=False)
    cm = btgt(gt)
    v, fg = class_relief(cm)
    np.testing.assert_array_equal(fg, cm != Cls.BACKGROUND)
    assert (v[cm == Cls.BORDER] == 1.0).all()
    out = segment_instances(v, fg, 0.1)
    assert n_instances(out) == 2
