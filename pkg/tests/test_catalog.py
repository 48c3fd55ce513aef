import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skyclust.catalog import (Catalog, CatalogFormatError, Circle, MaskSet, Rect, SelectionFunction,
                              StripeLayout, SubsampleSpec, angular_separation, apply_masks,
                              apply_subsample, catalog_to_text, cone_count, load_catalog, load_masks,
                              load_selection, write_catalog, write_masks, write_selection)
from skyclust.mocks import random_catalog

HEADER = "ra,dec,redshift,mag,stripe,camcol,field,weight\n"


def _mock(n, seed=0, with_z=True):
    rng = np.random.default_rng(seed)
    lay = StripeLayout(n_stripes=4, length=6.0)
    cat = random_catalog(lay, n, seed, thin=False)
    z = rng.uniform(0.0, 0.2, n)
    if with_z:
        z = np.ma.array(z, mask=rng.random(n) < 0.2)
    mag = rng.uniform(15.0, 21.0, n)
    w = rng.random(n)
    return Catalog(cat.ra, cat.dec, z if with_z else None, mag, cat.stripe, cat.camcol,
                   cat.field, w)


def test_load_three_rows(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "150.0,0.1,0.05,17.5,10,1,3,1.0\n"
                 "150.5,0.2,,18.0,10,2,4,0.5\n"
                 "151.0,-0.3,0.1,19.0,11,12,0,0.9\n")
    cat = load_catalog(p)
    assert len(cat) == 3
    assert cat.n_rejected == 0
    np.testing.assert_array_equal(cat.has_redshift, [True, False, True])
    np.testing.assert_array_equal(cat.camcol, [1, 2, 12])


def test_load_rejects_bad_dec(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "150.0,95.0,0.05,17.5,10,1,3,1.0\n"
                 "150.0,5.0,0.05,17.5,10,1,3,1.0\n")
    cat = load_catalog(p)
    assert len(cat) == 1
    assert cat.n_rejected == 1


def test_load_rejects_malformed(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "150.0,1.0,nan,17.5,10,1,3,1.0\n"   # present but not a number
                 "abc,1.0,0.1,17.5,10,1,3,1.0\n"
                 "150.0,1.0,0.1,17.5,10,13,3,1.0\n"           # camcol out of range
                 "150.0,1.0,0.1,17.5,10,1,3,1.5\n"            # weight out of range
                 "150.0,1.0,0.1,17.5,10,1\n"                  # short row
                 "150.0,1.0,0.1,17.5,10,1,3,0.5\n")
    cat = load_catalog(p)
    assert len(cat) == 1
    assert cat.n_rejected == 5


def test_missing_column_is_fatal(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("ra,dec,mag\n1,2,3\n")
    with pytest.raises(CatalogFormatError, match="redshift"):
        load_catalog(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_catalog(tmp_path / "nope.csv")


def test_roundtrip_bit_identical(tmp_path):
    cat = _mock(10_000, seed=3)
    p = tmp_path / "m.csv"
    write_catalog(cat, p)
    back = load_catalog(p)
    assert back.n_rejected == 0
    assert len(back) == 10_000
    assert back.equals(cat)
    assert catalog_to_text(back) == catalog_to_text(cat)


def test_catalog_immutable():
    cat = _mock(10)
    with pytest.raises(AttributeError):
        cat.ra = np.zeros(10)
    with pytest.raises(ValueError):
        cat.ra[0] = 1.0


def test_subsample_identity():
    cat = _mock(200)
    assert apply_subsample(cat, SubsampleSpec()).equals(cat)


def test_subsample_mag_cut():
    cat = Catalog([10.0, 11.0], [0.0, 0.0], mag=[17.0, 19.0])
    out = apply_subsample(cat, SubsampleSpec(mag_max=18.0))
    assert len(out) == 1
    assert out.mag[0] == 17.0


def test_subsample_contradictory_is_empty():
    cat = _mock(100)
    assert len(apply_subsample(cat, SubsampleSpec(mag_min=20.0, mag_max=16.0))) == 0


def _scan_subsample(cat, spec):
    rows = []
    for i in range(len(cat)):
        ok = True
        if spec.mag_min is not None:
            ok &= cat.mag[i] >= spec.mag_min
        if spec.mag_max is not None:
            ok &= cat.mag[i] < spec.mag_max
        if spec.z_min is not None or spec.z_max is not None:
            if not cat.has_redshift[i]:
                ok = False
            else:
                z = float(cat.redshift[i])
                if spec.z_min is not None:
                    ok &= z >= spec.z_min
                if spec.z_max is not None:
                    ok &= z < spec.z_max
        if spec.stripes is not None:
            ok &= int(cat.stripe[i]) in spec.stripes
        if spec.min_weight is not None:
            ok &= cat.weight[i] >= spec.min_weight
        if ok:
            rows.append(i)
    return np.array(rows, dtype=int)


def test_subsample_matches_scan():
    cat = _mock(1000, seed=5)
    rng = np.random.default_rng(11)
    for _ in range(30):
        m = np.sort(rng.uniform(15, 21, 2))
        z = np.sort(rng.uniform(0, 0.2, 2))
        spec = SubsampleSpec(mag_min=m[0] if rng.random() < 0.7 else None,
                             mag_max=m[1] if rng.random() < 0.7 else None,
                             z_min=z[0] if rng.random() < 0.5 else None,
                             z_max=z[1] if rng.random() < 0.5 else None,
                             stripes=tuple(rng.choice([10, 11, 12, 13], 2).tolist()) if rng.random() < 0.5 else None,
                             min_weight=rng.random() if rng.random() < 0.5 else None)
        got = apply_subsample(cat, spec)
        want = cat.take(_scan_subsample(cat, spec))
        assert got.equals(want)


def test_masks_empty_and_full():
    cat = _mock(300)
    assert apply_masks(cat, MaskSet()).equals(cat)
    lay = StripeLayout(n_stripes=4, length=6.0)
    lo, hi = lay.dec_bounds(lay.stripe_ids)
    ra_lo, ra_hi = lay.ra_bounds(lay.stripe_ids)
    full = MaskSet((Rect(ra_lo - 1, float(np.max(ra_hi)) + 1, float(lo[0]) - 1, float(hi[-1]) + 1),))
    assert len(apply_masks(cat, full)) == 0


def _random_rects(rng, n):
    out = []
    for _ in range(n):
        ra = np.sort(rng.uniform(150, 157, 2))
        dec = np.sort(rng.uniform(-5, 5, 2))
        out.append(Rect(ra[0], ra[1] + 1e-3, dec[0], dec[1] + 1e-3, "star"))
    return out


def test_masks_match_containment_scan():
    rng = np.random.default_rng(2)
    cat = _mock(500, seed=8)
    masks = MaskSet(tuple(_random_rects(rng, 10)))
    got = apply_masks(cat, masks)
    keep = []
    for i in range(len(cat)):
        inside = any(r.ra_min <= cat.ra[i] <= r.ra_max and r.dec_min <= cat.dec[i] <= r.dec_max
                     for r in masks)
        if not inside:
            keep.append(i)
    assert got.equals(cat.take(np.array(keep, dtype=int)))


def test_mask_union_idempotent():
    rng = np.random.default_rng(4)
    a = MaskSet(tuple(_random_rects(rng, 3)) + (Circle(152.0, 0.0, 30.0, "ghost"),))
    assert a.union(a) == a
    cat = _mock(400, seed=1)
    once = apply_masks(cat, a)
    assert apply_masks(once, a).equals(once)
    assert apply_masks(cat, a.union(a)).equals(once)


def test_mask_zero_area_rejected():
    with pytest.raises(ValueError):
        Rect(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Circle(1.0, 1.0, 0.0)


def test_mask_file_roundtrip(tmp_path):
    m = MaskSet((Rect(150.0, 151.25, -1.0, 0.5, "bright star"), Circle(153.0, 1.0, 12.5, "ghost")))
    p = tmp_path / "m.txt"
    write_masks(m, p)
    assert load_masks(p) == m
    p.write_text("hexagon 1 2 3\n")
    with pytest.raises(CatalogFormatError):
        load_masks(p)


def test_masks_and_subsample_commute():
    rng = np.random.default_rng(9)
    cat = _mock(600, seed=12)
    masks = MaskSet(tuple(_random_rects(rng, 4)))
    spec = SubsampleSpec(mag_min=16.0, mag_max=20.0, min_weight=0.2)
    a = apply_masks(apply_subsample(cat, spec), masks)
    b = apply_subsample(apply_masks(cat, masks), spec)
    assert a.equals(b)


def test_haversine_small_angles():
    # 1 milliarcsecond separation along the equator
    d = angular_separation(10.0, 0.0, 10.0 + 1e-3 / 3600, 0.0)
    np.testing.assert_allclose(d, math.radians(1e-3 / 3600), rtol=1e-9)
    np.testing.assert_allclose(angular_separation(0.0, 90.0, 123.0, 90.0), 0.0, atol=1e-12)
    np.testing.assert_allclose(angular_separation(0.0, 0.0, 180.0, 0.0), math.pi, atol=1e-12)


def test_cone_count_trivial():
    cat = _mock(500)
    assert cone_count(cat, (153.0, 0.0), 60.0 * 40) == len(cat)
    assert cone_count(cat, (10.0, 60.0), 0.001) == 0
    with pytest.raises(ValueError):
        cone_count(cat, (10.0, 0.0), 0.0)


def test_cone_count_matches_scan():
    lay = StripeLayout(n_stripes=4, length=6.0)
    cat = random_catalog(lay, 10_000, 21, thin=False)
    rng = np.random.default_rng(5)
    for _ in range(200):
        c = (rng.uniform(149, 158), rng.uniform(-6, 6))
        r = rng.uniform(0.5, 200.0)
        assert cone_count(cat, c, r) == cone_count(cat, c, r, use_index=False)


def test_cone_index_near_pole_and_wrap():
    rng = np.random.default_rng(1)
    ra = rng.uniform(0, 360, 3000)
    dec = np.degrees(np.arcsin(rng.uniform(0.95, 1.0, 3000)))
    cat = Catalog(ra, dec)
    for c, r in [((0.2, 89.5), 90.0), ((359.9, 75.0), 300.0), ((180.0, 88.0), 200.0)]:
        assert cone_count(cat, c, r) == cone_count(cat, c, r, use_index=False)


@settings(max_examples=40, deadline=None)
@given(st.floats(149.0, 158.0), st.floats(-6.0, 6.0), st.floats(0.1, 100.0), st.floats(1.0, 3.0))
def test_cone_count_monotone(ra, dec, r, f):
    cat = _mock(2000, seed=2)
    assert cone_count(cat, (ra, dec), r) <= cone_count(cat, (ra, dec), r * f)


def test_layout_units_and_assign():
    lay = StripeLayout()
    assert len(lay.units()) == 120
    ra, dec = lay.from_stripe(np.array([0.1, 5.1]), np.array([0.01, 2.49]), np.array([10, 19]))
    st_, cc, fd = lay.assign(ra, dec)
    np.testing.assert_array_equal(st_, [10, 19])
    np.testing.assert_array_equal(cc, [1, 12])
    np.testing.assert_array_equal(fd, [0, 20])
    with pytest.raises(ValueError):
        lay.assign([150.0], [80.0])


def test_selection_invariants():
    sel = SelectionFunction.flux_limited()
    d = np.linspace(90, 460, 500)
    assert np.all(sel.phi(d) >= 0)
    assert np.all(np.diff(sel.phi_cum(d)) >= 0)
    # knots are reproduced to rounding
    np.testing.assert_allclose(sel.phi(sel.dist), sel.phi_table, rtol=1e-14, atol=0)
    np.testing.assert_allclose(sel.phi_cum(sel.dist), sel.phi_cum_table, rtol=1e-14, atol=1e-300)
    assert sel.phi(50.0) == 0.0


def test_selection_log_derivative_matches_finite_difference():
    sel = SelectionFunction.flux_limited()
    p = sel.params
    from skyclust.catalog import _flux_limited_phi

    def lnphi(d, dm):
        return np.log(_flux_limited_phi(d * 10 ** (-dm / 5), p["d_star"], p["slope"],
                                        p["d_bright"], p["bright_slope"]))

    h = 1e-4
    fd = (lnphi(sel.dist, h) - lnphi(sel.dist, -h)) / (2 * h)
    np.testing.assert_allclose(sel.dlnphi_dm_table, fd, rtol=1e-6)


def test_selection_file_roundtrip(tmp_path):
    sel = SelectionFunction.flux_limited(n=201)
    p = tmp_path / "s.csv"
    write_selection(sel, p)
    back = load_selection(p)
    np.testing.assert_array_equal(back.dist, sel.dist)
    np.testing.assert_array_equal(back.dlnphi_dm_table, sel.dlnphi_dm_table)
    with pytest.raises(FileNotFoundError):
        load_selection(tmp_path / "missing.csv")


def test_selection_sampling_follows_phi():
    sel = SelectionFunction.flux_limited()
    d = sel.sample_distances(200_000, np.random.default_rng(0))
    counts, edges = np.histogram(d, bins=17, range=(sel.d_min, sel.d_max))
    cum = sel.phi_cum(edges)
    want = np.diff(cum) * d.size
    np.testing.assert_array_less(np.abs(counts - want), 5 * np.sqrt(want) + 5)
