import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heliotower import (
    CavityReceiver,
    CylindricalReceiver,
    DesignVector,
    FieldCapacityError,
    LayoutConfig,
    azimuthal_shift,
    generate_field,
    group_start_spacing,
    place_line,
    radial_distances,
    select_top,
    transition_gap,
)
from heliotower.layout import TWO_PI, Heliostat

TWO_PI_ = 2.0 * math.pi


class FlatGround:
    m_n = 0.0
    m_w = 0.0


def small_field(design, n_hel=120, d_min=10.0, **kwargs):
    cfg = LayoutConfig(r_base=75.0, r_min=8.0, d_min=d_min, n_hel=n_hel, **kwargs)
    return generate_field(design, FlatGround(), cfg), cfg


def cavity(h_t=120.0, r=10.0, e_l=0.5):
    return CavityReceiver(h_t=h_t, r=r, e_l=e_l)


# ---------------------------------------------------------------------------
# recursion primitives
# ---------------------------------------------------------------------------


def test_radial_distances_direct_substitution():
    np.testing.assert_allclose(radial_distances(5, 0.03, 100, 1, 2), [100.0, 108.0])


def test_radial_distances_constant_spacing_is_arithmetic():
    np.testing.assert_allclose(radial_distances(5, 0.0, 100, 1, 3), [100.0, 105.0, 110.0])


def test_radial_distances_r_min_clamp():
    np.testing.assert_allclose(radial_distances(0, 0, 100, 8, 2), [100.0, 108.0])


def test_radial_distances_strictly_increasing_even_for_shrinking_recursion():
    radii = radial_distances(0.0, -0.5, 100.0, 2.0, 8)
    assert np.all(np.diff(radii) >= 2.0 - 1e-12)


def test_radial_distances_rejects_non_finite():
    with pytest.raises(ValueError):
        radial_distances(math.nan, 0.0, 100.0, 1.0, 3)
    with pytest.raises(ValueError):
        radial_distances(0.0, math.inf, 100.0, 1.0, 3)


def test_azimuthal_shift_boundaries():
    assert azimuthal_shift(2.0, 0.0) == 0.0
    assert azimuthal_shift(2.0, math.pi) == pytest.approx(2.0 * math.pi, abs=1e-15)
    assert azimuthal_shift(2.0, 3 * math.pi / 2) == pytest.approx(math.pi, abs=1e-15)


def test_azimuthal_shift_continuous_at_pi_and_symmetric():
    eps = 1e-9
    left = azimuthal_shift(1.7, math.pi - eps)
    right = azimuthal_shift(1.7, math.pi + eps)
    assert left == pytest.approx(right, abs=1e-8)
    assert azimuthal_shift(1.7, 0.3) == pytest.approx(azimuthal_shift(1.7, TWO_PI_ - 0.3))


def test_azimuthal_shift_domain():
    with pytest.raises(ValueError):
        azimuthal_shift(1.0, -0.1)
    with pytest.raises(ValueError):
        azimuthal_shift(1.0, TWO_PI_)


def test_transition_gap_values():
    assert transition_gap(5, 0.03, 10, 0.5, 1) == pytest.approx(4.15)
    assert transition_gap(5, 0.03, 10, 0.0, 0.0) == 0.0
    assert transition_gap(0, 0, 0, 1.0, 0.0) == 1.0


def test_group_start_spacing_values():
    assert group_start_spacing(0.0, 16.8) == 16.8
    assert group_start_spacing(0.0542, 16.8) == pytest.approx(17.71056)
    assert group_start_spacing(-0.5, 10.0) == pytest.approx(5.0)


def test_group_start_spacing_rejects_collapse():
    with pytest.raises(ValueError):
        group_start_spacing(-1.0, 10.0)
    with pytest.raises(ValueError):
        group_start_spacing(0.1, 0.0)


# ---------------------------------------------------------------------------
# line placement
# ---------------------------------------------------------------------------


def test_place_line_uniform_circle_count():
    # arc-length fill oracle: floor(2*pi*100 / 10) heliostats
    line = place_line("group_first", 10.0, 0.0, lambda th: 100.0, None, d_min=10.0)
    assert len(line) == 62
    thetas = np.sort([h.theta for h in line])
    gaps = np.diff(thetas) * 100.0
    assert np.all(gaps >= 10.0 - 1e-9)
    # uniform except the south seam
    interior = np.sort(gaps)[:-1]
    np.testing.assert_allclose(interior, 10.0, rtol=1e-12)


def test_place_line_staggered_midpoint():
    prev = [
        Heliostat(id=0, theta=0.0, radius=100.0, x=0, y=100, z=0, group=0, line=0),
        Heliostat(id=1, theta=0.1, radius=100.0, x=0, y=0, z=0, group=0, line=0),
    ]
    line = place_line("staggered", None, 0.0, lambda th: 108.0, prev, d_min=1.0)
    assert len(line) == 1
    assert line[0].theta == pytest.approx(0.05, abs=1e-15)


def test_place_line_growing_spacing_matches_unrolled_recursion():
    r_line = 100.0
    d0, e_theta, d_min = 10.0, 0.5, 1.0
    line = place_line("group_first", d0, e_theta, lambda th: r_line, None, d_min)
    east = np.sort([h.theta for h in line if 0.0 <= h.theta <= math.pi])
    # direct unrolling of the spacing recursion on the east half
    psi, spacing, expect = 0.0, d0, [0.0]
    while True:
        spacing = max(spacing + e_theta * psi, d_min)
        nxt = psi + spacing / r_line
        if nxt > math.pi:
            break
        expect.append(nxt)
        psi = nxt
    np.testing.assert_allclose(east, expect, atol=1e-12)
    gaps = np.diff(east)
    assert np.all(np.diff(gaps) > 0.0)  # spacings strictly increasing with theta


def test_place_line_effective_radius_from_radius_fn():
    line = place_line("group_first", 20.0, 0.0, lambda th: 100.0 - 3.0 * min(th, TWO_PI_ - th), None, 5.0)
    by_theta = {round(h.theta, 12): h.radius for h in line}
    assert by_theta[0.0] == pytest.approx(100.0)
    south = min(line, key=lambda h: abs(h.theta - math.pi))
    assert south.radius < 100.0


def test_place_line_requires_prev_line():
    with pytest.raises(ValueError):
        place_line("staggered", None, 0.0, lambda th: 100.0, None, 1.0)
    with pytest.raises(ValueError):
        place_line("staggered", None, 0.0, lambda th: 100.0, [], 1.0)


def test_place_line_rejects_unknown_kind():
    with pytest.raises(ValueError):
        place_line("spiral", 10.0, 0.0, lambda th: 100.0, None, 1.0)


# ---------------------------------------------------------------------------
# field generation
# ---------------------------------------------------------------------------


def test_generate_field_group_line_pattern(cavity_design):
    layout, _ = small_field(cavity_design, n_hel=260, group_lines=(2, 3, 3, 4), n_overgen=1.0)
    per_group = {}
    for g, j in zip(layout.group, layout.line):
        per_group.setdefault(int(g), set()).add(int(j))
    counts = [len(per_group[g]) for g in sorted(per_group)]
    expected = [2, 3, 3, 4][: len(counts)]
    assert counts[:-1] == expected[: len(counts) - 1]
    assert counts[-1] <= expected[len(counts) - 1]


def test_generate_field_degenerates_to_concentric_grid():
    design = DesignVector(a0=9.0, a1=0.0, d_theta=0.0, e_theta=0.0, epsilon=0.0,
                          delta=0.0, b=0.0, d0_1=12.0, receiver=cavity())
    layout, cfg = small_field(design, n_hel=200, n_overgen=1.0)
    # circular lines: radius constant per line
    for g in np.unique(layout.group):
        for j in np.unique(layout.line[layout.group == g]):
            radii = layout.radius[(layout.group == g) & (layout.line == j)]
            assert np.ptp(radii) == 0.0
    # constant separation between lines = a0 (a0 > r_min)
    ring_radii = np.unique(layout.radius)
    np.testing.assert_allclose(np.diff(ring_radii), 9.0, atol=1e-12)
    # constant azimuthal spacing in every group-first line (b = e_theta = 0);
    # the one south-seam gap may be wider
    first = (layout.line == 0) & (layout.group == 0)
    thetas = np.sort(layout.theta[first])
    gaps = np.sort(np.diff(thetas))
    np.testing.assert_allclose(gaps[:-1], gaps[0], atol=1e-12)


def test_generate_field_is_deterministic(cavity_design):
    a, _ = small_field(cavity_design)
    b, _ = small_field(cavity_design)
    for name in ("theta", "radius", "x", "y", "z", "group", "line"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_generate_field_capacity_error(cavity_design):
    with pytest.raises(FieldCapacityError):
        small_field(cavity_design, n_hel=5000, group_lines=(2, 3))


def test_generate_field_terrain_slopes(cavity_design):
    class Sloped:
        m_n = 0.02
        m_w = -0.01

    cfg = LayoutConfig(r_base=75.0, r_min=8.0, d_min=10.0, n_hel=80)
    layout = generate_field(cavity_design, Sloped(), cfg)
    np.testing.assert_allclose(layout.z, 0.02 * layout.y - 0.01 * layout.x, atol=1e-12)


def test_generate_field_overgenerates(cavity_design):
    layout, cfg = small_field(cavity_design, n_hel=120, n_overgen=1.5)
    assert len(layout) >= 180


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def test_select_top_picks_highest_energy(cavity_design, small_config):
    layout = generate_field(cavity_design, FlatGround(), small_config)
    energy = np.zeros(len(layout))
    energy[:4] = [5.0, 3.0, 9.0, 1.0]
    picked = select_top(layout, energy, 2)
    assert set(np.nonzero(picked.selected)[0]) == {0, 2}
    assert picked.annual_kwh[2] == 9.0


def test_select_top_tie_break_prefers_small_radius(cavity_design, small_config):
    layout = generate_field(cavity_design, FlatGround(), small_config)
    n = len(layout)
    k = 10
    picked = select_top(layout, np.ones(n), k)
    chosen = np.sort(layout.radius[picked.selected])
    rejected = np.sort(layout.radius[~picked.selected])
    assert chosen[-1] <= rejected[0] + 1e-12


def test_select_top_boundary_and_errors(cavity_design, small_config):
    layout = generate_field(cavity_design, FlatGround(), small_config)
    n = len(layout)
    all_selected = select_top(layout, np.arange(n, dtype=float), n)
    assert all_selected.selected.all()
    with pytest.raises(ValueError):
        select_top(layout, np.arange(n, dtype=float), n + 1)
    with pytest.raises(ValueError):
        select_top(layout, np.full(n, math.inf), 1)


def test_select_top_min_selected_at_least_max_rejected(cavity_design, small_config, rng):
    layout = generate_field(cavity_design, FlatGround(), small_config)
    energy = rng.random(len(layout))
    picked = select_top(layout, energy, small_config.n_hel)
    assert energy[picked.selected].min() >= energy[~picked.selected].max()


# ---------------------------------------------------------------------------
# layout invariants over random designs
# ---------------------------------------------------------------------------

design_strategy = st.builds(
    DesignVector,
    a0=st.floats(0.0, 12.0),
    a1=st.floats(0.0, 0.1),
    d_theta=st.floats(-12.0, 12.0),
    e_theta=st.floats(-1.5, 1.5),
    epsilon=st.floats(0.0, 6.0),
    delta=st.floats(0.0, 0.6),
    b=st.floats(0.0, 0.2),
    d0_1=st.floats(10.0, 30.0),
    receiver=st.just(cavity()),
)


def check_field_invariants(layout, cfg):
    key = layout.group * 10000 + layout.line
    base_by_line = {}
    for k in np.unique(key):
        sel = key == k
        thetas = np.sort(layout.theta[sel])
        assert thetas[0] >= 0.0 and thetas[-1] < TWO_PI
        # strictly ordered, arc spacing >= d_min on the base circle
        shift = azimuthal_shift(layout.design.d_theta, thetas)
        base = layout.radius[sel][np.argsort(layout.theta[sel])] - shift
        base = np.where(layout.radius[sel][np.argsort(layout.theta[sel])] <= 1.0, base, base)
        r_line = base[0]  # theta=0 heliostat has zero shift
        assert np.all(np.diff(thetas) * r_line >= cfg.d_min - 1e-6)
        base_by_line[k] = r_line
    # base radii strictly increase by at least r_min in generation order
    ordered = [base_by_line[k] for k in sorted(base_by_line)]
    assert np.all(np.diff(ordered) >= cfg.r_min - 1e-9)


@settings(max_examples=25, deadline=None)
@given(design=design_strategy)
def test_field_invariants_random_designs(design):
    cfg = LayoutConfig(r_base=75.0, r_min=8.0, d_min=10.0, n_hel=60, n_overgen=1.2)
    layout = generate_field(design, FlatGround(), cfg)
    check_field_invariants(layout, cfg)


@settings(max_examples=25, deadline=None)
@given(design=design_strategy)
def test_stagger_midpoint_property(design):
    cfg = LayoutConfig(r_base=75.0, r_min=8.0, d_min=10.0, n_hel=60, n_overgen=1.2)
    layout = generate_field(design, FlatGround(), cfg)
    for g in np.unique(layout.group):
        lines = np.unique(layout.line[layout.group == g])
        for j in lines:
            if j == 0:
                continue
            cur = np.sort(layout.theta[(layout.group == g) & (layout.line == j)])
            prev = np.sort(layout.theta[(layout.group == g) & (layout.line == j - 1)])
            mids = 0.5 * (prev[:-1] + prev[1:])
            # every staggered heliostat sits on a front-pair midpoint
            pos = np.searchsorted(mids, cur)
            pos = np.clip(pos, 0, mids.size - 1)
            nearest = np.minimum(
                np.abs(mids[pos] - cur),
                np.abs(mids[np.maximum(pos - 1, 0)] - cur),
            )
            assert np.all(nearest <= 1e-12)


def test_south_compactness_for_negative_d_theta():
    design = DesignVector(a0=6.0, a1=0.02, d_theta=-8.0, e_theta=0.1, epsilon=1.0,
                          delta=0.1, b=0.05, d0_1=14.0, receiver=cavity())
    layout, _ = small_field(design, n_hel=150)
    key = layout.group * 10000 + layout.line
    for k in np.unique(key):
        sel = key == k
        thetas = layout.theta[sel]
        radii = layout.radius[sel]
        north = radii[np.argmin(np.minimum(thetas, TWO_PI - thetas))]
        south_idx = np.argmax(np.minimum(thetas, TWO_PI - thetas))
        assert radii[south_idx] < north
