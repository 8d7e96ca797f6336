import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import heliotower.solar as solar
from heliotower import (
    CavityReceiver,
    CylindricalReceiver,
    DesignVector,
    InsolationTable,
    LayoutConfig,
    MonthInsolation,
    ObjectiveEvaluator,
    annual_energy,
    attenuation,
    clear_sky_insolation,
    cosine_efficiency,
    generate_field,
    interception,
    objective,
    receiver_cycle_efficiency,
    shadow_block_factor,
    sun_position,
    sun_vector,
)
from heliotower.solar import TimeGrid, _per_heliostat_power, declination

L_H, L_V = 9.0, 8.0


# ---------------------------------------------------------------------------
# sun geometry
# ---------------------------------------------------------------------------


def test_sun_equinox_noon_elevation():
    # day 81 zeroes the declination formula exactly
    _, el = sun_position(0.6, 81, 12.0)
    assert el == pytest.approx(math.pi / 2 - 0.6, abs=1e-12)


def test_sun_equatorial_equinox_sunrise():
    _, el = sun_position(0.0, 81, 6.0)
    assert el == pytest.approx(0.0, abs=1e-12)


def test_sun_solstice_noon_elevation():
    # independent evaluation of the declination term
    dec = math.radians(23.45) * math.sin(2 * math.pi * (284 + 172) / 365.0)
    _, el = sun_position(0.6, 172, 12.0)
    assert el == pytest.approx(math.pi / 2 - 0.6 + dec, abs=1e-12)


def test_sun_azimuth_morning_east_afternoon_west():
    az_am, _ = sun_position(0.6, 172, 9.0)
    az_pm, _ = sun_position(0.6, 172, 15.0)
    assert 0.0 < az_am < math.pi
    assert math.pi < az_pm < 2 * math.pi


def test_sun_vector_is_unit_and_matches_position():
    vec = sun_vector(0.6, 120, 10.5)
    assert np.linalg.norm(vec) == pytest.approx(1.0)
    az, el = sun_position(0.6, 120, 10.5)
    assert vec[2] == pytest.approx(math.sin(el))


# ---------------------------------------------------------------------------
# efficiency factors
# ---------------------------------------------------------------------------


def test_cosine_efficiency_collinear():
    assert cosine_efficiency([0, 0, 1], [0, 0, 0], [0, 0, 10]) == pytest.approx(1.0)


def test_cosine_efficiency_right_angle():
    c = cosine_efficiency([1, 0, 0], [0, 0, 0], [0, 0, 10.0])
    assert c == pytest.approx(math.cos(math.pi / 4), abs=1e-12)


def test_cosine_efficiency_opposed():
    assert cosine_efficiency([0, 0, -1], [0, 0, 0], [0, 0, 10.0]) == pytest.approx(0.0, abs=1e-12)


def test_attenuation_values():
    # direct evaluation of the surrogate polynomial
    assert attenuation(0.0) == pytest.approx(0.99321, abs=1e-12)
    assert attenuation(1000.0) == pytest.approx(0.99321 - 1.176e-4 * 1000 + 1.97e-8 * 1e6, abs=1e-12)
    assert attenuation(2500.0) == pytest.approx(math.exp(-1.106e-4 * 2500.0), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(s1=st.floats(0.0, 6000.0), s2=st.floats(0.0, 6000.0))
def test_attenuation_monotone(s1, s2):
    lo, hi = sorted((s1, s2))
    assert attenuation(lo) >= attenuation(hi)


def test_attenuation_rejects_negative():
    with pytest.raises(ValueError):
        attenuation(-1.0)


def test_interception_gaussian_disc_values():
    rec = CavityReceiver(h_t=100.0, r=5.0, e_l=0.0)
    beam = np.array([0.0, -1.0, 0.0])  # straight into the aperture
    sigma = math.hypot(2 * 2.9, 4.65) * 1e-3
    slant = rec.r / sigma  # makes r_proj equal to the beam width
    val = interception(2.9, 4.65, slant, rec, beam)
    assert val == pytest.approx(1.0 - math.exp(-0.5), abs=1e-12)
    # huge aperture captures everything, tiny slant means tiny beam
    big = CavityReceiver(h_t=100.0, r=5000.0, e_l=0.0)
    assert interception(2.9, 4.65, 200.0, big, beam) == pytest.approx(1.0)
    # beam from behind the aperture plane is lost entirely
    assert interception(2.9, 4.65, 200.0, rec, -beam) == pytest.approx(0.0)


def test_interception_cavity_inclination_matches_projection():
    # inclining the aperture away from a horizontal beam shrinks the disc
    beam = np.array([0.0, -1.0, 0.0])
    r1 = interception(2.9, 4.65, 300.0, CavityReceiver(100.0, 6.0, 0.0), beam)
    r2 = interception(2.9, 4.65, 300.0, CavityReceiver(100.0, 6.0, 0.6), beam)
    assert r2 < r1


def test_interception_cylindrical_monotone_in_size():
    beam = np.array([0.0, -0.8, 0.6])
    small = CylindricalReceiver(100.0, 4.0, 6.0)
    large = CylindricalReceiver(100.0, 8.0, 12.0)
    a = interception(2.9, 4.65, 500.0, small, beam)
    b = interception(2.9, 4.65, 500.0, large, beam)
    assert 0.0 < a < b <= 1.0


def test_interception_rejects_zero_slant():
    rec = CavityReceiver(h_t=100.0, r=5.0, e_l=0.0)
    with pytest.raises(ValueError):
        interception(2.9, 4.65, 0.0, rec, np.array([0.0, -1.0, 0.0]))


def test_receiver_cycle_efficiency_limits():
    assert receiver_cycle_efficiency(0.0, 100.0, 25.0, 0.4, 30.0) == 0.0
    # break-even: losses equal input
    assert receiver_cycle_efficiency(3000.0, 100.0, 25.0, 0.4, 30.0) == 0.0
    # large input approaches the cycle peak
    assert receiver_cycle_efficiency(3.0e8, 100.0, 25.0, 0.4, 30.0) == pytest.approx(0.4, rel=1e-4)
    # doubling the power halves the loss fraction
    a = receiver_cycle_efficiency(10000.0, 100.0, 25.0, 0.4, 30.0)
    b = receiver_cycle_efficiency(20000.0, 100.0, 25.0, 0.4, 30.0)
    assert (1.0 - a / 0.4) == pytest.approx(2.0 * (1.0 - b / 0.4), rel=1e-12)


# ---------------------------------------------------------------------------
# shadow / block
# ---------------------------------------------------------------------------


def test_shadow_block_isolated():
    assert shadow_block_factor([0, 0, 0], np.empty((0, 3)), [0, 0, 1], [0, 1, 0], L_H, L_V) == 1.0


def test_shadow_block_coincident_neighbor():
    assert shadow_block_factor([0, 0, 0], [[0, 0, 0]], [0, 0, 1], [0, 1, 0], L_H, L_V) == 0.0


def test_shadow_block_half_shadow_scene():
    # zenith sun, horizontal target: the neighbour offset by half a mirror
    # width shades exactly half, and sits too high to block
    sb = shadow_block_factor([0, 0, 0], [[L_H / 2, 0, 2 * L_V]], [0, 0, 1], [0, 1, 0], L_H, L_V)
    assert sb == pytest.approx(0.5, abs=1e-12)


def test_shadow_block_half_block_scene():
    # horizontal sun, zenith target: mirrored geometry blocks exactly half
    sb = shadow_block_factor([0, 0, 0], [[L_H / 2, 0, 2 * L_V]], [0, 1, 0], [0, 0, 1], L_H, L_V)
    assert sb == pytest.approx(0.5, abs=1e-12)


def _mirror_frame(n):
    u = np.array([-n[1], n[0], 0.0])
    nu = np.linalg.norm(u)
    if nu < 1e-12:
        u = np.array([1.0, 0.0, 0.0])
        nu = 1.0
    u = u / nu
    return u, np.cross(n, u)


def _oracle_shadow_block(pos_i, nbrs, sun, tgt, l_h, l_v, k=120):
    """Dense point-sampling oracle: fraction of mirror points whose sun ray
    or reflected ray hits a neighbour rectangle."""
    sun = sun / np.linalg.norm(sun)
    tgt = tgt / np.linalg.norm(tgt)
    n_hat = sun + tgt
    n_hat = n_hat / np.linalg.norm(n_hat)
    u, v = _mirror_frame(n_hat)
    a = (np.arange(k) + 0.5) / k - 0.5
    pts = pos_i + (a * l_h)[:, None, None] * u + (a * l_v)[None, :, None] * v
    pts = pts.reshape(-1, 3)
    shadow = np.zeros(len(pts), bool)
    block = np.zeros(len(pts), bool)
    for nb in np.atleast_2d(nbrs):
        for d, acc in ((sun, shadow), (tgt, block)):
            dn = d @ n_hat
            if abs(dn) < 1e-12:
                continue
            tau = ((nb - pts) @ n_hat) / dn
            q = pts + d * tau[:, None]
            rel = q - nb
            acc |= (tau >= 0) & (np.abs(rel @ u) <= l_h / 2) & (np.abs(rel @ v) <= l_v / 2)
    return float(np.clip(1.0 - shadow.mean() - block.mean(), 0.0, 1.0))


def test_shadow_block_against_point_sampling_oracle(rng):
    worst = 0.0
    for _ in range(50):
        nb = rng.uniform([-15, -15, -3], [15, 15, 3], 3)
        el = rng.uniform(0.15, 1.4)
        az = rng.uniform(0, 2 * math.pi)
        sun = np.array([math.sin(az) * math.cos(el), math.cos(az) * math.cos(el), math.sin(el)])
        tgt = np.array([rng.uniform(-0.5, 0.5), rng.uniform(0.5, 1.0), rng.uniform(0.2, 0.9)])
        tgt = tgt / np.linalg.norm(tgt)
        mine = shadow_block_factor(np.zeros(3), nb[None, :], sun, tgt, L_H, L_V)
        oracle = _oracle_shadow_block(np.zeros(3), nb[None, :], sun, tgt, L_H, L_V)
        worst = max(worst, abs(mine - oracle))
    assert worst < 0.02


def test_shadow_block_overlap_against_shapely(rng):
    # cross-check the polygon clipper against shapely on the same scenes
    shapely = pytest.importorskip("shapely")
    from shapely.geometry import Polygon, box

    from heliotower.solar import _rect_overlap_areas

    window = box(-L_H / 2, -L_V / 2, L_H / 2, L_V / 2)
    # projected mirrors are parallelograms: centre plus two edge vectors
    centers = rng.uniform(-8, 8, size=(300, 1, 2))
    e1 = rng.uniform(-6, 6, size=(300, 1, 2))
    e2 = rng.uniform(-6, 6, size=(300, 1, 2))
    signs1 = np.array([1.0, -1.0, -1.0, 1.0]).reshape(1, 4, 1)
    signs2 = np.array([1.0, 1.0, -1.0, -1.0]).reshape(1, 4, 1)
    quads = centers + signs1 * e1 + signs2 * e2
    mine = _rect_overlap_areas(quads, L_H / 2, L_V / 2)
    for q, a in zip(quads, mine):
        expect = Polygon(q).intersection(window).area
        assert a == pytest.approx(expect, abs=1e-9)


def test_numba_kernel_matches_numpy(plant_params, cavity_design, small_config, small_insolation):
    kern = solar._kernels()
    if kern is None:
        pytest.skip("numba unavailable")
    layout = generate_field(cavity_design, plant_params, small_config)
    grid = TimeGrid.build(plant_params.phi, small_insolation)
    pair_i, pair_j = solar._neighbor_pairs(layout.positions, plant_params.l_h, plant_params.l_v)
    geo = solar._PairGeometry(layout.positions, pair_i, pair_j, plant_params.l_h, plant_params.l_v)
    aim = np.array([0.0, 0.0, cavity_design.receiver.h_t])
    to_recv = aim - layout.positions
    beam = to_recv / np.linalg.norm(to_recv, axis=1)[:, None]
    fast = solar._shadow_block_field(layout.positions, beam, geo, plant_params, grid)
    solar._KERNELS = False
    try:
        reference = solar._shadow_block_field(layout.positions, beam, geo, plant_params, grid)
    finally:
        solar._KERNELS = None
    np.testing.assert_allclose(fast, reference, atol=1e-12)


# ---------------------------------------------------------------------------
# insolation and integration
# ---------------------------------------------------------------------------


def test_insolation_table_validation():
    months = list(clear_sky_insolation(0.6).months)
    with pytest.raises(ValueError):
        InsolationTable(months=tuple(months[:11]))
    with pytest.raises(ValueError):
        MonthInsolation(month=1, hours=(8.0, 9.0), dni=(100.0, -1.0),
                        tamb=(10.0, 10.0), clear_ratio=0.5, days=31)
    with pytest.raises(ValueError):
        MonthInsolation(month=1, hours=(9.0, 8.0), dni=(100.0, 100.0),
                        tamb=(10.0, 10.0), clear_ratio=0.5, days=31)
    with pytest.raises(ValueError):
        MonthInsolation(month=1, hours=(8.0, 9.0), dni=(100.0, 100.0),
                        tamb=(10.0, 10.0), clear_ratio=1.5, days=31)


def _constant_insolation(dni=800.0, hours=(9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0),
                         clear=1.0, days=30):
    months = tuple(
        MonthInsolation(month=m, hours=hours, dni=tuple([dni] * len(hours)),
                        tamb=tuple([25.0] * len(hours)), clear_ratio=clear, days=days)
        for m in range(1, 13)
    )
    return InsolationTable(months=months)


def test_degenerate_integrand_energy():
    # all efficiency factors one: energy = DNI * area * daylight_span * days
    params_area = L_H * L_V
    inso = _constant_insolation()
    grid = TimeGrid.build(math.radians(37.5), inso)
    assert grid.hours.size == 7 * 12  # every sample is daylight at this latitude
    factors = {
        "cosine": np.ones((1, grid.hours.size)),
        "shadow_block": np.ones((1, grid.hours.size)),
        "attenuation": np.ones(1),
    }

    class P:
        mirror_area = params_area
        reflectivity = 1.0

    power = _per_heliostat_power(factors, np.ones(1), P(), grid)
    energy = float(np.asarray(grid.integrate(power))[0]) / 1000.0
    expect = 800.0 * params_area * 6.0 * 30 * 12 / 1000.0
    assert energy == pytest.approx(expect, rel=1e-12)


def test_zero_clear_ratio_kills_energy(plant_params, cavity_design, small_config):
    inso = _constant_insolation(clear=0.0)
    layout = generate_field(cavity_design, plant_params, small_config)
    per_hel, plant = annual_energy(layout, cavity_design, plant_params, inso)
    assert np.all(per_hel == 0.0)
    assert plant == 0.0
    value = objective(cavity_design, plant_params, small_config, inso)
    assert not value.feasible
    assert value.objective == math.inf


def test_plant_total_bounded_by_cycle_efficiency(plant_params, cavity_design,
                                                 small_config, small_insolation):
    layout = generate_field(cavity_design, plant_params, small_config)
    per_hel, plant = annual_energy(layout, cavity_design, plant_params, small_insolation)
    assert plant <= plant_params.eta_cycle * per_hel.sum() + 1e-9
    assert plant > 0.0


def test_annual_energy_permutation_invariant(plant_params, cavity_design,
                                             small_config, small_insolation, rng):
    layout = generate_field(cavity_design, plant_params, small_config)
    perm = rng.permutation(len(layout))
    shuffled = replace(
        layout,
        theta=layout.theta[perm].copy(),
        radius=layout.radius[perm].copy(),
        x=layout.x[perm].copy(),
        y=layout.y[perm].copy(),
        z=layout.z[perm].copy(),
        group=layout.group[perm].copy(),
        line=layout.line[perm].copy(),
        annual_kwh=layout.annual_kwh[perm].copy(),
        selected=layout.selected[perm].copy(),
    )
    per_a, plant_a = annual_energy(layout, cavity_design, plant_params, small_insolation)
    per_b, plant_b = annual_energy(shuffled, cavity_design, plant_params, small_insolation)
    np.testing.assert_allclose(per_a[perm], per_b, rtol=1e-12)
    assert plant_a == pytest.approx(plant_b, rel=1e-12)


# ---------------------------------------------------------------------------
# objective evaluator and staged cache
# ---------------------------------------------------------------------------


def make_evaluator(plant_params, small_config, small_insolation, **kwargs):
    return ObjectiveEvaluator(plant_params, small_config, small_insolation, **kwargs)


def test_objective_is_cost_over_energy(plant_params, cavity_design, small_config,
                                       small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    value = ev.objective(cavity_design)
    assert value.feasible
    assert value.objective == pytest.approx(value.total_cost / value.annual_energy, rel=1e-15)
    cost = plant_params.cost.total(small_config.n_hel, plant_params.mirror_area,
                                   cavity_design.receiver)
    assert value.total_cost == pytest.approx(cost, rel=1e-15)


def test_identical_designs_hit_the_cache(plant_params, cavity_design, small_config,
                                         small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    a = ev.objective(cavity_design)
    hits_before = ev.counters.cache_hits
    b = ev.objective(cavity_design)
    assert a == b
    assert ev.counters.cache_hits > hits_before
    assert ev.counters.shadow_block == 1


def test_aperture_change_reuses_shadow_block(plant_params, cavity_design,
                                             small_config, small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    ev.objective(cavity_design)
    assert ev.counters.shadow_block == 1
    rec = cavity_design.receiver
    for r in (rec.r * 1.05, rec.r * 0.9, rec.r * 1.2):
        d = replace(cavity_design, receiver=CavityReceiver(rec.h_t, r, rec.e_l))
        ev.objective(d)
    d = replace(cavity_design, receiver=CavityReceiver(rec.h_t, rec.r, rec.e_l + 0.1))
    ev.objective(d)
    # aperture-only changes never recompute shadow/block or the layout
    assert ev.counters.shadow_block == 1
    assert ev.counters.layout == 1
    assert ev.counters.interception == 5


def test_tower_height_change_recomputes_optics_not_layout(plant_params, cavity_design,
                                                          small_config, small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    ev.objective(cavity_design)
    rec = cavity_design.receiver
    d = replace(cavity_design, receiver=CavityReceiver(rec.h_t + 5.0, rec.r, rec.e_l))
    ev.objective(d)
    assert ev.counters.layout == 1
    assert ev.counters.shadow_block == 2


def test_cached_equals_uncached(plant_params, cavity_design, small_config,
                                small_insolation, rng):
    cached = make_evaluator(plant_params, small_config, small_insolation, use_cache=True)
    fresh = make_evaluator(plant_params, small_config, small_insolation, use_cache=False)
    base = cavity_design.to_array()
    lo = np.minimum(base * 0.9, base * 1.1)
    hi = np.maximum(base * 0.9, base * 1.1)
    for _ in range(6):
        x = rng.uniform(lo, hi)
        d = cavity_design.with_array(x)
        a = cached.objective(d)
        b = fresh.objective(d)
        assert a == b  # bit-for-bit


def test_reflectivity_strictly_improves_objective(plant_params, cavity_design,
                                                  small_config, small_insolation):
    shinier = replace(plant_params, reflectivity=0.95)
    dull = ObjectiveEvaluator(plant_params, small_config, small_insolation)
    bright = ObjectiveEvaluator(shinier, small_config, small_insolation)
    assert bright.objective(cavity_design).objective < dull.objective(cavity_design).objective


def test_breakdown_factors_in_unit_interval(plant_params, cavity_design, small_config,
                                            small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    br = ev.breakdown(cavity_design)
    for arr in (br.cosine, br.shadow_block, br.attenuation, br.interception):
        assert np.all(arr >= 0.0) and np.all(arr <= 1.0)
    product = (br.cosine * br.shadow_block
               * br.attenuation[:, None] * br.interception[:, None] * br.reflectivity)
    assert np.all(product >= 0.0) and np.all(product <= 1.0)


def test_cylindrical_plant_evaluates(plant_params, cylindrical_design, small_config,
                                     small_insolation):
    ev = make_evaluator(plant_params, small_config, small_insolation)
    value = ev.objective(cylindrical_design)
    assert value.feasible and value.objective > 0.0


def test_declination_bounds():
    days = np.arange(1, 366)
    decs = np.array([declination(d) for d in days])
    assert np.all(np.abs(decs) <= math.radians(23.45) + 1e-12)
