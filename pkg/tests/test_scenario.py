"""Deployment geometry: hex layout, wraparound, device dropping, config."""

import math

import numpy as np
import pytest

from devmimo import (Case, ConfigurationError, ScenarioConfig,
                     build_hex_layout, drop_ues, wraparound_vector)
from devmimo.scenario import rot_y, rot_z, ula


def test_single_site_layout():
    lay = build_hex_layout(0, 200.0)
    assert lay.n_sites == 1
    assert lay.n_cells == 3


def test_one_ring_layout():
    lay = build_hex_layout(1, 200.0)
    assert lay.n_sites == 7
    assert lay.n_cells == 21


def test_two_ring_layout_counts_and_spacing():
    lay = build_hex_layout(2, 200.0)
    assert lay.n_sites == 19
    assert lay.n_cells == 57
    # every site's nearest neighbor sits exactly one inter-site distance away
    d = np.linalg.norm(lay.site_positions[:, None] - lay.site_positions[None, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert np.allclose(d.min(axis=1), 200.0)


def test_site_count_formula():
    for n in range(4):
        assert build_hex_layout(n, 150.0).n_sites == 1 + 3 * n * (n + 1)


def test_sector_azimuths():
    lay = build_hex_layout(1, 200.0)
    assert np.allclose(lay.cell_azimuth_deg.reshape(-1, 3),
                       [0.0, 120.0, 240.0])


def test_layout_rejects_bad_args():
    with pytest.raises(ConfigurationError):
        build_hex_layout(-1, 200.0)
    with pytest.raises(ConfigurationError):
        build_hex_layout(1, 0.0)


def test_wraparound_identical_points():
    lay = build_hex_layout(1, 200.0)
    v = wraparound_vector(np.array([10.0, -5.0]), np.array([10.0, -5.0]), lay)
    assert np.allclose(v, 0.0)


def test_wraparound_no_rings_is_plain_difference():
    lay = build_hex_layout(0, 200.0)
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.uniform(-500, 500, 2), rng.uniform(-500, 500, 2)
        assert np.allclose(wraparound_vector(a, b, lay), b - a)


def test_wraparound_never_longer_than_direct():
    lay = build_hex_layout(2, 200.0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = rng.uniform(-600, 600, 2), rng.uniform(-600, 600, 2)
        v = wraparound_vector(a, b, lay)
        assert np.linalg.norm(v) <= np.linalg.norm(b - a) + 1e-9


def test_drop_counts():
    cfg = ScenarioConfig(num_rings=1)
    lay = build_hex_layout(1, cfg.isd)
    devices, groups = drop_ues(lay, cfg, np.random.default_rng(0))
    n_prim = sum(1 for d in devices if d.kind.name == "PRIMARY")
    n_help = sum(1 for d in devices if d.kind.name == "HELPER")
    assert n_prim == 210
    assert n_help == 210
    assert len(groups) == 210


def test_helper_distance_exactly_configured():
    cfg = ScenarioConfig(num_rings=0)
    lay = build_hex_layout(0, cfg.isd)
    devices, groups = drop_ues(lay, cfg, np.random.default_rng(1))
    by_id = {d.node_id: d for d in devices}
    for g in groups:
        p = by_id[g.primary]
        for hid in g.helpers:
            d = np.linalg.norm(by_id[hid].position - p.position)
            assert abs(d - 1.0) < 1e-9


def test_drop_is_deterministic_per_seed():
    cfg = ScenarioConfig(num_rings=0)
    lay = build_hex_layout(0, cfg.isd)
    d1, _ = drop_ues(lay, cfg, np.random.default_rng(7))
    d2, _ = drop_ues(lay, cfg, np.random.default_rng(7))
    for a, b in zip(d1, d2):
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.rotation, b.rotation)


def test_helper_bearings_cover_the_circle():
    # chi-square uniformity of the helper bearing over 8 bins
    cfg = ScenarioConfig(num_rings=1)
    lay = build_hex_layout(1, cfg.isd)
    devices, groups = drop_ues(lay, cfg, np.random.default_rng(11))
    by_id = {d.node_id: d for d in devices}
    bearings = []
    for g in groups:
        p = by_id[g.primary].position
        h = by_id[g.helpers[0]].position
        bearings.append(math.atan2(h[1] - p[1], h[0] - p[0]))
    counts, _ = np.histogram(bearings, bins=8, range=(-math.pi, math.pi))
    n = len(bearings)
    chi2 = float(np.sum((counts - n / 8) ** 2 / (n / 8)))
    assert chi2 < 24.3  # chi2(7 dof) at p = 0.001


def test_rotations_orthonormal():
    for deg in (0.0, 37.5, 90.0, 210.0):
        for r in (rot_z(deg), rot_y(deg)):
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)


def test_ula_element_count_and_finiteness():
    arr = ula(4, 0.025)
    assert arr.n_elements == 4
    assert np.all(np.isfinite(arr.positions))


def test_config_validation_errors():
    with pytest.raises(ConfigurationError):
        ScenarioConfig(isd=-5.0)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(f_low_ghz=6.0, f_high_ghz=2.0)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(ues_per_cell=0)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(bandwidth_mhz=0.1)  # below one resource block


def test_config_derived_quantities():
    cfg = ScenarioConfig()
    assert cfg.n_prb == 27        # 10 MHz at 30 kHz subcarriers
    assert cfg.n_subbands == 6
    assert abs(cfg.slot_s - 0.5e-3) < 1e-12
    centers = cfg.subband_centers_hz()
    assert len(centers) == cfg.n_subbands
    assert abs(float(np.mean(centers))) < 1e-6


def test_primaries_in_their_sector_cell():
    cfg = ScenarioConfig(num_rings=0)
    lay = build_hex_layout(0, cfg.isd)
    devices, _ = drop_ues(lay, cfg, np.random.default_rng(5))
    for d in devices:
        if d.kind.name != "PRIMARY":
            continue
        r = np.linalg.norm(d.position[:2])
        assert r >= 35.0 - 1e-9           # site exclusion radius
        assert r <= cfg.isd / math.sqrt(3.0) + 1e-9  # hexagon circumradius


def test_loc_case_uses_localization_group_mode():
    cfg = ScenarioConfig(num_rings=0, case=Case.LOC2)
    lay = build_hex_layout(0, cfg.isd)
    _, groups = drop_ues(lay, cfg, np.random.default_rng(2))
    assert all(g.mode.name == "LOCALIZATION" for g in groups)
