"""Precoding, combining, and link-adaptation closed-form checks."""

import math

import numpy as np
import pytest

from devmimo import (RankDeficiencyError, effective_se, mmse_irc_combine,
                     select_rank, sinr_to_se, svd_precoder,
                     type2_like_precoder)
from devmimo.phy import Precoder, _dft_beams, mutual_information


def _rand_h(rng, m, n):
    return (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))) \
        / math.sqrt(2.0)


def test_precoder_requires_orthonormal_columns():
    with pytest.raises(ValueError):
        Precoder(np.array([[1.0], [1.0]]), 1.0)


def test_svd_precoder_diagonal_channel_picks_strongest_axis():
    pre = svd_precoder(np.diag([2.0, 1.0]).astype(complex), 1, 1.0)
    v = pre.matrix[:, 0]
    assert abs(abs(v[0]) - 1.0) < 1e-9
    assert abs(v[1]) < 1e-9


def test_svd_precoder_identity_channel_capacity_matches_identity():
    h = np.eye(4, dtype=complex)
    pre = svd_precoder(h, 4, 1.0)
    a = h @ pre.matrix * math.sqrt(pre.power_per_layer)
    c = mutual_information(a, np.eye(4))
    c_id = mutual_information(h * math.sqrt(0.25), np.eye(4))
    assert abs(c - c_id) < 1e-9


def test_svd_precoder_rejects_infeasible_rank():
    h = np.outer([1.0, 1.0], [1.0, 0.0, 1.0]).astype(complex)  # rank 1
    h = h + np.outer([1.0, -1.0], [0.0, 1.0, 0.0])             # rank 2
    with pytest.raises(RankDeficiencyError):
        svd_precoder(h, 3, 1.0)


def test_beam_codebook_recovers_a_pure_grid_beam():
    n_tx = 8
    b = _dft_beams(n_tx, 0, 4)[:, 3]
    h = np.outer(np.ones(2), b.conj())                 # rank-1 along beam 3
    pre = type2_like_precoder(h, n_beams=4, rank=1, power=1.0)
    chordal = 1.0 - abs(np.vdot(pre.matrix[:, 0], b)) ** 2
    assert chordal < 1e-9


def test_beam_codebook_unconstrained_limit_matches_svd():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = _rand_h(rng, 4, 8)
        pre = type2_like_precoder(h, n_beams=8, rank=2, power=1.0,
                                  quantize=False)
        ref = svd_precoder(h, 2, 1.0)
        c = mutual_information(h @ pre.matrix * math.sqrt(0.5), np.eye(4))
        c_ref = mutual_information(h @ ref.matrix * math.sqrt(0.5), np.eye(4))
        assert abs(c - c_ref) < 1e-6


def test_beam_codebook_quantization_keeps_half_the_capacity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        h = _rand_h(rng, 4, 16)
        pre = type2_like_precoder(h, n_beams=4, rank=2, power=1.0)
        ref = svd_precoder(h, 2, 1.0)
        c = mutual_information(h @ pre.matrix * math.sqrt(0.5), np.eye(4))
        c_ref = mutual_information(h @ ref.matrix * math.sqrt(0.5), np.eye(4))
        assert c >= 0.5 * c_ref


def test_beam_codebook_rejects_rank_above_beam_count():
    with pytest.raises(ValueError):
        type2_like_precoder(np.eye(8, dtype=complex), n_beams=2, rank=3,
                            power=1.0)


def test_mmse_scalar_unit_snr():
    pre = Precoder(np.array([[1.0 + 0j]]), 1.0)
    _, sinr = mmse_irc_combine(np.array([[1.0 + 0j]]), pre,
                               np.array([[1.0 + 0j]]))
    assert abs(sinr[0] - 1.0) < 1e-9


def test_mmse_two_antenna_maximum_ratio_gain():
    h = np.array([[1.0 + 0j], [1.0 + 0j]])
    pre = Precoder(np.array([[1.0 + 0j]]), 1.0)
    _, sinr = mmse_irc_combine(h, pre, np.eye(2, dtype=complex))
    assert abs(sinr[0] - 2.0) < 1e-9


def test_mmse_suppresses_codirectional_interference():
    h = np.array([[1.0 + 0j], [0.0 + 0j]])
    pre = Precoder(np.array([[1.0 + 0j]]), 1.0)
    r = np.eye(2, dtype=complex) + 1e6 * np.outer(h[:, 0], h[:, 0].conj())
    _, sinr = mmse_irc_combine(h, pre, r)
    assert sinr[0] < 1e-5


def test_mmse_never_below_matched_filter():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h = _rand_h(rng, 4, 1)
        pre = Precoder(np.array([[1.0 + 0j]]), 1.0)
        v = _rand_h(rng, 4, 1)[:, 0]
        r = np.eye(4, dtype=complex) + 5.0 * np.outer(v, v.conj())
        _, sinr = mmse_irc_combine(h, pre, r)
        w = h[:, 0]
        mrc = abs(np.vdot(w, h[:, 0])) ** 2 / \
            np.real(w.conj() @ r @ w)
        assert sinr[0] >= mrc - 1e-9


def test_se_mapping_reference_points():
    assert sinr_to_se(0.0) == 0.0
    assert abs(sinr_to_se(1.0) - 1.0) < 1e-12
    assert sinr_to_se(1000.0) == 7.4


def test_effective_se_reference_points():
    assert abs(effective_se(np.array([1.0, 1.0, 1.0])) - 1.0) < 1e-12
    assert abs(effective_se(np.array([[1.0, 1.0]])) - 2.0) < 1e-12
    assert abs(effective_se(np.array([0.0, 3.0])) - 1.0) < 1e-12


def test_effective_se_rejects_empty_input():
    with pytest.raises(ValueError):
        effective_se(np.zeros((0,)))


def test_select_rank_boundaries():
    one = np.outer([1.0, 1.0], [1.0, 1.0, 0.0]).astype(complex)
    assert select_rank(one, np.eye(2), 1.0, 4) == 1
    h = np.eye(4, dtype=complex)
    assert select_rank(h, 1e-6 * np.eye(4), 1.0, 4) == 4
    assert select_rank(h, 1e6 * np.eye(4), 1.0, 4) == 1
    with pytest.raises(ValueError):
        select_rank(h, np.eye(4), 1.0, 0)


def test_capacity_invariant_under_receive_unitary():
    rng = np.random.default_rng(3)
    h = _rand_h(rng, 4, 4)
    q, _ = np.linalg.qr(_rand_h(rng, 4, 4))
    pre = svd_precoder(h, 2, 1.0)
    a = h @ pre.matrix * math.sqrt(pre.power_per_layer)
    assert abs(mutual_information(a, np.eye(4))
               - mutual_information(q @ a, np.eye(4))) < 1e-9
