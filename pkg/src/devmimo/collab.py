"""Device-collaboration core: frequency-translation AF relay chains,
diversity path selection, and rank-augmented stacked links."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import phy
from .phy import LinkReport, Precoder


class Provenance(Enum):
    DIRECT = "direct"
    RELAYED = "relayed"
    STACKED = "stacked"


class PathChoice(Enum):
    DIRECT = "direct"
    RELAYED = "relayed"


@dataclass
class RelayChain:
    """One frequency-translation AF hop: first-hop channel in one band,
    receive beamforming + scalar gain at the helper, second-hop channel in
    the other band."""
    h_first: np.ndarray         # (S, n_helper_rx, n_tx)
    w: np.ndarray               # (n_out, n_helper_rx)
    gain: float                 # linear amplitude gain
    h_second: np.ndarray        # (S, n_primary_rx, n_out)
    r_first: np.ndarray         # (S, n_helper_rx, n_helper_rx)
    r_second: np.ndarray        # (S, n_primary_rx, n_primary_rx)
    cap_dbm: float = 14.0

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("gain must be >= 0")


@dataclass
class EffectiveLink:
    h_eff: np.ndarray           # (S, n_rx, n_in)
    r_nn: np.ndarray            # (S, n_rx, n_rx)
    provenance: Provenance


def relay_rx_beamformer(h_first: np.ndarray, r_int: np.ndarray,
                        n_out: int) -> np.ndarray:
    """Whitened-MRC receive beamformer at the relay.

    Rows are the top left singular vectors of R^-1/2 H, composed with the
    whitener, so strong interferers in R are nulled in the limit.
    """
    hw = np.asarray(h_first)
    if hw.ndim == 3:
        # stack subbands column-wise so the row space is wideband
        hw = np.concatenate(list(hw), axis=1)
    if n_out > hw.shape[0]:
        raise ValueError("n_out exceeds helper antenna count")
    r = np.asarray(r_int)
    if r.ndim == 3:
        r = r.mean(axis=0)
    evals, evecs = np.linalg.eigh(r)
    evals = np.maximum(evals, 1e-18 * max(float(evals[-1]), 1e-300))
    r_isqrt = (evecs / np.sqrt(evals)) @ evecs.conj().T
    u, _, _ = np.linalg.svd(r_isqrt @ hw, full_matrices=False)
    return u[:, :n_out].conj().T @ r_isqrt


def relay_gain(input_power_dbm: float, cap_dbm: float) -> float:
    """Full-AGC linear amplitude gain driving the output to the power cap."""
    if not math.isfinite(input_power_dbm):
        raise ValueError("input power must be finite")
    return 10.0 ** ((cap_dbm - input_power_dbm) / 20.0)


def relay_input_power_dbm(h_first: np.ndarray, w: np.ndarray,
                          precoder_cols: np.ndarray, power_per_layer: float,
                          r_first: np.ndarray) -> float:
    """Mean combiner-output power (signal + noise + interference) in dBm."""
    h = np.asarray(h_first)
    if h.ndim == 2:
        h = h[None]
    r = np.asarray(r_first)
    if r.ndim == 2:
        r = np.broadcast_to(r, (h.shape[0],) + r.shape)
    a = h @ (np.asarray(precoder_cols) * math.sqrt(power_per_layer))
    sig = np.mean(np.sum(np.abs(np.einsum("om,smk->sok", w, a)) ** 2,
                         axis=(1, 2)))
    nse = np.mean(np.real(np.einsum("om,smn,on->s", w, r, w.conj())))
    p = max(sig + nse, 1e-300)
    return 10.0 * math.log10(p * 1e3)


def compose_af_link(chain: RelayChain) -> EffectiveLink:
    """End-to-end channel and noise covariance of an AF relay chain:
    H_eff = H2 G W H1, R_eff = G^2 H2 W R1 W^H H2^H + R2."""
    h1 = _ensure3(chain.h_first)
    h2 = _ensure3(chain.h_second)
    r1 = _ensure3(chain.r_first)
    r2 = _ensure3(chain.r_second)
    w, g = np.asarray(chain.w), chain.gain
    if h2.shape[-1] != w.shape[0] or w.shape[1] != h1.shape[1]:
        raise ValueError("relay chain dimension mismatch")
    h_eff = g * h2 @ (w[None] @ h1)
    wr = w[None] @ r1 @ w.conj().T[None]
    r_eff = (g ** 2) * (h2 @ wr @ h2.conj().transpose(0, 2, 1)) + r2
    return EffectiveLink(h_eff, r_eff, Provenance.RELAYED)


def _ensure3(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == 2 else x


def diversity_select(direct: LinkReport, relayed: LinkReport) -> PathChoice:
    """Pick the arm with the larger spectral efficiency; ties go direct."""
    if relayed.se_bps_hz > direct.se_bps_hz:
        return PathChoice.RELAYED
    return PathChoice.DIRECT


def stack_rx(direct: EffectiveLink, relayed: EffectiveLink) -> EffectiveLink:
    """DL rank augmentation: vertically stack direct and relayed receive
    paths; noises are independent so the covariance is block diagonal."""
    hd, hr = _ensure3(direct.h_eff), _ensure3(relayed.h_eff)
    rd, rr = _ensure3(direct.r_nn), _ensure3(relayed.r_nn)
    s, m1, _ = hd.shape
    m2 = hr.shape[1]
    h = np.concatenate([hd, hr], axis=1)
    r = np.zeros((s, m1 + m2, m1 + m2), dtype=complex)
    r[:, :m1, :m1] = rd
    r[:, m1:, m1:] = rr
    return EffectiveLink(h, r, Provenance.STACKED)


def stack_tx(h_direct: np.ndarray, relayed: EffectiveLink) -> EffectiveLink:
    """UL rank augmentation: horizontally stack direct transmit columns with
    the relayed effective columns; both signals land on the same receiver so
    the relayed covariance (which already includes the receiver noise) is
    the stacked covariance."""
    hd = _ensure3(h_direct)
    hr = _ensure3(relayed.h_eff)
    return EffectiveLink(np.concatenate([hd, hr], axis=2),
                         _ensure3(relayed.r_nn), Provenance.STACKED)


def case_select_semistatic(direct_quality_fl_db: float,
                           direct_quality_fh_db: float,
                           threshold_db: float = -3.0) -> str:
    """Semi-static network decision: collaborate when the high band is too
    weak for direct use; the boundary stays legacy."""
    return "collaborate" if direct_quality_fh_db < threshold_db else "legacy_2ca"


# ---------------------------------------------------------------------------
# drop-state driven builders
# ---------------------------------------------------------------------------

@dataclass
class GroupLinkState:
    """Per-group slice of a drop: the channels and covariances needed to
    compose the direct, relayed, and stacked links (all (S, ., .) arrays)."""
    h_direct: np.ndarray            # BS -> primary, low band
    r_direct: np.ndarray
    h_bs_helper: np.ndarray         # BS -> helper, low band
    r_helper: np.ndarray
    h_local: np.ndarray             # helper -> primary, high band
    r_primary_high: np.ndarray      # interference+noise at primary, high band
    tx_power_w: float               # serving transmitter budget
    relay_cap_dbm: float = 14.0
    n_relay_out: int = 1
    max_rank: int = 4
    n_beams: int = 4


def _precoded_report(h: np.ndarray, r: np.ndarray, power: float,
                     max_rank: int, n_beams: int) -> LinkReport:
    rank = phy.select_rank(h, r, power, max_rank)
    pre = phy.type2_like_precoder(h, max(n_beams, rank), rank, power)
    return phy.link_report(_ensure3(h), pre, r)


def build_relay_chain(state: GroupLinkState) -> RelayChain:
    """Beamform at the helper against its own interference, then AGC the
    forwarded signal to the relay output cap."""
    w = relay_rx_beamformer(state.h_bs_helper, state.r_helper,
                            state.n_relay_out)
    # gain set against the dominant-direction first-hop precoding
    pre = phy.svd_precoder(state.h_bs_helper, 1, state.tx_power_w)
    p_in = relay_input_power_dbm(state.h_bs_helper, w, pre.matrix,
                                 pre.power_per_layer, state.r_helper)
    g = relay_gain(p_in, state.relay_cap_dbm)
    return RelayChain(_ensure3(state.h_bs_helper), w, g,
                      _ensure3(state.h_local)[:, :, :state.n_relay_out],
                      _ensure3(state.r_helper), _ensure3(state.r_primary_high),
                      state.relay_cap_dbm)


def build_diversity_arms(state: GroupLinkState) -> dict:
    """Direct arm (low band) and relayed arm (AF chain into the high band),
    each with its own precoder adapted to the arm's effective channel."""
    direct = _precoded_report(state.h_direct, state.r_direct,
                              state.tx_power_w, state.max_rank, state.n_beams)
    chain = build_relay_chain(state)
    eff = compose_af_link(chain)
    relayed = _precoded_report(eff.h_eff, eff.r_nn, state.tx_power_w,
                               state.n_relay_out, state.n_beams)
    return {"direct": direct, "relayed": relayed, "chain": chain}


def build_rank_augmented_link(state: GroupLinkState) -> EffectiveLink:
    """DL stacked link: direct rows plus relay-forwarded rows."""
    chain = build_relay_chain(state)
    eff = compose_af_link(chain)
    direct = EffectiveLink(_ensure3(state.h_direct),
                           _ensure3(state.r_direct), Provenance.DIRECT)
    return stack_rx(direct, eff)
