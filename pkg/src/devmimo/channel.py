"""Large-scale gains and clustered small-scale MIMO channels.

Large-scale: UMa-style pathloss with breakpoint, LOS probability,
log-normal shadowing and composite-wall O2I penetration.

Small-scale: a reduced clustered model (one LOS ray when applicable plus
N_c single-ray clusters with Laplacian angle spread and exponential excess
delays) in lieu of ray tracing or full fast-fading profiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scenario import ArrayGeometry, DeviceNode, ElementPattern

C_LIGHT = 3e8

SHADOWING_SIGMA_LOS_DB = 4.0
SHADOWING_SIGMA_NLOS_DB = 6.0
INSIDE_LOSS_DB_PER_M = 0.5

# reduced clustered-model defaults
N_CLUSTERS = 6
AZ_SPREAD_DEG = 10.0
EL_SPREAD_DEG = 3.0
DELAY_RMS_S = 300e-9
K_FACTOR_DB = 9.0
CLUSTER_SHADOW_STD_DB = 3.0


class Band(Enum):
    LOW = "low"
    HIGH = "high"


# ---------------------------------------------------------------------------
# large-scale models
# ---------------------------------------------------------------------------

def pathloss(d3d_m, f_ghz: float, los: bool,
             h_bs: float = 25.0, h_ut: float = 1.5):
    """Urban-macro pathloss in dB (breakpoint dual-slope LOS, NLOS floor).

    Accepts scalar or array d3d_m; raises on distances below 1 m.
    """
    d3d = np.asarray(d3d_m, dtype=float)
    if np.any(d3d < 1.0):
        raise ValueError("d3d must be >= 1 m")
    dh = h_bs - h_ut
    d2d = np.sqrt(np.maximum(d3d ** 2 - dh ** 2, 1e-12))
    # effective environment height 1 m
    dbp = 4.0 * (h_bs - 1.0) * (h_ut - 1.0) * f_ghz * 1e9 / C_LIGHT
    pl1 = 28.0 + 22.0 * np.log10(d3d) + 20.0 * math.log10(f_ghz)
    pl2 = (28.0 + 40.0 * np.log10(d3d) + 20.0 * math.log10(f_ghz)
           - 9.0 * math.log10(dbp ** 2 + dh ** 2))
    pl_los = np.where(d2d <= dbp, pl1, pl2)
    if los:
        out = pl_los
    else:
        pl_n = (13.54 + 39.08 * np.log10(d3d) + 20.0 * math.log10(f_ghz)
                - 0.6 * (h_ut - 1.5))
        out = np.maximum(pl_los, pl_n)
    return out if out.ndim else float(out)


def los_probability(d2d_m):
    """Urban-macro LOS probability for UE heights below 13 m."""
    d2d = np.asarray(d2d_m, dtype=float)
    p = np.where(d2d <= 18.0, 1.0,
                 18.0 / np.maximum(d2d, 18.0)
                 + np.exp(-d2d / 63.0) * (1.0 - 18.0 / np.maximum(d2d, 18.0)))
    return p if p.ndim else float(p)


def o2i_wall_loss_db(f_ghz: float, high_loss: bool = False) -> float:
    """Composite-material wall penetration (no depth, no random spread)."""
    l_glass = 2.0 + 0.2 * f_ghz
    l_concrete = 5.0 + 4.0 * f_ghz
    if high_loss:
        l_irr_glass = 23.0 + 0.3 * f_ghz
        mix = 0.7 * 10 ** (-l_irr_glass / 10.0) + 0.3 * 10 ** (-l_concrete / 10.0)
    else:
        mix = 0.3 * 10 ** (-l_glass / 10.0) + 0.7 * 10 ** (-l_concrete / 10.0)
    return 5.0 - 10.0 * math.log10(mix)


def o2i_penetration(f_ghz: float, depth_m: float,
                    rng: np.random.Generator | None = None,
                    high_loss: bool = False) -> float:
    """Wall loss + 0.5 dB/m inside loss + optional log-normal spread [dB]."""
    if depth_m < 0:
        raise ValueError("depth_m must be >= 0")
    loss = o2i_wall_loss_db(f_ghz, high_loss) + INSIDE_LOSS_DB_PER_M * depth_m
    if rng is not None:
        sigma = 6.5 if high_loss else 4.4
        loss += rng.normal(0.0, sigma)
    return max(loss, 0.0)


def shadowing_db(los: bool, rng: np.random.Generator) -> float:
    sigma = SHADOWING_SIGMA_LOS_DB if los else SHADOWING_SIGMA_NLOS_DB
    return float(rng.normal(0.0, sigma))


def friis_db(d_m: float, f_ghz: float) -> float:
    """Free-space loss, 32.45 + 20 log10(d_km) + 20 log10(f_MHz)."""
    return 32.45 + 20.0 * math.log10(d_m) + 20.0 * math.log10(f_ghz)


@dataclass(frozen=True)
class LargeScale:
    pathloss_db: float
    shadowing_db: float = 0.0
    penetration_db: float = 0.0
    los: bool = True

    def __post_init__(self):
        if self.pathloss_db <= 0:
            raise ValueError("pathloss_db must be positive")
        if self.penetration_db < 0:
            raise ValueError("penetration_db must be >= 0")

    @property
    def total_db(self) -> float:
        return self.pathloss_db + self.shadowing_db + self.penetration_db

    @property
    def linear(self) -> float:
        """Linear power gain (<= 1 for any positive loss)."""
        return 10.0 ** (-self.total_db / 10.0)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def direction_unit(az_deg, el_deg) -> np.ndarray:
    """Unit vector(s) (..., 3) for azimuth/elevation in degrees."""
    az = np.radians(np.asarray(az_deg, dtype=float))
    el = np.radians(np.asarray(el_deg, dtype=float))
    return np.stack([np.cos(el) * np.cos(az),
                     np.cos(el) * np.sin(az),
                     np.sin(el)], axis=-1)


def angles_from_vector(v: np.ndarray):
    """(az_deg in [-180, 180), el_deg in [-90, 90]) of vector(s) (..., 3)."""
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v, axis=-1)
    az = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    el = np.degrees(np.arcsin(np.clip(v[..., 2] / np.maximum(r, 1e-300), -1, 1)))
    az = (az + 180.0) % 360.0 - 180.0
    return az, el


def sector_element_amplitude(az_local_deg, el_local_deg,
                             max_gain_dbi: float = 8.0) -> np.ndarray:
    """3-sector element pattern amplitude (65 deg HPBW both cuts,
    30 dB front-to-back), boresight at local +x."""
    az = np.asarray(az_local_deg, dtype=float)
    el = np.asarray(el_local_deg, dtype=float)
    a_h = -np.minimum(12.0 * (az / 65.0) ** 2, 30.0)
    a_v = -np.minimum(12.0 * (el / 65.0) ** 2, 30.0)
    a = -np.minimum(-(a_h + a_v), 30.0) + max_gain_dbi
    return 10.0 ** (a / 20.0)


def array_response(array: ArrayGeometry, rotation: np.ndarray,
                   az_deg, el_deg, f_ghz: float) -> np.ndarray:
    """Narrowband response (n_elements, ...) for global-frame angles.

    Entries are exp(j 2*pi/lambda <p_n, u>) scaled by the element pattern
    amplitude; unit modulus for isotropic elements.
    """
    u_global = direction_unit(az_deg, el_deg)              # (..., 3)
    u_local = u_global @ rotation                          # R^T u
    k = 2.0 * math.pi * f_ghz * 1e9 / C_LIGHT
    phase = k * np.einsum("na,...a->n...", array.positions, u_local)
    resp = np.exp(1j * phase)
    if array.pattern is ElementPattern.SECTOR_3GPP:
        az_l, el_l = angles_from_vector(u_local)
        resp = resp * sector_element_amplitude(az_l, el_l)[None, ...]
    return resp


# ---------------------------------------------------------------------------
# clustered rays
# ---------------------------------------------------------------------------

@dataclass
class RaySet:
    power: np.ndarray      # linear, sums to 1
    delay: np.ndarray      # seconds
    aod_az: np.ndarray     # degrees, global frame at Tx
    aod_el: np.ndarray
    aoa_az: np.ndarray     # degrees, global frame at Rx (toward the source)
    aoa_el: np.ndarray
    phase: np.ndarray      # radians

    def __post_init__(self):
        if abs(float(np.sum(self.power)) - 1.0) > 1e-9:
            raise ValueError("ray powers must sum to 1")
        if np.any(self.delay < 0):
            raise ValueError("delays must be >= 0")

    @property
    def n_rays(self) -> int:
        return self.power.shape[0]


def gen_rays(tx_pos: np.ndarray, rx_pos: np.ndarray, los: bool,
             rng: np.random.Generator,
             n_clusters: int = N_CLUSTERS,
             az_spread_deg: float = AZ_SPREAD_DEG,
             el_spread_deg: float = EL_SPREAD_DEG,
             delay_rms_s: float = DELAY_RMS_S,
             k_factor_db: float = K_FACTOR_DB) -> RaySet:
    """Reduced clustered ray set for one link.

    LOS ray present iff `los`, weighted by the Rician K factor; clusters are
    Laplacian-spread around the geometric direction with exponential excess
    delays and log-normal per-cluster shadowing.
    """
    tx = np.asarray(tx_pos, dtype=float)
    rx = np.asarray(rx_pos, dtype=float)
    d = rx - tx
    dist = float(np.linalg.norm(d))
    if dist <= 0:
        raise ValueError("endpoints must be distinct")
    dep_az, dep_el = angles_from_vector(d)
    arr_az, arr_el = angles_from_vector(-d)
    tau0 = dist / C_LIGHT

    k_lin = 10.0 ** (k_factor_db / 10.0)
    if los and n_clusters == 0:
        return RaySet(np.array([1.0]), np.array([tau0]),
                      np.array([dep_az]), np.array([dep_el]),
                      np.array([arr_az]), np.array([arr_el]),
                      np.array([0.0]))

    n_c = max(n_clusters, 1)
    excess = rng.exponential(delay_rms_s, n_c)
    w = np.exp(-excess / delay_rms_s) * 10 ** (
        rng.normal(0.0, CLUSTER_SHADOW_STD_DB, n_c) / 10.0)
    w = w / np.sum(w)
    # Laplacian offsets at both ends (scale chosen so std == spread)
    lap = lambda s, n: rng.laplace(0.0, s / math.sqrt(2.0), n)
    c_dep_az = dep_az + lap(az_spread_deg, n_c)
    c_dep_el = dep_el + lap(el_spread_deg, n_c)
    c_arr_az = arr_az + lap(az_spread_deg, n_c)
    c_arr_el = arr_el + lap(el_spread_deg, n_c)
    phases = rng.uniform(-math.pi, math.pi, n_c)

    if los:
        p = np.concatenate([[k_lin / (k_lin + 1.0)], w / (k_lin + 1.0)])
        p = p / np.sum(p)
        return RaySet(p, np.concatenate([[tau0], tau0 + excess]),
                      np.concatenate([[dep_az], c_dep_az]),
                      np.concatenate([[dep_el], c_dep_el]),
                      np.concatenate([[arr_az], c_arr_az]),
                      np.concatenate([[arr_el], c_arr_el]),
                      np.concatenate([[0.0], phases]))
    return RaySet(w, tau0 + excess, c_dep_az, c_dep_el,
                  c_arr_az, c_arr_el, phases)


# ---------------------------------------------------------------------------
# channel assembly
# ---------------------------------------------------------------------------

@dataclass
class ChannelRealization:
    h: np.ndarray              # (n_subbands, n_rx, n_tx)
    large: LargeScale
    rays: RaySet
    band: Band = Band.LOW


def assemble_channel(rays: RaySet,
                     tx_array: ArrayGeometry, tx_rotation: np.ndarray,
                     rx_array: ArrayGeometry, rx_rotation: np.ndarray,
                     large: LargeScale, subcarriers_hz: np.ndarray,
                     f_ghz: float, band: Band = Band.LOW) -> ChannelRealization:
    """Per-subband channel H[s] = sqrt(lin) sum_r sqrt(p_r) e^{j phi_r}
    e^{-j 2 pi f_s tau_r} a_rx(aoa_r) a_tx(aod_r)^H."""
    sc = np.asarray(subcarriers_hz, dtype=float)
    a_tx = array_response(tx_array, tx_rotation, rays.aod_az, rays.aod_el, f_ghz)
    a_rx = array_response(rx_array, rx_rotation, rays.aoa_az, rays.aoa_el, f_ghz)
    g = np.sqrt(rays.power) * np.exp(1j * rays.phase)          # (R,)
    dly = np.exp(-2j * math.pi * sc[:, None] * rays.delay[None, :])  # (S, R)
    amp = math.sqrt(large.linear)
    h = amp * np.einsum("sr,nr,mr->snm", g[None, :] * dly, a_rx, a_tx.conj())
    return ChannelRealization(h, large, rays, band)


def local_link_channel(primary: DeviceNode, helper: DeviceNode,
                       f_ghz: float, subcarriers_hz: np.ndarray,
                       tx_is_helper: bool = True) -> ChannelRealization:
    """Pure-LOS free-space channel between a primary and its helper.

    Rank 1 for any array sizes (single ray outer product).
    """
    tx, rx = (helper, primary) if tx_is_helper else (primary, helper)
    d = float(np.linalg.norm(rx.position - tx.position))
    if d <= 0:
        raise ValueError("coincident primary/helper positions")
    large = LargeScale(pathloss_db=friis_db(d, f_ghz), los=True)
    dep_az, dep_el = angles_from_vector(rx.position - tx.position)
    arr_az, arr_el = angles_from_vector(tx.position - rx.position)
    rays = RaySet(np.array([1.0]), np.array([d / C_LIGHT]),
                  np.array([dep_az]), np.array([dep_el]),
                  np.array([arr_az]), np.array([arr_el]), np.array([0.0]))
    return assemble_channel(rays, tx.array, tx.rotation, rx.array, rx.rotation,
                            large, subcarriers_hz, f_ghz, Band.HIGH)
