"""Uplink-signal-based direction finding with a user-side distributed array.

A primary device and its nearby companions form a virtual receive array.
Per-device spatial covariances are combined non-coherently, so unknown
per-device timing/phase offsets and device orderings do not affect the
spectrum.  The refined arrival direction plus a ranging estimate yields a
position fix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .errors import ConfigurationError, EstimationError
from .scenario import ArrayGeometry, ScenarioConfig, rot_y, rot_z, ula

SSB_SUBCARRIERS = 240
SSB_SCS_HZ = 30e3


@dataclass(frozen=True)
class VirtualArray:
    """Element positions grouped by owning device, primary frame."""
    element_pos: np.ndarray       # (n, 3) meters
    device_of_element: np.ndarray  # (n,) int
    n_devices: int

    def elements_of(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.device_of_element == d)


def build_virtual_array(devices) -> VirtualArray:
    """Stack device arrays into one virtual aperture.

    `devices` is a list of (position (3,), rotation (3,3), ArrayGeometry)
    expressed in the primary's local frame.
    """
    if not devices:
        raise ConfigurationError("virtual array needs at least one device")
    pos, owner = [], []
    for i, (p, r, arr) in enumerate(devices):
        pos.append(np.asarray(p) + arr.positions @ np.asarray(r).T)
        owner.append(np.full(arr.n_elements, i))
    return VirtualArray(np.concatenate(pos), np.concatenate(owner),
                        len(devices))


def steering_vector(va: VirtualArray, az_deg, el_deg,
                    f_ghz: float) -> np.ndarray:
    """Plane-wave response (n_elements, ...) of the virtual array."""
    u = ch.direction_unit(az_deg, el_deg)
    k = 2.0 * math.pi * f_ghz * 1e9 / ch.C_LIGHT
    return np.exp(1j * k * np.einsum("na,...a->n...", va.element_pos, u))


@dataclass
class DeviceResponse:
    """Per-device snapshot matrix (n_elem_d, n_snapshots)."""
    device: int
    snapshots: np.ndarray


def estimate_device_response(rx: np.ndarray, pilots: np.ndarray) -> np.ndarray:
    """Least-squares channel estimate per pilot tone, h_hat = y / s."""
    pilots = np.asarray(pilots)
    if np.any(np.abs(pilots) < 1e-12):
        raise EstimationError("pilot symbols must be nonzero")
    return rx / pilots


def _device_covariances(va: VirtualArray, snapshots: np.ndarray):
    """Sample covariance per device from virtual-array snapshots (n, T)."""
    covs = []
    t = snapshots.shape[1]
    for d in range(va.n_devices):
        idx = va.elements_of(d)
        x = snapshots[idx]
        covs.append(x @ x.conj().T / t)
    return covs


def _spectrum(va: VirtualArray, covs, az_grid, el_grid, f_ghz: float,
              method: str) -> np.ndarray:
    az, el = np.meshgrid(az_grid, el_grid, indexing="ij")
    total = np.zeros(az.shape)
    for d in range(va.n_devices):
        idx = va.elements_of(d)
        sub = VirtualArray(va.element_pos[idx], np.zeros(len(idx), dtype=int), 1)
        a = steering_vector(sub, az, el, f_ghz)              # (n_d, A, E)
        r = covs[d]
        if method == "bartlett":
            num = np.real(np.einsum("nae,nm,mae->ae", a.conj(), r, a))
            total += num / len(idx)
        else:  # MUSIC with a single-source signal subspace
            ev, evec = np.linalg.eigh(r)
            en = evec[:, :-1]                                # noise subspace
            proj = np.einsum("nk,nae->kae", en.conj(), a)
            denom = np.einsum("kae,kae->ae", proj.conj(), proj).real
            total += len(idx) / np.maximum(denom, 1e-18)
    return total


def _refine(grid: np.ndarray, i: int, vals: np.ndarray) -> float:
    """Quadratic peak interpolation on a uniform grid."""
    if i == 0 or i == len(grid) - 1:
        return float(grid[i])
    y0, y1, y2 = vals[i - 1], vals[i], vals[i + 1]
    denom = y0 - 2.0 * y1 + y2
    if abs(denom) < 1e-18:
        return float(grid[i])
    step = 0.5 * (y0 - y2) / denom
    return float(grid[i] + np.clip(step, -1.0, 1.0) * (grid[1] - grid[0]))


def noncoherent_aoa(va: VirtualArray, snapshots: np.ndarray, f_ghz: float,
                    method: str = "bartlett",
                    az_grid=None, el_grid=None) -> tuple:
    """Arrival direction from non-coherently combined device spectra.

    Returns (az_deg, el_deg).  The search elevation defaults to [0, 90]
    (source above the horizon), which also resolves the mirror ambiguity
    of planar device sub-arrays.
    """
    if snapshots.shape[0] != va.element_pos.shape[0]:
        raise EstimationError("snapshot rows must match virtual elements")
    if not np.all(np.isfinite(snapshots)):
        raise EstimationError("non-finite snapshots")
    if np.max(np.abs(snapshots)) < 1e-15:
        raise EstimationError("all-zero snapshots")
    az_grid = np.arange(-180.0, 180.0, 1.0) if az_grid is None else az_grid
    el_grid = np.arange(0.0, 90.5, 1.0) if el_grid is None else el_grid
    covs = _device_covariances(va, snapshots)
    spec = _spectrum(va, covs, az_grid, el_grid, f_ghz, method)
    i, j = np.unravel_index(np.argmax(spec), spec.shape)
    az = _refine(az_grid, i, spec[:, j])
    el = _refine(el_grid, j, spec[i, :])
    return az, el


def aoa_error_deg(az1, el1, az2, el2) -> float:
    """Great-circle angle between two directions [deg]."""
    u = ch.direction_unit(az1, el1)
    v = ch.direction_unit(az2, el2)
    return float(np.degrees(np.arccos(np.clip(np.dot(u, v), -1.0, 1.0))))


def localize(anchor_pos: np.ndarray, az_deg: float, el_deg: float,
             range_m: float) -> np.ndarray:
    """Position fix: walk `range_m` from the anchor along the direction
    opposite to the measured arrival direction at the device."""
    u = ch.direction_unit(az_deg, el_deg)
    return np.asarray(anchor_pos, dtype=float) - range_m * u


# ---------------------------------------------------------------------------
# device ensembles for the three augmentation levels
# ---------------------------------------------------------------------------

def _ensemble(case: str, f_ghz: float, rng: np.random.Generator):
    """Device list in the primary frame for each augmentation level.

    loc1: wearable only (2 elements).  loc2: + handset with an orthogonal
    axis.  loc3: + two larger fixed units a few meters away.
    """
    lam2 = 0.5 * ch.C_LIGHT / (f_ghz * 1e9)
    wearable = (np.zeros(3), np.eye(3), ula(2, lam2))
    devices = [wearable]
    if case in ("loc2", "loc3"):
        # crossed horizontal axis: the remaining mirror ambiguity flips the
        # elevation sign, which the above-horizon search removes
        handset = (np.array([0.3, 0.0, -0.5]), rot_z(90.0), ula(2, lam2))
        devices.append(handset)
    if case == "loc3":
        planar = np.zeros((4, 3))
        planar[:, 0] = np.repeat([-lam2 / 2, lam2 / 2], 2)
        planar[:, 2] = np.tile([-lam2 / 2, lam2 / 2], 2)
        for _ in range(2):
            r = rng.uniform(3.0, 5.0)
            th = rng.uniform(0.0, 2.0 * math.pi)
            pos = np.array([r * math.cos(th), r * math.sin(th), 0.5])
            devices.append((pos, rot_z(rng.uniform(0.0, 360.0)),
                            ArrayGeometry(planar)))
    return devices


@dataclass(frozen=True)
class LocResult:
    user: int
    case: str
    true_az: float
    true_el: float
    est_az: float
    est_el: float
    aoa_err_deg: float
    pos_err_m: float
    indoor: bool = False


def synthesize_snapshots(va: VirtualArray, az: float, el: float, f_ghz: float,
                         snr_db: float, rng: np.random.Generator,
                         los: bool = True,
                         n_tones: int = SSB_SUBCARRIERS) -> np.ndarray:
    """Synchronization-block snapshots across the virtual array.

    One geometric ray (when LOS) plus weak clusters, per-device unknown
    timing/phase, additive noise at the given per-element SNR.
    """
    tones = (np.arange(n_tones) - (n_tones - 1) / 2.0) * SSB_SCS_HZ
    k_lin = 10.0 ** (ch.K_FACTOR_DB / 10.0)
    n_c = ch.N_CLUSTERS
    c_az = az + rng.laplace(0.0, ch.AZ_SPREAD_DEG / math.sqrt(2.0), n_c)
    c_el = el + rng.laplace(0.0, ch.EL_SPREAD_DEG / math.sqrt(2.0), n_c)
    c_tau = rng.exponential(ch.DELAY_RMS_S, n_c)
    c_phi = rng.uniform(0.0, 2.0 * math.pi, n_c)
    w = np.exp(-c_tau / ch.DELAY_RMS_S) * 10.0 ** (
        rng.normal(0.0, ch.CLUSTER_SHADOW_STD_DB, n_c) / 10.0)
    w /= w.sum()
    if los:
        p = np.concatenate([[k_lin / (k_lin + 1.0)], w / (k_lin + 1.0)])
        ray_az = np.concatenate([[az], c_az])
        ray_el = np.concatenate([[el], c_el])
        tau = np.concatenate([[0.0], c_tau])
        phi = np.concatenate([[0.0], c_phi])
    else:
        p, ray_az, ray_el, tau, phi = w, c_az, c_el, c_tau, c_phi

    a = steering_vector(va, ray_az, ray_el, f_ghz)          # (n, R)
    g = np.sqrt(p) * np.exp(1j * phi)
    dly = np.exp(-2j * math.pi * tones[None, :] * tau[:, None])  # (R, T)
    x = a @ (g[:, None] * dly)                              # (n, T)
    dev_tau = rng.uniform(0.0, 1e-6, va.n_devices)
    dev_phi = rng.uniform(0.0, 2.0 * math.pi, va.n_devices)
    x *= np.exp(1j * (2.0 * math.pi * tones[None, :]
                      * dev_tau[va.device_of_element, None]
                      + dev_phi[va.device_of_element, None]))
    snr_lin = 10.0 ** (snr_db / 10.0)
    noise = (rng.normal(size=x.shape) + 1j * rng.normal(size=x.shape)) \
        / math.sqrt(2.0 * snr_lin)
    return x + noise


def run_loc_experiment(cfg: ScenarioConfig, seed: int = 0) -> list:
    """Monte-Carlo direction finding and positioning for one ensemble level.

    Trial randomness is keyed per (seed, user) so different ensemble levels
    see the same truth directions and can be compared pairwise.
    """
    case = cfg.case.value
    if case not in ("loc1", "loc2", "loc3"):
        raise ConfigurationError("localization requires a loc case")
    f_ghz = cfg.f_low_ghz
    results = []
    for u in range(cfg.loc_users):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x10C, u)))
        az = rng.uniform(-180.0, 180.0)
        el = np.degrees(np.arcsin(rng.uniform(0.0, 1.0)))   # above horizon
        devices = _ensemble(case, f_ghz, rng)
        va = build_virtual_array(devices)
        x = synthesize_snapshots(va, az, el, f_ghz, cfg.loc_snr_db, rng)
        est_az, est_el = noncoherent_aoa(va, x, f_ghz, method=cfg.loc_method)
        err = aoa_error_deg(az, el, est_az, est_el)

        # positioning against a far anchor with noisy ranging
        range_true = rng.uniform(50.0, 300.0)
        anchor = range_true * ch.direction_unit(az, el)
        rmeas = range_true + rng.normal(0.0, cfg.range_sigma_m)
        pos = localize(anchor, est_az, est_el, rmeas)
        results.append(LocResult(u, case, az, el, est_az, est_el, err,
                                 float(np.linalg.norm(pos))))
    return results


def median_aoa_error(results) -> float:
    return float(np.median([r.aoa_err_deg for r in results]))


def median_pos_error(results) -> float:
    return float(np.median([r.pos_err_m for r in results]))
