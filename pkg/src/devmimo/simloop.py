"""Monte-Carlo drop loop: traffic generation, proportional-fair scheduling,
per-drop throughput statistics and offered-load calibration.

A *drop* realizes one network geometry, then steps slots while refreshing
fast-fading rate tables every few slots.  Each comparison arm (e.g. the
legacy baseline and the collaborative variant) is simulated against the
same geometry, channel randomness and traffic arrivals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import CalibrationError, ConfigurationError
from .scenario import Case, Ftp3, FullBuffer, ScenarioConfig

PF_AVG_WINDOW_SLOTS = 100
PF_RATE_FLOOR_BPS = 1.0


# ---------------------------------------------------------------------------
# traffic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrafficEvent:
    """One file arriving at a user's queue."""
    ue: int
    t_arrival_s: float
    size_bytes: int


@dataclass(frozen=True)
class ThroughputRecord:
    ue: int
    t_arrival_s: float
    t_complete_s: float
    size_bytes: int

    @property
    def throughput_bps(self) -> float:
        dt = self.t_complete_s - self.t_arrival_s
        return 8.0 * self.size_bytes / dt if dt > 0 else math.inf


def ftp3_arrivals(traffic: Ftp3, n_ues: int, duration_s: float,
                  rng: np.random.Generator) -> list:
    """Poisson file arrivals per user, merged and time-sorted."""
    events = []
    for u in range(n_ues):
        t = 0.0
        while True:
            t += rng.exponential(1.0 / traffic.lambda_per_s)
            if t >= duration_s:
                break
            events.append(TrafficEvent(u, t, traffic.file_bytes))
    events.sort(key=lambda e: (e.t_arrival_s, e.ue))
    return events


# ---------------------------------------------------------------------------
# proportional-fair scheduler
# ---------------------------------------------------------------------------

@dataclass
class SchedulerState:
    """Per-arm exponentially averaged served rates (one entry per UE)."""
    avg_bps: np.ndarray
    window_slots: int = PF_AVG_WINDOW_SLOTS

    @classmethod
    def create(cls, n_ues: int) -> "SchedulerState":
        return cls(np.full(n_ues, PF_RATE_FLOOR_BPS))

    def update(self, served_bps: np.ndarray) -> None:
        a = 1.0 / self.window_slots
        self.avg_bps = np.maximum((1.0 - a) * self.avg_bps + a * served_bps,
                                  PF_RATE_FLOOR_BPS)


def pf_schedule(rates_bps: np.ndarray, avg_bps: np.ndarray,
                backlogged: np.ndarray) -> np.ndarray:
    """Pick the PF winner per subband among backlogged users.

    rates_bps is (n_ues, n_subbands); returns (n_subbands,) UE indices,
    -1 where nothing is scheduled.
    """
    n_ues, n_sb = rates_bps.shape
    out = np.full(n_sb, -1, dtype=int)
    idx = np.flatnonzero(backlogged)
    if idx.size == 0:
        return out
    metric = rates_bps[idx] / avg_bps[idx, None]
    win = np.argmax(metric, axis=0)
    best = metric[win, np.arange(n_sb)]
    out[best > 0.0] = idx[win[best > 0.0]]
    return out


# ---------------------------------------------------------------------------
# per-arm slot bookkeeping
# ---------------------------------------------------------------------------

class _ArmState:
    """Queues, PF state and utilization counters for one comparison arm."""

    def __init__(self, n_ues: int, full_buffer: bool):
        self.sched = SchedulerState.create(n_ues)
        self.full_buffer = full_buffer
        self.queues = [[] for _ in range(n_ues)]   # [arrival, remaining, size]
        self.records: list = []
        self.served_bytes = np.zeros(n_ues)
        self.busy_res = 0
        self.total_res = 0

    def backlogged(self) -> np.ndarray:
        if self.full_buffer:
            return np.ones(len(self.queues), dtype=bool)
        return np.array([len(q) > 0 for q in self.queues])

    def admit(self, ev: TrafficEvent) -> None:
        self.queues[ev.ue].append([ev.t_arrival_s, ev.size_bytes, ev.size_bytes])

    def serve(self, ue: int, bytes_avail: float, t_end: float) -> None:
        self.served_bytes[ue] += bytes_avail
        if self.full_buffer:
            return
        q = self.queues[ue]
        while q and bytes_avail > 0.0:
            take = min(q[0][1], bytes_avail)
            q[0][1] -= take
            bytes_avail -= take
            if q[0][1] <= 1e-9:
                arr, _, size = q.pop(0)
                self.records.append(ThroughputRecord(ue, arr, t_end, size))

    def finish_full_buffer(self, duration_s: float) -> None:
        for u, b in enumerate(self.served_bytes):
            self.records.append(ThroughputRecord(u, 0.0, duration_s, int(b)))


@dataclass(frozen=True)
class DropStats:
    """Per-arm outcome of one drop."""
    records: tuple
    resource_utilization: float
    served_bytes: np.ndarray
    path_share_relayed: float = 0.0

    def upt_values_bps(self) -> np.ndarray:
        return np.array([r.throughput_bps for r in self.records
                         if math.isfinite(r.throughput_bps)])


def percentile_nearest_rank(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile (no interpolation)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    k = max(int(math.ceil(pct / 100.0 * v.size)), 1)
    return float(v[k - 1])


def upt_stats(records) -> dict:
    vals = np.array([r.throughput_bps for r in records
                     if math.isfinite(r.throughput_bps)])
    if vals.size == 0:
        return {"mean_bps": 0.0, "p5_bps": 0.0, "n_files": 0}
    return {"mean_bps": float(vals.mean()),
            "p5_bps": percentile_nearest_rank(vals, 5.0),
            "n_files": int(vals.size)}


# ---------------------------------------------------------------------------
# drop driver
# ---------------------------------------------------------------------------

def _slot_plan(cfg: ScenarioConfig):
    n_slots = max(int(round(cfg.sim_duration_s / cfg.slot_s)), 1)
    return n_slots, cfg.channel_update_slots


def _run_dl(cfg: ScenarioConfig, geo: engine.DropGeometry, seed: int,
            want_relay: bool) -> dict:
    rng_ch = np.random.default_rng(np.random.SeedSequence((seed, 0xC4)))
    rng_tr = np.random.default_rng(np.random.SeedSequence((seed, 0x7A)))
    eng = engine.make_dl_engine(geo, rng_ch)
    n_slots, refresh = _slot_plan(cfg)
    n_ues = geo.n_ues
    full_buffer = isinstance(cfg.traffic, FullBuffer)

    arms = {"baseline": _ArmState(n_ues, full_buffer)}
    if want_relay:
        arms["diversity"] = _ArmState(n_ues, full_buffer)

    events = [] if full_buffer else ftp3_arrivals(
        cfg.traffic, n_ues, cfg.sim_duration_s, rng_tr)
    ev_i = 0

    rates = {}
    choice_rel = np.zeros(n_ues, dtype=bool)
    rel_slots = 0
    cells = [c for c in range(geo.n_cells) if len(geo.ue_of_cell[c])]
    slot_bytes = cfg.slot_s / 8.0

    for slot in range(n_slots):
        if slot % refresh == 0:
            tab = eng.refresh(slot // refresh, want_relay)
            rates["baseline"] = tab["direct"]
            if want_relay:
                # dynamic per-subband path selection (ties -> direct)
                sel = tab["relayed"] > tab["direct"]
                rates["diversity"] = np.where(sel, tab["relayed"],
                                              tab["direct"])
                choice_rel = sel.any(axis=1)
        t_end = (slot + 1) * cfg.slot_s
        while ev_i < len(events) and events[ev_i].t_arrival_s <= slot * cfg.slot_s:
            for arm in arms.values():
                arm.admit(events[ev_i])
            ev_i += 1
        rel_slots += int(choice_rel.sum())

        if full_buffer and want_relay:
            # shared allocation: schedule on the baseline arm's rates, serve
            # both arms under identical assignments so the per-UE dominance
            # of max(direct, relayed) over direct is exact.
            share_arms = [("baseline", rates["baseline"]),
                          ("diversity", rates["diversity"])]
            for c in cells:
                ues = geo.ue_of_cell[c]
                base = arms["baseline"]
                alloc = pf_schedule(rates["baseline"][ues], base.sched.avg_bps[ues],
                                    base.backlogged()[ues])
                for name, tab_a in share_arms:
                    arm = arms[name]
                    served = np.zeros(n_ues)
                    for s, j in enumerate(alloc):
                        if j >= 0:
                            u = ues[j]
                            arm.serve(u, tab_a[u, s] * slot_bytes, t_end)
                            served[u] += tab_a[u, s]
                    arm.sched.update(served)
                    arm.busy_res += int(np.sum(alloc >= 0))
                    arm.total_res += alloc.size
            continue

        for name, arm in arms.items():
            tab_a = rates[name]
            back = arm.backlogged()
            served = np.zeros(n_ues)
            for c in cells:
                ues = geo.ue_of_cell[c]
                alloc = pf_schedule(tab_a[ues], arm.sched.avg_bps[ues],
                                    back[ues])
                for s, j in enumerate(alloc):
                    if j >= 0:
                        u = ues[j]
                        arm.serve(u, tab_a[u, s] * slot_bytes, t_end)
                        served[u] += tab_a[u, s]
                arm.busy_res += int(np.sum(alloc >= 0))
                arm.total_res += alloc.size
            arm.sched.update(served)

    out = {}
    for name, arm in arms.items():
        if full_buffer:
            arm.finish_full_buffer(n_slots * cfg.slot_s)
        ru = arm.busy_res / arm.total_res if arm.total_res else 0.0
        share = rel_slots / (n_slots * n_ues) if name == "diversity" else 0.0
        out[name] = DropStats(tuple(arm.records), ru, arm.served_bytes.copy(),
                              share)
    return out


def _run_ul(cfg: ScenarioConfig, geo: engine.DropGeometry, seed: int) -> dict:
    rng_ch = np.random.default_rng(np.random.SeedSequence((seed, 0xC5)))
    rng_tr = np.random.default_rng(np.random.SeedSequence((seed, 0x7A)))
    eng = engine.make_ul_engine(geo, rng_ch)
    n_slots, refresh = _slot_plan(cfg)
    n_ues = geo.n_ues
    full_buffer = isinstance(cfg.traffic, FullBuffer)

    arm_names = ("legacy_2ca", "collab")
    arms = {a: _ArmState(n_ues, full_buffer) for a in arm_names}
    events = [] if full_buffer else ftp3_arrivals(
        cfg.traffic, n_ues, cfg.sim_duration_s, rng_tr)
    ev_i = 0
    cells = [c for c in range(geo.n_cells) if len(geo.ue_of_cell[c])]
    slot_bytes = cfg.slot_s / 8.0
    rates = {}

    for slot in range(n_slots):
        if slot % refresh == 0:
            rates = eng.refresh(slot // refresh)
        t_end = (slot + 1) * cfg.slot_s
        while ev_i < len(events) and events[ev_i].t_arrival_s <= slot * cfg.slot_s:
            for arm in arms.values():
                arm.admit(events[ev_i])
            ev_i += 1

        for name, arm in arms.items():
            back = arm.backlogged()
            served = np.zeros(n_ues)
            for band in (0, 1):
                tab = rates[name][band]
                for c in cells:
                    ues = geo.ue_of_cell[c]
                    alloc = pf_schedule(tab[ues], arm.sched.avg_bps[ues],
                                        back[ues])
                    for s, j in enumerate(alloc):
                        if j >= 0:
                            u = ues[j]
                            arm.serve(u, tab[u, s] * slot_bytes, t_end)
                            served[u] += tab[u, s]
                    arm.busy_res += int(np.sum(alloc >= 0))
                    arm.total_res += alloc.size
            arm.sched.update(served)

    out = {}
    weak_share = float(np.mean(eng.weak))
    for name, arm in arms.items():
        if full_buffer:
            arm.finish_full_buffer(n_slots * cfg.slot_s)
        ru = arm.busy_res / arm.total_res if arm.total_res else 0.0
        share = weak_share if name == "collab" else 0.0
        out[name] = DropStats(tuple(arm.records), ru, arm.served_bytes.copy(),
                              share)
    return out


def run_drop(cfg: ScenarioConfig, seed: int) -> dict:
    """Simulate one drop; returns {arm_name: DropStats}."""
    geo = engine.build_drop_geometry(cfg, seed)
    if cfg.case in (Case.BASELINE, Case.DIVERSITY):
        return _run_dl(cfg, geo, seed, want_relay=cfg.case is Case.DIVERSITY)
    if cfg.case is Case.RANK_AUG:
        return _run_ul(cfg, geo, seed)
    raise ConfigurationError(f"case {cfg.case} has no drop program")


# ---------------------------------------------------------------------------
# offered-load calibration
# ---------------------------------------------------------------------------

def measure_ru(cfg: ScenarioConfig, seeds) -> float:
    """Mean resource utilization of the reference arm across seeds."""
    ref = "baseline" if cfg.case in (Case.BASELINE, Case.DIVERSITY) \
        else "legacy_2ca"
    vals = [run_drop(cfg, s)[ref].resource_utilization for s in seeds]
    return float(np.mean(vals))


def calibrate_load(cfg: ScenarioConfig, target_ru: float, tol: float = 0.02,
                   seeds=(0, 1, 2), max_iter: int = 12,
                   lam_init: float = 0.25) -> tuple:
    """Bisection on the per-user file arrival rate to hit a target RU.

    Returns (lambda_per_s, achieved_ru).  Raises CalibrationError when the
    target cannot be bracketed.
    """
    if not isinstance(cfg.traffic, Ftp3):
        raise ConfigurationError("load calibration requires FTP traffic")
    if not 0.0 < target_ru < 1.0:
        raise ConfigurationError("target RU must lie in (0, 1)")

    def probe(lam):
        c = cfg.replace(traffic=Ftp3(cfg.traffic.file_bytes, lam))
        return measure_ru(c, seeds)

    lo, hi = 0.0, lam_init
    ru_hi = probe(hi)
    expansions = 0
    while ru_hi < target_ru:
        lo, hi = hi, hi * 2.0
        ru_hi = probe(hi)
        expansions += 1
        if expansions > 8:
            raise CalibrationError(
                f"RU saturates at {ru_hi:.3f} < target {target_ru:.3f}")
    lam, ru = hi, ru_hi
    for _ in range(max_iter):
        if abs(ru - target_ru) <= tol:
            return lam, ru
        mid = 0.5 * (lo + hi)
        ru = probe(mid)
        if ru < target_ru:
            lo = mid
        else:
            hi = mid
        lam = mid
    if abs(ru - target_ru) <= tol:
        return lam, ru
    raise CalibrationError(
        f"calibration did not converge: RU {ru:.3f} vs target {target_ru:.3f}")
