"""Command-line front end: config parsing, experiment driver, summaries.

Config files are plain ``key = value`` lines (``#`` comments allowed).
Outputs are byte-deterministic for a given plan.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import localization, simloop
from .errors import ConfigurationError
from .scenario import Case, Ftp3, FullBuffer, ScenarioConfig

_CASE_NAMES = {c.value: c for c in Case}

# config-file key -> ScenarioConfig attribute (same parse type as the field)
_KEYS = {
    "isd_m": ("isd", float),
    "num_rings": ("num_rings", int),
    "ues_per_cell": ("ues_per_cell", int),
    "f_low_ghz": ("f_low_ghz", float),
    "f_high_ghz": ("f_high_ghz", float),
    "bandwidth_mhz": ("bandwidth_mhz", float),
    "scs_khz": ("scs_khz", float),
    "bs_ports": ("bs_ports", int),
    "helper_distance_m": ("helper_distance_m", float),
    "ue_max_tx_dbm": ("ue_max_tx_dbm", float),
    "relay_max_tx_dbm": ("relay_max_tx_dbm", float),
    "bs_tx_dbm": ("bs_tx_dbm", float),
    "sim_duration_s": ("sim_duration_s", float),
    "channel_update_slots": ("channel_update_slots", int),
    "max_interferers": ("max_interferers", int),
    "semistatic_threshold_db": ("semistatic_threshold_db", float),
    "helper_rx_antennas": ("helper_rx_antennas", int),
    "relay_streams": ("relay_streams", int),
    "fh_activity": ("fh_activity", float),
    "loc_users": ("loc_users", int),
    "loc_snr_db": ("loc_snr_db", float),
    "loc_method": ("loc_method", str),
    "range_sigma_m": ("range_sigma_m", float),
    "seed": ("seed", int),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYS.items()}


@dataclass(frozen=True)
class ExperimentPlan:
    """One experiment: a scenario, the cases to run, and the seed list."""
    scenario: ScenarioConfig
    cases: tuple = (Case.BASELINE,)
    seeds: tuple = (0,)
    out_dir: str = "results"

    def __post_init__(self):
        if len(self.cases) < 1 or len(self.seeds) < 1:
            raise ConfigurationError("plan needs >= 1 case and >= 1 seed")


def parse_cases(spec: str) -> tuple:
    cases = []
    for name in spec.split(","):
        name = name.strip()
        if name not in _CASE_NAMES:
            raise ConfigurationError(f"unknown case {name!r}")
        cases.append(_CASE_NAMES[name])
    return tuple(cases)


def parse_config(path: str) -> ExperimentPlan:
    """Read a key=value config file into an ExperimentPlan.

    Unknown keys are rejected by name with their line number; invalid
    values are reported against the config key, not the internal field.
    """
    values: dict = {}
    cases, seeds = None, None
    traffic_kind, file_bytes, lam = None, None, None
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected key = value")
            key, val = (t.strip() for t in line.split("=", 1))
            try:
                if key == "case":
                    cases = parse_cases(val)
                elif key == "seeds":
                    seeds = tuple(int(t) for t in val.split(","))
                elif key == "traffic":
                    if val not in ("full_buffer", "ftp3"):
                        raise ConfigurationError(
                            "traffic must be full_buffer or ftp3")
                    traffic_kind = val
                elif key == "ftp3_file_bytes":
                    file_bytes = int(val)
                elif key == "ftp3_lambda_per_s":
                    lam = float(val)
                elif key in _KEYS:
                    attr, conv = _KEYS[key]
                    values[attr] = conv(val)
                else:
                    raise ConfigurationError(f"unknown config key {key!r}")
            except ConfigurationError as exc:
                raise ConfigurationError(f"{path}:{ln}: {exc}") from None
            except ValueError:
                raise ConfigurationError(
                    f"{path}:{ln}: bad value for {key}: {val!r}") from None
    if traffic_kind == "ftp3":
        values["traffic"] = Ftp3(file_bytes or 500_000, lam or 0.5)
    elif traffic_kind == "full_buffer":
        values["traffic"] = FullBuffer()
    try:
        cfg = ScenarioConfig(**values)
    except ConfigurationError as exc:
        msg = str(exc)
        for attr, key in _ATTR_TO_KEY.items():
            msg = msg.replace(attr, key)
        raise ConfigurationError(f"{path}: {msg}") from None
    return ExperimentPlan(cfg, cases or (Case.BASELINE,), seeds or (0,))


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

# reference ("baseline") arm per case; the other arm is the treatment
_ARM_PAIRS = {
    Case.DIVERSITY: ("baseline", "diversity"),
    Case.RANK_AUG: ("legacy_2ca", "collab"),
}


def _write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summarize(per_arm_records: dict) -> dict:
    """UPT summary per arm plus treatment-vs-baseline percentage gains.

    The first entry is the baseline arm; raises when no pair is present.
    """
    if len(per_arm_records) < 2:
        raise ConfigurationError(
            "summary needs a baseline arm and a treatment arm")
    out = {arm: simloop.upt_stats(recs)
           for arm, recs in per_arm_records.items()}
    ref, new = list(per_arm_records)[:2]
    for metric, key in (("p5_bps", "gain_cell_edge_pct"),
                        ("mean_bps", "gain_mean_pct")):
        base = out[ref][metric]
        out[key] = (100.0 * (out[new][metric] - base) / base
                    if base > 0 else math.inf)
    return out


def _run_loc_case(cfg: ScenarioConfig, seeds, rows: list) -> dict:
    errs, perrs = [], []
    for seed in seeds:
        for r in localization.run_loc_experiment(cfg, seed):
            rows.append([r.user, r.case, f"{r.true_az:.6f}",
                         f"{r.true_el:.6f}", f"{r.est_az:.6f}",
                         f"{r.est_el:.6f}", f"{r.aoa_err_deg:.6f}",
                         f"{r.pos_err_m:.6f}", int(r.indoor)])
            errs.append(r.aoa_err_deg)
            perrs.append(r.pos_err_m)
    return {"median_aoa_error_deg": float(np.median(errs)),
            "median_pos_error_m": float(np.median(perrs)),
            "n_trials": len(errs)}


def run_experiment(plan: ExperimentPlan) -> dict:
    """Run every (case, seed) cell; write records.csv / loc_results.csv /
    summary.json under the plan's output directory.  Returns the summary."""
    try:
        os.makedirs(plan.out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output dir {plan.out_dir!r}: {exc}")

    summary: dict = {"seeds": list(plan.seeds),
                     "cases": [c.value for c in plan.cases]}
    rec_rows: list = []
    loc_rows: list = []
    for case in plan.cases:
        cfg = replace(plan.scenario, case=case)
        if case.value.startswith("loc"):
            summary[case.value] = _run_loc_case(cfg, plan.seeds, loc_rows)
            continue
        arm_names = _ARM_PAIRS.get(case, ("baseline",))
        per_arm = {a: [] for a in arm_names}
        ru = {a: [] for a in arm_names}
        for seed in plan.seeds:
            stats = simloop.run_drop(cfg, seed)
            for a in arm_names:
                per_arm[a].extend((seed, r) for r in stats[a].records)
                ru[a].append(stats[a].resource_utilization)
        for a in arm_names:
            for seed, r in per_arm[a]:
                tput = r.throughput_bps
                rec_rows.append([case.value, a, seed, r.ue,
                                 f"{r.t_arrival_s:.6f}",
                                 f"{r.t_complete_s:.6f}", r.size_bytes,
                                 f"{tput:.3f}" if math.isfinite(tput)
                                 else "inf"])
        if len(arm_names) == 2:
            cs = summarize({a: [r for _, r in per_arm[a]] for a in arm_names})
        else:
            cs = {arm_names[0]: simloop.upt_stats(
                [r for _, r in per_arm[arm_names[0]]])}
        for a in arm_names:
            cs[a]["mean_ru"] = float(np.mean(ru[a])) if ru[a] else 0.0
        summary[case.value] = cs

    if rec_rows:
        with open(os.path.join(plan.out_dir, "records.csv"), "w",
                  newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "arm", "seed", "ue", "t_arrival_s",
                        "t_complete_s", "size_bytes", "throughput_bps"])
            w.writerows(rec_rows)
    if loc_rows:
        with open(os.path.join(plan.out_dir, "loc_results.csv"), "w",
                  newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "case", "true_az", "true_el", "est_az",
                        "est_el", "aoa_err_deg", "pos_err_m", "indoor"])
            w.writerows(loc_rows)
    _write_json(os.path.join(plan.out_dir, "summary.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="devmimo",
        description="Device-collaboration cellular system simulator")
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--case", help="case name(s), comma separated "
                    f"(choices: {', '.join(sorted(_CASE_NAMES))})")
    ap.add_argument("--seeds", default=None,
                    help="comma-separated drop seeds (default: 0)")
    ap.add_argument("--out", default="results",
                    help="output directory (default: results)")
    ap.add_argument("--threads", type=int, default=1,
                    help="numpy thread hint (informational)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            plan = parse_config(args.config)
        else:
            plan = ExperimentPlan(ScenarioConfig())
        if args.case:
            plan = replace(plan, cases=parse_cases(args.case))
        if args.seeds is not None:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
            if not seeds:
                raise ConfigurationError("no seeds given")
            plan = replace(plan, seeds=seeds)
        plan = replace(plan, out_dir=args.out)
        summary = run_experiment(plan)
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
