"""System simulator for device-collaboration cellular links.

A primary handheld device recruits nearby companion devices over a short
local link; the package quantifies the resulting downlink diversity,
uplink rank, and positioning improvements against legacy single-device
operation in a multi-cell deployment.
"""

from .channel import (LargeScale, friis_db, los_probability, o2i_penetration,
                      o2i_wall_loss_db, pathloss)
from .collab import (PathChoice, RelayChain, compose_af_link, diversity_select,
                     relay_gain, relay_rx_beamformer, stack_rx, stack_tx)
from .errors import (CalibrationError, ConfigurationError, EstimationError,
                     RankDeficiencyError)
from .localization import (build_virtual_array, localize, noncoherent_aoa,
                           run_loc_experiment, steering_vector)
from .phy import (effective_se, link_report, mmse_irc_combine, select_rank,
                  sinr_to_se, svd_precoder, type2_like_precoder)
from .scenario import (Case, CollaborationGroup, DeviceNode, Ftp3, FullBuffer,
                       ScenarioConfig, SiteLayout, build_hex_layout, drop_ues,
                       wraparound_vector)
from .simloop import (DropStats, ThroughputRecord, calibrate_load,
                      ftp3_arrivals, pf_schedule, run_drop, upt_stats)

__all__ = [
    "CalibrationError", "Case", "CollaborationGroup", "ConfigurationError",
    "DeviceNode", "DropStats", "EstimationError", "Ftp3", "FullBuffer",
    "LargeScale", "PathChoice", "RankDeficiencyError", "RelayChain",
    "ScenarioConfig", "SiteLayout", "ThroughputRecord", "build_hex_layout",
    "build_virtual_array", "calibrate_load", "compose_af_link",
    "diversity_select", "drop_ues", "effective_se", "friis_db",
    "ftp3_arrivals", "link_report", "localize", "los_probability",
    "mmse_irc_combine", "noncoherent_aoa", "o2i_penetration",
    "o2i_wall_loss_db", "pathloss", "pf_schedule", "relay_gain",
    "relay_rx_beamformer", "run_drop", "run_loc_experiment", "select_rank",
    "sinr_to_se", "stack_rx", "stack_tx", "steering_vector", "svd_precoder",
    "type2_like_precoder", "upt_stats", "wraparound_vector",
]

__version__ = "0.1.0"
