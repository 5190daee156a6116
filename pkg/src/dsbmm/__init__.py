"""Dynamic stochastic block models for multi-layer networks.

Bayesian inference by Gibbs sampling with Polya-Gamma augmentation for the
membership transition model and an optional group-shrinkage prior that
selects which layers drive each other's block dynamics.
"""
__version__ = "0.1.0"

from .dgp import PRESETS, GeneratorConfig, GroundTruth, build_preset, build_trade, simulate, true_gbc
from .emission import ConnectivityParams, PriorConfig
from .errors import DSBMMError
from .gibbs import FitConfig, resume, run
from .graph import (
    LayerSpec,
    MembershipState,
    MultiLayerPanel,
    load_panel,
    load_panel_dir,
    save_panel,
    validate_panel,
)
from .metrics import (
    EvaluationReport,
    align_labels,
    cic,
    diagnostics,
    evaluate,
    gbc,
    global_ari,
    map_membership,
    mse,
)
from .rand import RngStream
from .store import ChainStore
from .transition import DesignLayout, ShrinkageState, TransitionParams, transition_table_to_kappa

__all__ = [
    "PRESETS", "GeneratorConfig", "GroundTruth", "build_preset", "build_trade", "simulate", "true_gbc",
    "ConnectivityParams", "PriorConfig", "DSBMMError", "FitConfig", "resume", "run",
    "LayerSpec", "MembershipState", "MultiLayerPanel", "load_panel", "load_panel_dir", "save_panel",
    "validate_panel", "EvaluationReport", "align_labels", "cic", "diagnostics", "evaluate", "gbc",
    "global_ari", "map_membership", "mse", "RngStream", "ChainStore", "DesignLayout",
    "ShrinkageState", "TransitionParams", "transition_table_to_kappa",
]
