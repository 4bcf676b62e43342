"""Three-track TDMR detection on a granular medium surrogate.

Local-area-influence-probabilistic (LAIP) detection, 2D/1D-PR BCJR with
a-priori feedback from an IRA decoder, and 1D/2D pattern-dependent
noise-prediction (PDNP) baselines.
"""

from .archive import Archive, load_archive, save_archive
from .harness import (ExperimentResult, TrainingProfile, ber_estimate, compare_detectors, rate_search,
                      run_experiment, sign_test, train_detectors, user_bits_per_grain)
from .media import FlipModel, MediaGeometry, generate_medium, read_block, write_block
from .pipeline import Detectors, PipelineConfig, make_strip, run

__version__ = "0.1.0"

__all__ = [
    "Archive", "Detectors", "ExperimentResult", "FlipModel", "MediaGeometry", "PipelineConfig",
    "TrainingProfile", "ber_estimate", "compare_detectors", "generate_medium", "load_archive",
    "make_strip", "rate_search", "read_block", "run", "run_experiment", "save_archive", "sign_test",
    "train_detectors", "user_bits_per_grain", "write_block",
]
