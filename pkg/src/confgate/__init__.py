"""Conformal gating of response batches from Gram-matrix geometry.

Responses to a query are unit-norm embeddings; their Gram matrix yields an
interaction energy per response. Conformal calibration across exchangeable
batches turns those scores into a keep/drop threshold with a finite-sample
coverage guarantee, and a second calibration aligns a strictness knob with a
severity-based quality predicate.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .alignment import (
    AlignmentGate,
    BatchRecord,
    Deployment,
    Predicate,
    StrictnessProfile,
    align,
    calibrate_tau,
    cvar,
    cvar_gap_predicate,
    deploy,
    dropped_set,
    kept_set,
    median_gap_predicate,
    minimal_strictness,
    rescale_energy,
    threshold_predicate,
)
from .conformal import (
    CalibratedGate,
    ResidualBag,
    apply_gate,
    bbucp,
    bootstrap_batch,
    bucp,
    calibrate,
    full_ucp,
    full_ucp_pvalue,
    quantile,
    split_ucp,
)
from .dataset import Batch, BatchDataset
from .errors import ConfgateError
from .geometry import (
    atypical_score,
    batch_scores,
    gram,
    interaction_energy,
    loo_residuals,
    score_against_base,
    unit_normalize,
)
from .harness import GeneratorConfig, TrialReport, gen_batches, preset, simulate
from .io import RunConfig, load_gate, load_jsonl, save_gate

__all__ = [n for n in dir() if not n.startswith("_")]
