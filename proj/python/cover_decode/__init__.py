"""Cluster-conditional conformal decoding over autoregressive token scores.

Documents (traces, calibrations, reports) are plain dicts with the same
schema the cover-decode tool reads and writes.
"""

import json

from . import _core
from ._core import (
    CapacityError,
    CoverError,
    InfeasibleError,
    ValidationError,
    beta_quantile,
    empirical_bernstein,
    hoeffding_upper,
    quantile,
    split_cp_threshold,
)

__all__ = [
    "CapacityError",
    "CoverError",
    "InfeasibleError",
    "ValidationError",
    "beta_quantile",
    "bounds",
    "calibrate",
    "dcbs_calibrate",
    "empirical_bernstein",
    "evaluate",
    "hoeffding_upper",
    "longtail_model",
    "quantile",
    "run_experiment",
    "simulate",
    "split_cp_threshold",
]


def _dump(doc):
    return doc if isinstance(doc, str) else json.dumps(doc)


def simulate(config, n, seed=0, threads=1):
    """Sample n traces from the long-tail toy model described by config."""
    return json.loads(_core.simulate(_dump(config), n, seed, threads))


def longtail_model(config):
    return json.loads(_core.longtail_model(_dump(config)))


def calibrate(traces, **options):
    """Cluster-step thresholds; options mirror `cover-decode calibrate` (lambda is lambda_)."""
    if "lambda" in options:
        options["lambda_"] = options.pop("lambda")
    return json.loads(_core.calibrate(_dump(traces), **options))


def dcbs_calibrate(traces, alpha=0.1, max_len=0):
    return json.loads(_core.dcbs_calibrate(_dump(traces), alpha, max_len))


def evaluate(calibration, traces, tail_tokens=(), ar_model=None):
    out = _core.evaluate(_dump(calibration), _dump(traces), set(tail_tokens),
                         "" if ar_model is None else _dump(ar_model))
    return json.loads(out)


def run_experiment(config):
    return json.loads(_core.run_experiment(_dump(config)))


def bounds(calibration, traces, delta=0.05, zeta=0.05, variant="main", zeta_denominator="pair"):
    return json.loads(_core.bounds(_dump(calibration), _dump(traces), delta, zeta, variant, zeta_denominator))
