"""Exact negative log-likelihoods, recorded on a tape.

All losses are sums over the batch (not means).  Logarithms are taken of
``max(arg, LOG_FLOOR)``; the number of terms where the floor binds is
reported rather than raised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .model import NfgModel, VariantError

LOG_FLOOR = 1e-10


@dataclass
class SurvivalBatch:
    covariates: np.ndarray
    times: np.ndarray
    events: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, idx=None) -> "SurvivalBatch":
        if idx is None:
            return cls(dataset.covariates, dataset.times, dataset.events)
        return cls(dataset.covariates[idx], dataset.times[idx], dataset.events[idx])

    def __len__(self):
        return self.times.shape[0]


@dataclass
class LossBreakdown:
    total: Var
    event_term: Var
    censor_term: Var
    count_events: int
    count_censored: int
    floored: int = 0

    @property
    def total_nll(self) -> float:
        return float(self.total.value)

    def as_record(self) -> dict:
        return {"total_nll": self.total_nll, "event_term": float(self.event_term.value),
                "censor_term": float(self.censor_term.value), "count_events": self.count_events,
                "count_censored": self.count_censored, "floored": self.floored}


def _floored_log_sum(tape: Tape, x: Var) -> tuple[Var, int]:
    if x.value.size == 0:
        return tape.constant(0.0), 0
    floored = int(np.sum(x.value < LOG_FLOOR))
    return tape.clamp_min(x, LOG_FLOOR).log().sum(), floored


def _selected(tape: Tape, matrix: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
    return tape.index(matrix, (rows, cols))


def competing_nll(tape: Tape, model: NfgModel, batch: SurvivalBatch, *, training: bool = False,
                  rng=None) -> LossBreakdown:
    """``-sum log dF_{d_i}/dt (t_i) - sum_{censored} log(1 - sum_r F_r(t_i))``."""
    if model.variant == "cause_specific":
        raise VariantError("competing_nll needs a model with CIF outputs")
    out = model.forward(tape, batch.covariates, batch.times, training=training, rng=rng)
    events = np.asarray(batch.events)
    ev_rows = np.flatnonzero(events > 0)
    cen_rows = np.flatnonzero(events == 0)

    density = tape.tangent_of(out.cif)
    ev_log, f1 = _floored_log_sum(tape, _selected(tape, density, ev_rows, events[ev_rows] - 1))
    survival = 1.0 - out.cif.sum(axis=1)
    cen_log, f2 = _floored_log_sum(tape, tape.index(survival, cen_rows))
    event_term, censor_term = -ev_log, -cen_log
    return LossBreakdown(event_term + censor_term, event_term, censor_term,
                         len(ev_rows), len(cen_rows), f1 + f2)


def _hazard_nll(tape: Tape, hazard: Var, events: np.ndarray, risks: list[int]) -> LossBreakdown:
    """``sum_r [-sum_{d_i=r} log lambda_r(t_i) + sum_i Lambda_r(t_i)]`` over ``risks``."""
    rate = tape.tangent_of(hazard)
    ev_rows = np.flatnonzero(np.isin(events, risks))
    cols = np.array([risks.index(e) for e in events[ev_rows]], dtype=np.int64)
    ev_log, floored = _floored_log_sum(tape, _selected(tape, rate, ev_rows, cols))
    event_term = -ev_log
    # every patient contributes its cumulative hazard, i.e. plays the censored role
    censor_term = hazard.sum()
    return LossBreakdown(event_term + censor_term, event_term, censor_term,
                         len(ev_rows), len(events) - len(ev_rows), floored)


def single_risk_nll(tape: Tape, model: NfgModel, batch: SurvivalBatch, *, training: bool = False,
                    rng=None) -> LossBreakdown:
    """Single-risk likelihood with any nonzero event label counted as the event."""
    if model.n_risks != 1:
        raise ValueError(f"single_risk_nll needs a one-risk model, got {model.n_risks} risks")
    out = model.forward(tape, batch.covariates, batch.times, training=training, rng=rng)
    events = (np.asarray(batch.events) != 0).astype(np.int64)
    return _hazard_nll(tape, out.cumulative_hazard, events, [1])


def cause_specific_nll(tape: Tape, model: NfgModel, batch: SurvivalBatch, *,
                       training: bool = False, rng=None) -> LossBreakdown:
    """Sum of per-risk likelihoods, each treating other outcomes as censored."""
    if model.variant != "cause_specific":
        raise VariantError(f"cause_specific_nll needs the cause_specific variant, not {model.variant}")
    out = model.forward(tape, batch.covariates, batch.times, training=training, rng=rng)
    risks = list(range(1, model.n_risks + 1))
    return _hazard_nll(tape, out.cumulative_hazard, np.asarray(batch.events), risks)


def objective_for(model: NfgModel):
    return cause_specific_nll if model.variant == "cause_specific" else competing_nll


def evaluate_nll(model: NfgModel, batch: SurvivalBatch) -> LossBreakdown:
    """Inference-mode loss of the variant's own objective (no gradient use)."""
    return objective_for(model)(Tape(), model, batch)
