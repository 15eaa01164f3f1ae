"""Combining per-row Gaussian subset posteriors into full-data marginals.

Two combination rules live here.  The staged-pipeline rule removes the
multiply-counted propagated posterior before summing precisions, repairing
indefinite differences by eigenvalue correction.  The independent-subsets
rule multiplies all subset Gaussians and divides away the multiply-counted
prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .approx import RowPosterior
from .errors import NumericalError, ValidationError

logger = logging.getLogger(__name__)

# Relative scale of the "small constant" added on top of |lambda_min| when
# repairing an indefinite matrix inside aggregation.
EV_EPS_SCALE = 1e-6


def is_spd(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass
class AggregationInput:
    """Per-row inputs: the first-stage posterior plus the later-stage
    posteriors that were each conditioned on the first one's data."""

    stage1: RowPosterior
    others: list[RowPosterior] = field(default_factory=list)

    def __post_init__(self):
        k = self.stage1.k
        if any(p.k != k for p in self.others):
            raise ValidationError("aggregation inputs must share dimension K")

    @property
    def n_subsets(self) -> int:
        return 1 + len(self.others)


@dataclass
class CorrectionEvent:
    """Log record for one eigenvalue repair during aggregation."""

    where: str
    shift: float


def gaussian_product(posteriors: list[RowPosterior]) -> RowPosterior:
    """Product of Gaussian densities: precisions add, means are
    precision-weighted."""
    if not posteriors:
        raise ValidationError("need at least one posterior")
    k = posteriors[0].k
    if any(p.k != k for p in posteriors):
        raise ValidationError("posteriors must share dimension K")
    precision = np.zeros((k, k))
    weighted = np.zeros(k)
    for p in posteriors:
        precision += p.precision
        weighted += p.precision @ p.mean
    return RowPosterior(np.linalg.solve(precision, weighted), precision)


def eigenvalue_correction(mat: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Make a symmetric matrix positive definite.

    Already-SPD input is returned unchanged; otherwise
    ``|lambda_min| + eps`` is added to every diagonal element.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError("expected a square matrix")
    scale = max(float(np.abs(mat).max()), 1.0)
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-10 * scale):
        raise ValidationError("matrix is not symmetric")
    if eps <= 0:
        raise ValidationError("eps must be positive")
    if is_spd(mat):
        return mat
    lam_min = float(np.linalg.eigvalsh(mat)[0])
    return mat + (abs(lam_min) + eps) * np.eye(mat.shape[0])


def pp_aggregate_row(agg_input: AggregationInput, eps_scale: float = EV_EPS_SCALE,
                     events: list[CorrectionEvent] | None = None) -> RowPosterior:
    """Aggregate one row's staged subset posteriors.

    For every later-stage posterior j, the first-stage precision is
    subtracted; an indefinite difference is eigenvalue-corrected before the
    first-stage precision is added back.  Then

        precision* = (2 - J) L1 + sum_j Lj*
        mean*      = inv(precision*) ((2 - J) L1 m1 + sum_j Lj* mj)

    with J the total number of subsets.  If the final precision is still
    indefinite it is eigenvalue-corrected once more (logged).
    """
    stage1 = agg_input.stage1
    k = stage1.k
    n_subsets = agg_input.n_subsets
    if n_subsets == 1:
        return stage1
    eps = eps_scale * max(float(np.trace(stage1.precision)) / k, np.finfo(float).tiny)

    precision = (2.0 - n_subsets) * stage1.precision
    weighted = (2.0 - n_subsets) * (stage1.precision @ stage1.mean)
    for j, other in enumerate(agg_input.others, start=2):
        diff = other.precision - stage1.precision
        if is_spd(diff):
            prec_j = other.precision
        else:
            corrected = eigenvalue_correction(0.5 * (diff + diff.T), eps)
            shift = float(corrected[0, 0] - diff[0, 0])
            prec_j = corrected + stage1.precision
            if events is not None:
                events.append(CorrectionEvent(f"subset {j}", shift))
            logger.debug("eigenvalue-corrected subset %d difference (shift %.3e)", j, shift)
        precision += prec_j
        weighted += prec_j @ other.mean

    precision = 0.5 * (precision + precision.T)
    if not is_spd(precision):
        corrected = eigenvalue_correction(precision, eps)
        shift = float(corrected[0, 0] - precision[0, 0])
        precision = corrected
        if events is not None:
            events.append(CorrectionEvent("final", shift))
        logger.warning("aggregated precision eigenvalue-corrected (shift %.3e)", shift)
    result_mean = np.linalg.solve(precision, weighted)
    if not np.all(np.isfinite(result_mean)):
        raise NumericalError("aggregation produced non-finite mean")
    return RowPosterior(result_mean, precision)


def ep_parametric_aggregate(subset_posteriors: list[RowPosterior], prior: RowPosterior,
                            n_subsets: int, eps_scale: float = EV_EPS_SCALE,
                            events: list[CorrectionEvent] | None = None) -> RowPosterior:
    """Multiply independent subset posteriors, dividing away the J-1
    multiply-counted copies of the prior.

        precision* = sum_j Lj - (J - 1) L_prior
        mean*      = inv(precision*) (sum_j Lj mj - (J - 1) L_prior m_prior)
    """
    if not subset_posteriors:
        raise ValidationError("need at least one subset posterior")
    if n_subsets != len(subset_posteriors):
        raise ValidationError("n_subsets must equal the number of subset posteriors")
    k = subset_posteriors[0].k
    if prior.k != k or any(p.k != k for p in subset_posteriors):
        raise ValidationError("posteriors and prior must share dimension K")

    precision = -(n_subsets - 1.0) * prior.precision
    weighted = -(n_subsets - 1.0) * (prior.precision @ prior.mean)
    for p in subset_posteriors:
        precision += p.precision
        weighted += p.precision @ p.mean
    precision = 0.5 * (precision + precision.T)
    if not is_spd(precision):
        eps = eps_scale * max(float(np.trace(subset_posteriors[0].precision)) / k,
                              np.finfo(float).tiny)
        corrected = eigenvalue_correction(precision, eps)
        shift = float(corrected[0, 0] - precision[0, 0])
        precision = corrected
        if events is not None:
            events.append(CorrectionEvent("ep final", shift))
        logger.debug("independent-subset aggregate eigenvalue-corrected (shift %.3e)", shift)
    result_mean = np.linalg.solve(precision, weighted)
    if not np.all(np.isfinite(result_mean)):
        raise NumericalError("aggregation produced non-finite mean")
    return RowPosterior(result_mean, precision)
