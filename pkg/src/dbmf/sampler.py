"""Gibbs sampler for Gaussian matrix factorization with normal-Wishart
hyperpriors.

The model: each observed entry y_nd ~ Normal(x_n' w_d, 1/tau) with row
vectors x_n, w_d of dimension K.  Row priors are either a shared Gaussian
whose (mean, precision) hyperparameters carry a normal-Wishart prior and are
resampled every sweep, or per-row Gaussians / Gaussian mixtures handed in
from an earlier inference stage.  Hyperparameters of a side are sampled only
when that side's prior is not handed in.

Within a sweep all rows of one side are conditionally independent given the
other side, so the implementation updates a full side with batched linear
algebra; ``sample_row_conditional`` is the single-row reference form of the
same conditional.
"""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass, replace

import numpy as np

from .approx import GmmPosterior, PosteriorSet
from .data import SparseMatrix
from .errors import ArtifactError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

# Relative diagonal jitter applied once when a conditional precision fails to
# factorize.
CHOL_JITTER = 1e-10

SHARED = "shared-hyper"
PROP_GAUSSIAN = "propagated-gaussian"
PROP_GMM = "propagated-gmm"


@dataclass
class NormalWishartPrior:
    """Conjugate prior over a side's Gaussian (mean, precision)."""

    mu0: np.ndarray
    beta0: float
    w0: np.ndarray
    nu0: float

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        k = self.mu0.size
        if self.w0.shape != (k, k):
            raise ValidationError("w0 shape does not match mu0")
        if self.beta0 <= 0:
            raise ValidationError("beta0 must be positive")
        if self.nu0 < k:
            raise ValidationError("nu0 must be >= K")
        try:
            np.linalg.cholesky(self.w0)
        except np.linalg.LinAlgError as exc:
            raise ValidationError("w0 must be symmetric positive definite") from exc

    @property
    def k(self) -> int:
        return self.mu0.size

    @classmethod
    def default(cls, n_factors: int) -> "NormalWishartPrior":
        return cls(np.zeros(n_factors), 2.0, np.eye(n_factors), float(n_factors))


@dataclass
class HyperState:
    """Current shared Gaussian prior parameters for both sides."""

    mu_x: np.ndarray
    lambda_x: np.ndarray
    mu_w: np.ndarray
    lambda_w: np.ndarray


@dataclass
class SidePrior:
    """Prior specification for one side (all rows of X, or all of W)."""

    mode: str
    posteriors: PosteriorSet | None = None

    def __post_init__(self):
        if self.mode not in (SHARED, PROP_GAUSSIAN, PROP_GMM):
            raise ValidationError(f"unknown prior mode: {self.mode!r}")
        if self.mode == SHARED and self.posteriors is not None:
            raise ValidationError("shared-hyper prior carries no row posteriors")
        if self.mode != SHARED and self.posteriors is None:
            raise ValidationError("propagated prior requires row posteriors")

    @classmethod
    def shared(cls) -> "SidePrior":
        return cls(SHARED)

    @classmethod
    def propagated(cls, posteriors: PosteriorSet) -> "SidePrior":
        mode = PROP_GAUSSIAN if posteriors.kind == "gaussian" else PROP_GMM
        return cls(mode, posteriors)


@dataclass
class RowPriorSet:
    """Priors for both sides of one sampler run."""

    x: SidePrior
    w: SidePrior

    @classmethod
    def shared(cls) -> "RowPriorSet":
        return cls(SidePrior.shared(), SidePrior.shared())


@dataclass
class GibbsConfig:
    """Sweep counts, thinning and RNG seed for one sampler run."""

    n_factors: int
    tau: float
    n_iters: int = 1200
    burn_in: int = 800
    thin: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_factors < 1:
            raise ValidationError("n_factors must be >= 1")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if not self.n_iters > self.burn_in >= 0:
            raise ValidationError("need n_iters > burn_in >= 0")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if (self.n_iters - self.burn_in) % self.thin:
            raise ValidationError("thin must divide n_iters - burn_in")

    @property
    def n_samples(self) -> int:
        return (self.n_iters - self.burn_in) // self.thin


@dataclass
class SampleChain:
    """Retained post-burn-in samples of one sampler run."""

    x_samples: np.ndarray      # (S, N, K)
    w_samples: np.ndarray      # (S, D, K)
    mu_x: np.ndarray           # (S, K)
    lambda_x: np.ndarray       # (S, K, K)
    mu_w: np.ndarray
    lambda_w: np.ndarray
    config: GibbsConfig

    @property
    def n_samples(self) -> int:
        return self.x_samples.shape[0]

    def hyper_state(self, index: int) -> HyperState:
        """Shared prior parameters retained at one chain position."""
        return HyperState(self.mu_x[index], self.lambda_x[index],
                          self.mu_w[index], self.lambda_w[index])

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                np.savez(fh, x_samples=self.x_samples, w_samples=self.w_samples,
                         mu_x=self.mu_x, lambda_x=self.lambda_x,
                         mu_w=self.mu_w, lambda_w=self.lambda_w,
                         config=np.array(json.dumps(self.config.__dict__)))
        except OSError as exc:
            raise ArtifactError(f"cannot write chain file {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SampleChain":
        try:
            with np.load(path) as npz:
                config = GibbsConfig(**json.loads(str(npz["config"])))
                return cls(npz["x_samples"], npz["w_samples"], npz["mu_x"],
                           npz["lambda_x"], npz["mu_w"], npz["lambda_w"], config)
        except FileNotFoundError as exc:
            raise ArtifactError(f"chain file not found: {path}") from exc
        except (zipfile.BadZipFile, OSError, KeyError, ValueError, EOFError) as exc:
            raise ArtifactError(f"corrupt chain file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Elementary conditionals
# ---------------------------------------------------------------------------

def _chol_with_jitter(mat: np.ndarray, context: str) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of one SPD matrix, with a single jittered retry."""
    try:
        return np.linalg.cholesky(mat), mat
    except np.linalg.LinAlgError:
        k = mat.shape[0]
        bump = CHOL_JITTER * max(np.trace(mat) / k, 1.0)
        jittered = mat + bump * np.eye(k)
        logger.warning("jittered diagonal by %.3e (%s)", bump, context)
        try:
            return np.linalg.cholesky(jittered), jittered
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Cholesky failed after jitter ({context})") from exc


def sample_row_conditional(y_vals: np.ndarray, partner_rows: np.ndarray, tau: float,
                           prior_mean: np.ndarray, prior_precision: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw one row from its Gaussian full conditional.

    With observed values y against partner rows w_d, the conditional is
    Normal(mu*, inv(L*)) with L* = prior_precision + tau * sum_d w_d w_d'
    and mu* = inv(L*) (prior_precision @ prior_mean + tau * sum_d y_d w_d).
    With no observations this is a draw from the prior itself.
    """
    y_vals = np.asarray(y_vals, dtype=np.float64)
    partner_rows = np.atleast_2d(np.asarray(partner_rows, dtype=np.float64))
    if y_vals.size == 0:
        partner_rows = partner_rows.reshape(0, prior_mean.size)
    precision = prior_precision + tau * partner_rows.T @ partner_rows
    b = prior_precision @ prior_mean + tau * partner_rows.T @ y_vals
    chol, precision = _chol_with_jitter(precision, "row conditional")
    mean = np.linalg.solve(precision, b)
    return mean + np.linalg.solve(chol.T, rng.standard_normal(prior_mean.size))


def _wishart_draw(rng: np.random.Generator, scale: np.ndarray, df: float) -> np.ndarray:
    """Wishart(scale, df) draw via the Bartlett decomposition (df > K - 1)."""
    k = scale.shape[0]
    chol = np.linalg.cholesky(scale)
    bart = np.zeros((k, k))
    bart[np.diag_indices(k)] = np.sqrt(rng.chisquare(df - np.arange(k)))
    if k > 1:
        bart[np.tril_indices(k, -1)] = rng.standard_normal(k * (k - 1) // 2)
    factor = chol @ bart
    return factor @ factor.T


def sample_hyper_normal_wishart(rows: np.ndarray, prior: NormalWishartPrior,
                                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw shared (mu, Lambda) given the side's current rows.

    Uses the centered scatter S = (1/N) sum (x_i - xbar)(x_i - xbar)' in the
    scale update:
        inv(W*) = inv(w0) + N S + (beta0 N / (beta0 + N)) (mu0 - xbar)(mu0 - xbar)'
    then Lambda ~ Wishart(W*, nu0 + N) and mu ~ Normal(mu*, inv((beta0 + N) Lambda))
    with mu* = (beta0 mu0 + N xbar) / (beta0 + N).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = rows.shape[0]
    if n < 1:
        raise ValidationError("need at least one row")
    xbar = rows.mean(axis=0)
    centered = rows - xbar
    scatter = centered.T @ centered / n
    beta_star = prior.beta0 + n
    mu_star = (prior.beta0 * prior.mu0 + n * xbar) / beta_star
    diff = prior.mu0 - xbar
    winv_star = (np.linalg.inv(prior.w0) + n * scatter
                 + (prior.beta0 * n / beta_star) * np.outer(diff, diff))
    winv_star = 0.5 * (winv_star + winv_star.T)
    try:
        w_star = np.linalg.inv(winv_star)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior Wishart scale not invertible") from exc
    w_star = 0.5 * (w_star + w_star.T)
    try:
        lam = _wishart_draw(rng, w_star, prior.nu0 + n)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior Wishart scale not positive definite") from exc
    chol, _ = _chol_with_jitter(beta_star * lam, "hyper mean draw")
    mu = mu_star + np.linalg.solve(chol.T, rng.standard_normal(prior.k))
    return mu, lam


def gmm_component_assign(row_value: np.ndarray, gmm: GmmPosterior) -> int:
    """Index of the mixture component with the highest responsibility
    (weight times Gaussian density) for the current row value; ties go to
    the lowest index."""
    x = np.asarray(row_value, dtype=np.float64)
    diffs = x[None, :] - gmm.means
    quad = np.einsum("ck,ckl,cl->c", diffs, gmm.precisions, diffs)
    _, logdet = np.linalg.slogdet(gmm.precisions)
    score = np.log(gmm.weights) + 0.5 * logdet - 0.5 * quad
    return int(np.argmax(score))


def log_likelihood(matrix: SparseMatrix, x: np.ndarray, w: np.ndarray,
                   tau: float) -> float:
    """Gaussian log-likelihood of the observed entries under factors (x, w)."""
    preds = np.einsum("mk,mk->m", x[matrix.rows], w[matrix.cols])
    resid = matrix.vals - preds
    return float(0.5 * matrix.m * np.log(tau / (2.0 * np.pi))
                 - 0.5 * tau * np.dot(resid, resid))


# ---------------------------------------------------------------------------
# Batched side updates
# ---------------------------------------------------------------------------

def _sorted_axis(matrix: SparseMatrix, axis: str):
    """Entries sorted by one axis: that axis's index per entry, the other
    axis's index, and the values."""
    if axis == "row":
        order = np.lexsort((matrix.cols, matrix.rows))
        major, minor = matrix.rows[order], matrix.cols[order]
    else:
        order = np.lexsort((matrix.rows, matrix.cols))
        major, minor = matrix.cols[order], matrix.rows[order]
    return major, minor, matrix.vals[order]


# Entries processed per chunk in a side update; bounds the transient
# gathered-partner buffer.
SIDE_CHUNK_ENTRIES = 1 << 22


def _suff_stats(partner, major, minor, vals, n):
    """Per-row sums of partner outer products (exploiting symmetry) and of
    value-weighted partners, accumulated per upper-triangle component with
    bincount; rows without entries get exact zeros."""
    k = partner.shape[1]
    triu_r, triu_c = np.triu_indices(k)
    suff = np.zeros((n, k, k))
    lin = np.zeros((n, k))
    for lo in range(0, max(major.size, 1), SIDE_CHUNK_ENTRIES):
        sl = slice(lo, lo + SIDE_CHUNK_ENTRIES)
        maj = major[sl]
        gathered = partner[minor[sl]]
        for a, b in zip(triu_r, triu_c):
            suff[:, a, b] += np.bincount(maj, weights=gathered[:, a] * gathered[:, b],
                                         minlength=n)
        for a in range(k):
            lin[:, a] += np.bincount(maj, weights=gathered[:, a] * vals[sl],
                                     minlength=n)
    lower = np.swapaxes(suff, 1, 2).copy()
    lower[:, np.arange(k), np.arange(k)] = 0.0
    return suff + lower, lin


def _batched_chol(precisions: np.ndarray, context: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked Cholesky with per-matrix jitter fallback on failure."""
    try:
        return np.linalg.cholesky(precisions), precisions
    except np.linalg.LinAlgError:
        precisions = precisions.copy()
        chols = np.empty_like(precisions)
        for i in range(precisions.shape[0]):
            chols[i], precisions[i] = _chol_with_jitter(precisions[i], f"{context}, row {i}")
        return chols, precisions


def _sample_side(rng, partner, major, minor, vals, n, tau, prior_precs, prior_b,
                 context):
    """Resample every row of one side from its Gaussian full conditional.

    ``prior_precs`` broadcasts over rows when the prior is shared;
    ``prior_b`` is the per-row (or shared) prior_precision @ prior_mean term.
    """
    k = partner.shape[1]
    suff, lin = _suff_stats(partner, major, minor, vals, n)
    precisions = prior_precs + tau * suff
    b = prior_b + tau * lin
    chols, precisions = _batched_chol(precisions, context)
    means = np.linalg.solve(precisions, b[..., None])[..., 0]
    noise = rng.standard_normal((n, k))
    return means + np.linalg.solve(np.swapaxes(chols, -1, -2), noise[..., None])[..., 0]


class _GmmPriorArrays:
    """Padded per-row mixture arrays enabling batched component selection."""

    def __init__(self, pset: PosteriorSet):
        counts = np.diff(pset.offsets)
        n, cmax, k = counts.size, int(counts.max()), pset.k
        self.log_weights = np.full((n, cmax), -np.inf)
        self.means = np.zeros((n, cmax, k))
        self.precisions = np.tile(np.eye(k), (n, cmax, 1, 1))
        self.weights = np.zeros((n, cmax))
        for i in range(n):
            lo, hi = pset.offsets[i], pset.offsets[i + 1]
            c = hi - lo
            self.weights[i, :c] = pset.weights[lo:hi]
            self.log_weights[i, :c] = np.log(pset.weights[lo:hi])
            self.means[i, :c] = pset.means[lo:hi]
            self.precisions[i, :c] = pset.precisions[lo:hi]
        _, self.logdet = np.linalg.slogdet(self.precisions)
        self.logdet[np.isinf(self.log_weights)] = 0.0

    def select(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per row, the (mean, precision) of the maximum-responsibility
        component at the current row values."""
        diffs = values[:, None, :] - self.means
        quad = np.einsum("rck,rckl,rcl->rc", diffs, self.precisions, diffs)
        score = self.log_weights + 0.5 * self.logdet - 0.5 * quad
        chosen = np.argmax(score, axis=1)
        rows = np.arange(values.shape[0])
        return self.means[rows, chosen], self.precisions[rows, chosen]

    def draw_initial(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Component draw by weight per row, for initialization."""
        cum = np.cumsum(self.weights, axis=1)
        chosen = np.sum(cum < rng.random((cum.shape[0], 1)), axis=1)
        chosen = np.minimum(chosen, self.weights.shape[1] - 1)
        rows = np.arange(cum.shape[0])
        return self.means[rows, chosen], self.precisions[rows, chosen]


class _SideState:
    """Per-side prior bookkeeping for the sweep loop."""

    def __init__(self, side_prior: SidePrior, n_rows: int, name: str):
        self.mode = side_prior.mode
        self.name = name
        self.gmm = None
        if side_prior.mode != SHARED:
            pset = side_prior.posteriors
            if pset.n_rows != n_rows:
                raise ValidationError(
                    f"propagated {name} prior covers {pset.n_rows} rows, expected {n_rows}")
            if side_prior.mode == PROP_GAUSSIAN:
                self.prior_precs = pset.precisions
                self.prior_b = np.einsum("rkl,rl->rk", pset.precisions, pset.means)
                self.prior_means = pset.means
            else:
                self.gmm = _GmmPriorArrays(pset)

    def prior_terms(self, values, hyper_mu, hyper_lambda):
        if self.mode == SHARED:
            return hyper_lambda, hyper_lambda @ hyper_mu
        if self.mode == PROP_GAUSSIAN:
            return self.prior_precs, self.prior_b
        means, precs = self.gmm.select(values)
        return precs, np.einsum("rkl,rl->rk", precs, means)

    def initial_values(self, rng, n_rows, k, nw_prior):
        if self.mode == PROP_GAUSSIAN:
            means, precs = self.prior_means, self.prior_precs
        elif self.mode == PROP_GMM:
            means, precs = self.gmm.draw_initial(rng)
        else:
            means = np.broadcast_to(nw_prior.mu0, (n_rows, k))
            precs = np.broadcast_to(nw_prior.nu0 * nw_prior.w0, (n_rows, k, k))
        chols = np.linalg.cholesky(precs)
        noise = rng.standard_normal((n_rows, k))
        return means + np.linalg.solve(np.swapaxes(chols, -1, -2), noise[..., None])[..., 0]


def gibbs_run(subset: SparseMatrix, priors: RowPriorSet,
              nw_prior: NormalWishartPrior, config: GibbsConfig) -> SampleChain:
    """Run the blocked Gibbs sampler on one data block.

    Each sweep samples shared hyperparameters for every non-propagated side,
    then all X rows, then all W rows.  Post-burn-in sweeps are retained at
    the configured thinning.  Numerical failures abort with the sweep and
    side in the message.
    """
    if subset.m == 0:
        raise ValidationError("subset has no observations")
    k = config.n_factors
    if nw_prior.k != k:
        raise ValidationError("normal-Wishart prior dimension != n_factors")
    rng = np.random.default_rng(config.seed)

    x_major, x_minor, x_vals = _sorted_axis(subset, "row")
    w_major, w_minor, w_vals = _sorted_axis(subset, "col")

    x_state = _SideState(priors.x, subset.n_rows, "X")
    w_state = _SideState(priors.w, subset.n_cols, "W")

    x = x_state.initial_values(rng, subset.n_rows, k, nw_prior)
    w = w_state.initial_values(rng, subset.n_cols, k, nw_prior)
    # Constant placeholder hyperparameters for propagated sides.
    mu_x, lambda_x = nw_prior.mu0.copy(), nw_prior.nu0 * nw_prior.w0
    mu_w, lambda_w = nw_prior.mu0.copy(), nw_prior.nu0 * nw_prior.w0

    n_keep = config.n_samples
    kept_x = np.empty((n_keep, subset.n_rows, k))
    kept_w = np.empty((n_keep, subset.n_cols, k))
    kept_mu_x = np.empty((n_keep, k))
    kept_lambda_x = np.empty((n_keep, k, k))
    kept_mu_w = np.empty((n_keep, k))
    kept_lambda_w = np.empty((n_keep, k, k))

    kept = 0
    for sweep in range(1, config.n_iters + 1):
        try:
            if x_state.mode == SHARED:
                mu_x, lambda_x = sample_hyper_normal_wishart(x, nw_prior, rng)
            if w_state.mode == SHARED:
                mu_w, lambda_w = sample_hyper_normal_wishart(w, nw_prior, rng)
            precs, b = x_state.prior_terms(x, mu_x, lambda_x)
            x = _sample_side(rng, w, x_major, x_minor, x_vals, subset.n_rows,
                             config.tau, precs, b, "X side")
            precs, b = w_state.prior_terms(w, mu_w, lambda_w)
            w = _sample_side(rng, x, w_major, w_minor, w_vals, subset.n_cols,
                             config.tau, precs, b, "W side")
        except NumericalError as exc:
            raise NumericalError(f"sweep {sweep}: {exc}") from exc
        if sweep > config.burn_in and (sweep - config.burn_in) % config.thin == 0:
            kept_x[kept] = x
            kept_w[kept] = w
            kept_mu_x[kept], kept_lambda_x[kept] = mu_x, lambda_x
            kept_mu_w[kept], kept_lambda_w[kept] = mu_w, lambda_w
            kept += 1
    return SampleChain(kept_x, kept_w, kept_mu_x, kept_lambda_x,
                       kept_mu_w, kept_lambda_w, replace(config))


def chain_posterior_mean(chain: SampleChain) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise average of the retained factor samples."""
    if chain.n_samples == 0:
        raise ValidationError("empty chain")
    return chain.x_samples.mean(axis=0), chain.w_samples.mean(axis=0)


def predict(x_mean: np.ndarray, w_mean: np.ndarray, rows: np.ndarray,
            cols: np.ndarray) -> np.ndarray:
    """Inner-product predictions x_n' w_d at the requested cells (unclipped)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= x_mean.shape[0]):
        raise ValidationError("row index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= w_mean.shape[0]):
        raise ValidationError("column index out of range")
    return np.einsum("mk,mk->m", x_mean[rows], w_mean[cols])
