"""Independent numerical oracles used by the test suite.

Everything here is deliberately implemented through different routes than
the package code: dense-grid quadrature, Gauss-Hermite/trapezoid latent
integrals, extended-precision linear algebra, and exhaustive enumeration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import mpmath
import numpy as np

LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Small closed forms
# ---------------------------------------------------------------------------

def log_normal_pdf(x, mean, precision):
    """Scalar/array log N(x; mean, 1/precision)."""
    return 0.5 * (np.log(precision) - LOG2PI) - 0.5 * precision * (x - mean) ** 2


def mixture_moments(weights, means, covs):
    """Exact mean and covariance of a Gaussian mixture."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    mean = weights @ means
    diffs = means - mean
    cov = np.einsum("c,ckl->kl", weights, covs)
    cov += np.einsum("c,ck,cl->kl", weights, diffs, diffs)
    return mean, cov


def two_pass_rmse(predictions, truths):
    """Streaming-free RMSE: explicit sum of squares then sqrt."""
    total = 0.0
    for p, t in zip(predictions, truths):
        total += (p - t) ** 2
    return math.sqrt(total / len(predictions))


# ---------------------------------------------------------------------------
# Dense-grid posterior for a single Gaussian row conditional (K <= 2)
# ---------------------------------------------------------------------------

def grid_row_posterior(y_vals, partner_rows, tau, prior_mean, prior_prec,
                       half_width=8.0, n_grid=401):
    """Moments of p(x) ~ N(x; prior) * prod_i N(y_i; w_i.x, 1/tau) on a grid."""
    k = len(prior_mean)
    axes = [np.linspace(m - half_width, m + half_width, n_grid) for m in prior_mean]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    diff = pts - prior_mean
    logp = -0.5 * np.einsum("nk,kl,nl->n", diff, prior_prec, diff)
    for y, w in zip(y_vals, partner_rows):
        logp += -0.5 * tau * (y - pts @ w) ** 2
    logp -= logp.max()
    weights = np.exp(logp)
    weights /= weights.sum()
    mean = weights @ pts
    centered = pts - mean
    cov = np.einsum("n,nk,nl->kl", weights, centered, centered)
    return mean, cov


# ---------------------------------------------------------------------------
# Dense-grid Bayes oracle for a K=1 factorization with fixed Gaussian priors
# ---------------------------------------------------------------------------

@dataclass
class GridFactorMoments:
    x_mean: np.ndarray          # (N,)
    w_mean: np.ndarray          # (D,)
    product_mean: np.ndarray    # (N, D): E[x_n * w_d]


def grid_factor_means(y, tau, x_prior_mean, x_prior_prec, w_prior_mean,
                      w_prior_prec, lo=-6.0, hi=8.0, n_grid=161) -> GridFactorMoments:
    """Exact posterior means for a fully observed K=1 model, integrating X
    analytically per row and W on a dense tensor grid (D <= 3)."""
    y = np.asarray(y, dtype=np.float64)
    n_rows, n_cols = y.shape
    if n_cols > 3:
        raise ValueError("grid oracle supports at most 3 columns")
    axes = np.linspace(lo, hi, n_grid)
    grids = np.meshgrid(*([axes] * n_cols), indexing="ij", sparse=True)

    sumsq = sum(g ** 2 for g in grids)
    log_post = sum(log_normal_pdf(g, m, p)
                   for g, m, p in zip(grids, w_prior_mean, w_prior_prec))
    log_post = np.broadcast_to(log_post, (n_grid,) * n_cols).copy()
    a_rows, b_rows = [], []
    for n in range(n_rows):
        lam, mx = x_prior_prec[n], x_prior_mean[n]
        a = lam + tau * sumsq
        b = lam * mx + tau * sum(y[n, d] * grids[d] for d in range(n_cols))
        c = lam * mx ** 2 + tau * np.sum(y[n] ** 2)
        log_post += (0.5 * (np.log(lam) - np.log(a)) + 0.5 * (b * b / a - c)
                     + 0.5 * n_cols * (np.log(tau) - LOG2PI))
        a_rows.append(a)
        b_rows.append(b)
    log_post -= log_post.max()
    weights = np.exp(log_post)
    weights /= weights.sum()

    w_mean = np.array([float(np.sum(weights * np.broadcast_to(grids[d], weights.shape)))
                       for d in range(n_cols)])
    x_mean = np.empty(n_rows)
    product_mean = np.empty((n_rows, n_cols))
    for n in range(n_rows):
        cond = b_rows[n] / a_rows[n]
        x_mean[n] = float(np.sum(weights * cond))
        for d in range(n_cols):
            product_mean[n, d] = float(np.sum(
                weights * cond * np.broadcast_to(grids[d], weights.shape)))
    return GridFactorMoments(x_mean, w_mean, product_mean)


def batch_mcse(samples: np.ndarray, n_batches: int = 25) -> float:
    """Batch-means Monte Carlo standard error of a chain mean."""
    n = len(samples) // n_batches * n_batches
    batches = samples[:n].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------------------
# Extended-precision aggregation oracles
# ---------------------------------------------------------------------------

def _to_mp(arr):
    return mpmath.matrix([[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(arr)])


def _mp_col(vec):
    return mpmath.matrix([mpmath.mpf(float(v)) for v in vec])


def mp_gaussian_product(means, precisions, dps=60):
    """Precision-weighted Gaussian product in extended precision."""
    with mpmath.workdps(dps):
        k = len(means[0])
        total = mpmath.zeros(k, k)
        rhs = mpmath.zeros(k, 1)
        for mean, prec in zip(means, precisions):
            pm = _to_mp(prec)
            total += pm
            rhs += pm * _mp_col(mean)
        mu = mpmath.lu_solve(total, rhs)
        return (np.array([float(mu[i]) for i in range(k)]),
                np.array([[float(total[i, j]) for j in range(k)] for i in range(k)]))


def mp_staged_aggregate(mean1, prec1, other_means, other_precs, dps=60):
    """Uncorrected staged aggregation (all differences assumed SPD):

        P* = (2 - J) P1 + sum_j Pj
        m* = inv(P*) ((2 - J) P1 m1 + sum_j Pj mj)
    """
    with mpmath.workdps(dps):
        k = len(mean1)
        j_total = 1 + len(other_means)
        p1 = _to_mp(prec1)
        total = (2 - j_total) * p1
        rhs = (2 - j_total) * (p1 * _mp_col(mean1))
        for mean, prec in zip(other_means, other_precs):
            pm = _to_mp(prec)
            total += pm
            rhs += pm * _mp_col(mean)
        mu = mpmath.lu_solve(total, rhs)
        return (np.array([float(mu[i]) for i in range(k)]),
                np.array([[float(total[i, j]) for j in range(k)] for i in range(k)]))


def mp_ep_aggregate(means, precisions, prior_mean, prior_prec, dps=60):
    """Prior-corrected product: P* = sum Pj - (J-1) P0, mean accordingly."""
    with mpmath.workdps(dps):
        k = len(prior_mean)
        j_total = len(means)
        p0 = _to_mp(prior_prec)
        total = -(j_total - 1) * p0
        rhs = -(j_total - 1) * (p0 * _mp_col(prior_mean))
        for mean, prec in zip(means, precisions):
            pm = _to_mp(prec)
            total += pm
            rhs += pm * _mp_col(mean)
        mu = mpmath.lu_solve(total, rhs)
        return (np.array([float(mu[i]) for i in range(k)]),
                np.array([[float(total[i, j]) for j in range(k)] for i in range(k)]))


# ---------------------------------------------------------------------------
# Exhaustive latent-dimension alignment
# ---------------------------------------------------------------------------

def exhaustive_alignment(a: np.ndarray, b: np.ndarray):
    """Best permutation/signs maximizing the summed |column correlation|."""
    k = a.shape[1]
    corr = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            sa, sb = a[:, i].std(), b[:, j].std()
            if sa > 0 and sb > 0:
                corr[i, j] = np.corrcoef(a[:, i], b[:, j])[0, 1]
    best_perm, best_score = None, -np.inf
    for perm in itertools.permutations(range(k)):
        score = sum(abs(corr[i, perm[i]]) for i in range(k))
        if score > best_score:
            best_score, best_perm = score, perm
    signs = np.array([1 if corr[i, best_perm[i]] >= 0 else -1 for i in range(k)])
    return np.array(best_perm), signs


# ---------------------------------------------------------------------------
# Product-density identity check (2x2 grid, K=1, fixed standard-normal priors)
# ---------------------------------------------------------------------------

def _logn(y, mean, tau):
    return 0.5 * (math.log(tau) - LOG2PI) - 0.5 * tau * (y - mean) ** 2


@dataclass
class IdentityResolution:
    """Grid resolution bundle: route A feeds the staged densities, route B
    independently re-evaluates every divided-away marginal at a different
    resolution."""

    grid_a: int = 200
    grid_b: int = 300
    nodes_a: int = 701
    nodes_b: int = 1101
    half_width: float = 8.0


class ProductDensityIdentity:
    """Numerically evaluates the staged decomposition of a 4x4, K=1 joint
    posterior over a 2x2 grid and compares it with the direct joint density.

    Every stage posterior is normalized by its own grid-integrated constant;
    every propagated marginal that the decomposition divides away is
    evaluated twice, through two independently-resolved quadrature routes, so
    the log-difference to the joint is constant across evaluation points only
    if the decomposition (which factor, which divisor) is exactly right.
    """

    def __init__(self, y: np.ndarray, tau: float, res: IdentityResolution):
        assert y.shape == (4, 4)
        self.y = np.asarray(y, dtype=np.float64)
        self.tau = float(tau)
        self.res = res
        b = res.half_width
        self.axis_a = np.linspace(-b, b, res.grid_a)
        self.axis_b = np.linspace(-b, b, res.grid_b)
        self.nodes_a, self.weights_a = self._latent_rule(res.nodes_a)
        self.nodes_b, self.weights_b = self._latent_rule(res.nodes_b)
        self._prepare()

    def _latent_rule(self, n):
        """Trapezoid nodes/weights for the integrated scalar, with its
        standard-normal prior folded into the weights."""
        nodes = np.linspace(-self.res.half_width, self.res.half_width, n)
        weights = np.full(n, nodes[1] - nodes[0])
        weights[0] = weights[-1] = weights[0] / 2
        return nodes, weights * np.exp(log_normal_pdf(nodes, 0.0, 1.0))

    def _pair_integral(self, y0, y1, c0, c1, route):
        """int N(t;0,1) N(y0; t c0, 1/tau) N(y1; t c1, 1/tau) dt on grids of
        the coefficients, accumulated in node chunks."""
        nodes, weights = ((self.nodes_a, self.weights_a) if route == "a"
                          else (self.nodes_b, self.weights_b))
        c0 = np.asarray(c0, dtype=np.float64)
        c1 = np.asarray(c1, dtype=np.float64)
        out = np.zeros(np.broadcast_shapes(c0.shape, c1.shape))
        for lo in range(0, nodes.size, 64):
            t = nodes[lo:lo + 64]
            vals = np.exp(_logn(y0, t * c0[..., None], self.tau)
                          + _logn(y1, t * c1[..., None], self.tau))
            out = out + vals @ weights[lo:lo + 64]
        return out

    @staticmethod
    def _trapz2(values, axis):
        h = axis[1] - axis[0]
        w = np.full(axis.size, h)
        w[0] = w[-1] = h / 2
        return float(np.einsum("u,v,uv->", w, w, values))

    def _grid2(self, axis):
        return axis[:, None], axis[None, :]

    def _prepare(self):
        y, tau = self.y, self.tau
        ga, gb = self.axis_a, self.axis_b

        # Stage I marginal of W-block 1 on the route-A w-grid:
        # g11(w) = N2(w; 0, I) * prod_{n in rows 0,1} I_n(w).
        w0, w1 = self._grid2(ga)
        prior2 = np.exp(log_normal_pdf(w0, 0, 1) + log_normal_pdf(w1, 0, 1))
        self.pw1_grid_a = prior2 * self._pair_integral(y[0, 0], y[0, 1], w0, w1, "a") \
            * self._pair_integral(y[1, 0], y[1, 1], w0, w1, "a")
        self.z11 = self._trapz2(self.pw1_grid_a, ga)
        self.pw1_grid_a /= self.z11

        # Same object on the route-B grid.
        w0b, w1b = self._grid2(gb)
        prior2b = np.exp(log_normal_pdf(w0b, 0, 1) + log_normal_pdf(w1b, 0, 1))
        pw1_b = prior2b * self._pair_integral(y[0, 0], y[0, 1], w0b, w1b, "b") \
            * self._pair_integral(y[1, 0], y[1, 1], w0b, w1b, "b")
        self.z11_b = self._trapz2(pw1_b, gb)
        self.pw1_grid_b = pw1_b / self.z11_b

        # Stage I marginal of X-block 1 (columns integrated out), both routes.
        x0, x1 = self._grid2(ga)
        px_prior = np.exp(log_normal_pdf(x0, 0, 1) + log_normal_pdf(x1, 0, 1))
        self.px1_grid_a = px_prior * self._pair_integral(y[0, 0], y[1, 0], x0, x1, "a") \
            * self._pair_integral(y[0, 1], y[1, 1], x0, x1, "a")
        zx = self._trapz2(self.px1_grid_a, ga)
        assert abs(zx / self.z11 - 1) < 1e-8, "stage-I normalizers must agree"
        self.px1_grid_a /= zx
        x0b, x1b = self._grid2(gb)
        px_priorb = np.exp(log_normal_pdf(x0b, 0, 1) + log_normal_pdf(x1b, 0, 1))
        px1_b = px_priorb * self._pair_integral(y[0, 0], y[1, 0], x0b, x1b, "b") \
            * self._pair_integral(y[0, 1], y[1, 1], x0b, x1b, "b")
        self.px1_grid_b = px1_b / self._trapz2(px1_b, gb)

        # Stage II normalizers: rows 2..3 against W-block 1, and columns
        # 2..3 against X-block 1, on both routes.
        lik_rows23 = self._pair_integral(y[2, 0], y[2, 1], w0, w1, "a") \
            * self._pair_integral(y[3, 0], y[3, 1], w0, w1, "a")
        self.z21 = self._trapz2(self.pw1_grid_a * lik_rows23, ga)
        lik_rows23_b = self._pair_integral(y[2, 0], y[2, 1], w0b, w1b, "b") \
            * self._pair_integral(y[3, 0], y[3, 1], w0b, w1b, "b")
        self.z21_b = self._trapz2(self.pw1_grid_b * lik_rows23_b, gb)

        lik_cols23 = self._pair_integral(y[0, 2], y[1, 2], x0, x1, "a") \
            * self._pair_integral(y[0, 3], y[1, 3], x0, x1, "a")
        self.z12 = self._trapz2(self.px1_grid_a * lik_cols23, ga)
        lik_cols23_b = self._pair_integral(y[0, 2], y[1, 2], x0b, x1b, "b") \
            * self._pair_integral(y[0, 3], y[1, 3], x0b, x1b, "b")
        self.z12_b = self._trapz2(self.px1_grid_b * lik_cols23_b, gb)

        # Stage III prior grids and normalizer, route A only (the constant
        # does not affect the spread; divisors are re-evaluated pointwise).
        self.px2_grid_a = self._stage3_prior_grid(self.pw1_grid_a, ga,
                                                  rows=(2, 3), cols=(0, 1),
                                                  latent="w") / self.z21
        self.pw2_grid_a = self._stage3_prior_grid(self.px1_grid_a, ga,
                                                  rows=(0, 1), cols=(2, 3),
                                                  latent="x") / self.z12
        self.z22 = self._stage3_normalizer()

    def _cellw(self, axis):
        h = axis[1] - axis[0]
        w = np.full(axis.size, h)
        w[0] = w[-1] = h / 2
        return w

    def _stage3_prior_grid(self, marg_grid, axis, rows, cols, latent):
        """Unnormalized stage-II joint marginal on the grid of the propagated
        side, via one large quadrature-weighted matrix product."""
        y, tau = self.y, self.tau
        g = axis
        cw = self._cellw(axis)
        weighted = marg_grid * np.outer(cw, cw)
        if latent == "w":
            # P(xa, xb) = sum_{u,v} weighted[u,v] * prod over block entries
            f_a0 = np.exp(_logn(y[rows[0], cols[0]], np.outer(g, g), tau))
            f_a1 = np.exp(_logn(y[rows[0], cols[1]], np.outer(g, g), tau))
            f_b0 = np.exp(_logn(y[rows[1], cols[0]], np.outer(g, g), tau))
            f_b1 = np.exp(_logn(y[rows[1], cols[1]], np.outer(g, g), tau))
        else:
            f_a0 = np.exp(_logn(y[rows[0], cols[0]], np.outer(g, g), tau))
            f_a1 = np.exp(_logn(y[rows[1], cols[0]], np.outer(g, g), tau))
            f_b0 = np.exp(_logn(y[rows[0], cols[1]], np.outer(g, g), tau))
            f_b1 = np.exp(_logn(y[rows[1], cols[1]], np.outer(g, g), tau))
        n = g.size
        fa = (f_a0[:, :, None] * f_a1[:, None, :]).reshape(n, n * n)
        fb = (f_b0[:, :, None] * f_b1[:, None, :]).reshape(n, n * n)
        inner = (fa * weighted.ravel()) @ fb.T
        prior = np.exp(log_normal_pdf(g, 0, 1))
        return np.outer(prior, prior) * inner

    def _stage3_normalizer(self):
        y, tau, g = self.y, self.tau, self.axis_a
        n = g.size
        cw = self._cellw(g)
        pw = self.pw2_grid_a * np.outer(cw, cw)
        h_a0 = np.exp(_logn(y[2, 2], np.outer(g, g), tau))
        h_a1 = np.exp(_logn(y[2, 3], np.outer(g, g), tau))
        h_b0 = np.exp(_logn(y[3, 2], np.outer(g, g), tau))
        h_b1 = np.exp(_logn(y[3, 3], np.outer(g, g), tau))
        ha = (h_a0[:, :, None] * h_a1[:, None, :]).reshape(n, n * n)
        hb = (h_b0[:, :, None] * h_b1[:, None, :]).reshape(n, n * n)
        inner = (ha * pw.ravel()) @ hb.T
        px = self.px2_grid_a * np.outer(cw, cw)
        return float(np.sum(px * inner))

    # -- point evaluations ---------------------------------------------------

    def _log_block_lik(self, rows, cols, x_pair, w_pair):
        total = 0.0
        for a, n in enumerate(rows):
            for b, d in enumerate(cols):
                total += _logn(self.y[n, d], x_pair[a] * w_pair[b], self.tau)
        return total

    @staticmethod
    def _log_prior2(pair):
        return float(np.sum(log_normal_pdf(np.asarray(pair), 0.0, 1.0)))

    def _log_pw1(self, w_pair, route):
        z = self.z11 if route == "a" else self.z11_b
        val = math.exp(self._log_prior2(w_pair)) \
            * float(self._pair_integral(self.y[0, 0], self.y[0, 1],
                                        w_pair[0], w_pair[1], route)) \
            * float(self._pair_integral(self.y[1, 0], self.y[1, 1],
                                        w_pair[0], w_pair[1], route))
        return math.log(val) - math.log(z)

    def _log_px1(self, x_pair, route):
        z = self.z11 if route == "a" else self.z11_b
        val = math.exp(self._log_prior2(x_pair)) \
            * float(self._pair_integral(self.y[0, 0], self.y[1, 0],
                                        x_pair[0], x_pair[1], route)) \
            * float(self._pair_integral(self.y[0, 1], self.y[1, 1],
                                        x_pair[0], x_pair[1], route))
        return math.log(val) - math.log(z)

    def _log_stage3_prior(self, pair, which, route):
        """Marginal of a stage-II joint at one point of the propagated side,
        by 2-d quadrature over the other side."""
        y, tau = self.y, self.tau
        if route == "a":
            axis, marg, z_prev = self.axis_a, (self.pw1_grid_a if which == "x2"
                                               else self.px1_grid_a), \
                (self.z21 if which == "x2" else self.z12)
        else:
            axis, marg, z_prev = self.axis_b, (self.pw1_grid_b if which == "x2"
                                               else self.px1_grid_b), \
                (self.z21_b if which == "x2" else self.z12_b)
        u, v = self._grid2(axis)
        if which == "x2":
            lik = np.exp(_logn(y[2, 0], pair[0] * u, tau) + _logn(y[2, 1], pair[0] * v, tau)
                         + _logn(y[3, 0], pair[1] * u, tau) + _logn(y[3, 1], pair[1] * v, tau))
        else:
            lik = np.exp(_logn(y[0, 2], u * pair[0], tau) + _logn(y[0, 3], u * pair[1], tau)
                         + _logn(y[1, 2], v * pair[0], tau) + _logn(y[1, 3], v * pair[1], tau))
        val = self._log_prior2(pair) + math.log(self._trapz2(marg * lik, axis))
        return val - math.log(z_prev)

    def log_joint(self, x, w):
        total = self._log_prior2(x[:2]) + self._log_prior2(x[2:])
        total += self._log_prior2(w[:2]) + self._log_prior2(w[2:])
        for rows, cols in (((0, 1), (0, 1)), ((0, 1), (2, 3)),
                           ((2, 3), (0, 1)), ((2, 3), (2, 3))):
            total += self._log_block_lik(rows, cols,
                                         [x[rows[0]], x[rows[1]]],
                                         [w[cols[0]], w[cols[1]]])
        return total

    def log_decomposition(self, x, w):
        """Log of the staged product-density right-hand side, with every
        divided-away marginal evaluated through route B."""
        x1, x2, w1, w2 = x[:2], x[2:], w[:2], w[2:]
        f1 = (self._log_prior2(x1) + self._log_prior2(w1)
              + self._log_block_lik((0, 1), (0, 1), x1, w1) - math.log(self.z11))
        f2 = (self._log_pw1(w1, "a") + self._log_prior2(x2)
              + self._log_block_lik((2, 3), (0, 1), x2, w1) - math.log(self.z21)
              - self._log_pw1(w1, "b"))
        f3 = (self._log_px1(x1, "a") + self._log_prior2(w2)
              + self._log_block_lik((0, 1), (2, 3), x1, w2) - math.log(self.z12)
              - self._log_px1(x1, "b"))
        f4 = (self._log_stage3_prior(x2, "x2", "a")
              + self._log_stage3_prior(w2, "w2", "a")
              + self._log_block_lik((2, 3), (2, 3), x2, w2) - math.log(self.z22)
              - self._log_stage3_prior(x2, "x2", "b")
              - self._log_stage3_prior(w2, "w2", "b"))
        return f1 + f2 + f3 + f4

    def spread(self, points: np.ndarray) -> float:
        """Max - min of (decomposition - joint) over evaluation points."""
        diffs = [self.log_decomposition(p[:4], p[4:]) - self.log_joint(p[:4], p[4:])
                 for p in points]
        return float(np.max(diffs) - np.min(diffs))
