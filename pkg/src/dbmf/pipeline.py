"""Three-stage factorization pipeline over a grid-partitioned matrix.

Stage I samples the top-left block under the default priors.  Stage II runs
every block sharing its row or column range, in parallel, with the stage-I
posterior of the shared side handed in as a prior.  Stage III runs the
remaining blocks with both sides' priors handed in from stage II.  Per-row
posteriors are then aggregated across the blocks that estimated the same
rows.  Baselines: a single full-data run, and independent per-block runs
combined by prior-corrected Gaussian products.

All stage handoff happens through posterior files in a run directory, so a
stage can only start once its predecessors' files exist.  Per-block seeds
are derived by hashing (master seed, stage, block coordinates), making
results independent of scheduling order.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .aggregate import AggregationInput, ep_parametric_aggregate, pp_aggregate_row
from .approx import PosteriorSet, RowPosterior, fit_rows, load_posterior_file, save_posterior_file
from .data import PartitionPlan, SparseMatrix, order_matrix, partition
from .errors import ArtifactError, PipelineError, ValidationError
from .sampler import (GibbsConfig, NormalWishartPrior, RowPriorSet, SampleChain,
                      SidePrior, gibbs_run)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DBMF_OUTPUT_ROOT"


@dataclass
class RunConfig:
    """Everything one pipeline run needs besides the data."""

    n_factors: int
    tau: float
    n_iters: int = 1200
    burn_in: int = 800
    thin: int = 2
    seed: int = 0
    approximation: str = "mm"            # mm | dm | gmm
    ordering: str = "decreasing"         # decreasing | random | none
    partition_rows: int = 1
    partition_cols: int = 1
    top_n: int = 3
    lambda_policy: str | float = "median-pairwise"
    workers: int = 1
    save_chains: bool = False
    # shared-prior hyperparameters (w0 is isotropic, nu0 defaults to K)
    nw_mu0: float = 0.0
    nw_beta0: float = 2.0
    nw_w0_scale: float = 1.0
    nw_nu0: float | None = None

    def __post_init__(self):
        GibbsConfig(self.n_factors, self.tau, self.n_iters, self.burn_in,
                    self.thin, 0)  # reuse sweep-count validation
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if self.approximation not in ("mm", "dm", "gmm"):
            raise ValidationError(f"unknown approximation kind: {self.approximation!r}")
        if self.ordering not in ("decreasing", "random", "none"):
            raise ValidationError(f"unknown ordering scheme: {self.ordering!r}")
        if self.partition_rows < 1 or self.partition_cols < 1:
            raise ValidationError("partition must be at least 1x1")
        if self.top_n < 1:
            raise ValidationError("top_n must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if isinstance(self.lambda_policy, str):
            if self.lambda_policy != "median-pairwise":
                raise ValidationError("lambda_policy is 'median-pairwise' or a positive float")
        elif self.lambda_policy <= 0:
            raise ValidationError("fixed lambda must be positive")
        if self.nw_beta0 <= 0 or self.nw_w0_scale <= 0:
            raise ValidationError("nw_beta0 and nw_w0_scale must be positive")
        if self.nw_nu0 is not None and self.nw_nu0 < self.n_factors:
            raise ValidationError("nw_nu0 must be >= n_factors")

    def nw_prior(self) -> NormalWishartPrior:
        k = self.n_factors
        nu0 = float(k) if self.nw_nu0 is None else float(self.nw_nu0)
        return NormalWishartPrior(np.full(k, self.nw_mu0), self.nw_beta0,
                                  self.nw_w0_scale * np.eye(k), nu0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostModel:
    """Inputs of the proportional computation/communication cost formulas."""

    n_rows: int
    n_cols: int
    n_obs: int
    n_factors: int
    n_iters: int
    workers: int
    n_components: int = 1
    params_per_row: float | None = None

    def __post_init__(self):
        for name in ("n_rows", "n_cols", "n_obs", "n_factors", "n_iters",
                     "workers", "n_components"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")


@dataclass
class CostEval:
    """Proportional per-submodel time, aggregation time, total, and
    input/output communication volume."""

    t0: float
    t_aggregate: float
    total: float
    communication: float


def row_param_count(kind: str, n_factors: int, n_components: int = 1) -> float:
    """Parameters communicated per row: K + K^2 per Gaussian, times the
    component count for mixtures."""
    base = n_factors + n_factors ** 2
    return float(n_components * base) if kind == "gmm" else float(base)


def cost_model_eval(cm: CostModel) -> CostEval:
    """Evaluate the proportional cost formulas.

    Per-submodel time t0 = [(N+D)K^3/(sqrt(U)+1) + M K^2/(U+2 sqrt(U)+1)] T;
    the three stages cost 3 t0, aggregation costs
    t_a = max(N, D)/(sqrt(U)+1) (K+K^2), and communication is proportional
    to sqrt(U) (N+D) L.
    """
    su = math.sqrt(cm.workers)
    k = cm.n_factors
    t0 = ((cm.n_rows + cm.n_cols) * k ** 3 / (su + 1.0)
          + cm.n_obs * k ** 2 / (cm.workers + 2.0 * su + 1.0)) * cm.n_iters
    t_a = max(cm.n_rows, cm.n_cols) / (su + 1.0) * (k + k ** 2)
    params = cm.params_per_row
    if params is None:
        params = row_param_count("gmm" if cm.n_components > 1 else "mm",
                                 k, cm.n_components)
    comm = su * (cm.n_rows + cm.n_cols) * params
    return CostEval(t0, t_a, 3.0 * t0 + t_a, comm)


# ---------------------------------------------------------------------------
# Seeds, layout, plan
# ---------------------------------------------------------------------------

def derive_seed(master_seed: int, *key: int) -> int:
    """Deterministic stream seed from the master seed and a structured key."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stage_of(i: int, j: int) -> int:
    if i == 0 and j == 0:
        return 1
    return 2 if (i == 0 or j == 0) else 3


def posterior_path(run_dir, stage: int, side: str, i: int, j: int) -> str:
    return os.path.join(run_dir, f"stage{stage}", f"{side}_{i}_{j}.npz")


def chain_path(run_dir, i: int, j: int) -> str:
    return os.path.join(run_dir, "chains", f"chain_{i}_{j}.npz")


def build_plan(matrix: SparseMatrix, config: RunConfig) -> PartitionPlan:
    """Order rows/columns per the config and tile into the config's grid."""
    perms = order_matrix(matrix, config.ordering, seed=config.seed)
    return partition(matrix, perms, config.partition_rows, config.partition_cols)


def extract_blocks(matrix: SparseMatrix, plan: PartitionPlan) -> dict:
    """Split entries into per-block matrices with block-local indices."""
    inv_r, inv_c = plan.inverse_perms()
    pr = inv_r[matrix.rows]
    pc = inv_c[matrix.cols]
    bi = np.searchsorted(plan.row_cuts, pr, side="right") - 1
    bj = np.searchsorted(plan.col_cuts, pc, side="right") - 1
    key = bi * plan.n_col_blocks + bj
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    blocks = {}
    for i in range(plan.n_row_blocks):
        r_lo, r_hi = plan.row_range(i)
        for j in range(plan.n_col_blocks):
            c_lo, c_hi = plan.col_range(j)
            lo = np.searchsorted(sorted_key, i * plan.n_col_blocks + j, side="left")
            hi = np.searchsorted(sorted_key, i * plan.n_col_blocks + j, side="right")
            sel = order[lo:hi]
            blocks[(i, j)] = SparseMatrix(r_hi - r_lo, c_hi - c_lo,
                                          pr[sel] - r_lo, pc[sel] - c_lo,
                                          matrix.vals[sel])
    return blocks


def read_run_config(run_dir) -> dict:
    path = os.path.join(run_dir, "run_config.json")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing run_config.json in {run_dir}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable run_config.json in {run_dir}: {exc}") from exc


def read_timings(run_dir) -> dict:
    path = os.path.join(run_dir, "timings.json")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing timings.json in {run_dir}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable timings.json in {run_dir}: {exc}") from exc


def load_block_means(run_dir, side: str, i: int, j: int) -> np.ndarray:
    """Posterior-mean estimate of one side's rows from one block run
    (mixtures are pooled)."""
    path = posterior_path(run_dir, stage_of(i, j), side, i, j)
    _, pset = load_posterior_file(path)
    return pset.pooled().means


def persist_posteriors(run_dir, stage: int, i: int, j: int, side: str,
                       posteriors: PosteriorSet, row_range: tuple[int, int]) -> str:
    """Write one side's block approximations into the run layout."""
    path = posterior_path(run_dir, stage, side, i, j)
    save_posterior_file(path, posteriors, side, row_range[0], row_range[1],
                        extra={"stage": stage, "block": [i, j]})
    return path


def load_posteriors(run_dir, stage: int, i: int, j: int, side: str) -> PosteriorSet:
    """Read one side's block approximations; names the stage/block on failure."""
    path = posterior_path(run_dir, stage, side, i, j)
    try:
        _, pset = load_posterior_file(path)
    except ArtifactError as exc:
        raise PipelineError(f"stage {stage} block ({i},{j}) {side}-posteriors: {exc}") from exc
    return pset


# ---------------------------------------------------------------------------
# Block tasks
# ---------------------------------------------------------------------------

@dataclass
class _BlockTask:
    key: tuple[int, int]
    stage: int
    block: SparseMatrix
    run_dir: str
    x_prior_file: str | None
    w_prior_file: str | None
    nw_prior: NormalWishartPrior
    gibbs: GibbsConfig
    approximation: str
    top_n: int
    lambda_policy: str | float
    fit_seed_x: int
    fit_seed_w: int
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    save_chain: bool


@dataclass
class _BlockResult:
    key: tuple[int, int]
    seconds: float
    started: float
    finished: float


def _default_posteriors(n_rows: int, nw: NormalWishartPrior) -> PosteriorSet:
    """Per-row Gaussian matching the hyperprior's nominal row prior
    (mean mu0, precision nu0 * w0); used as the pass-through posterior of a
    side that an empty block never updated."""
    means = np.tile(nw.mu0, (n_rows, 1))
    precs = np.tile(nw.nu0 * nw.w0, (n_rows, 1, 1))
    return PosteriorSet("gaussian", means, precs)


def _load_prior(path: str | None, task: _BlockTask, side: str) -> SidePrior:
    if path is None:
        return SidePrior.shared()
    try:
        _, pset = load_posterior_file(path)
    except ArtifactError as exc:
        raise PipelineError(
            f"stage {task.stage} block {task.key} missing {side} prior: {exc}") from exc
    return SidePrior.propagated(pset)


def _run_block_task(task: _BlockTask) -> _BlockResult:
    started = time.time()
    t0 = time.perf_counter()
    x_prior = _load_prior(task.x_prior_file, task, "x")
    w_prior = _load_prior(task.w_prior_file, task, "w")

    if task.block.m == 0:
        # Nothing observed: priors pass through unchanged as posteriors.
        x_pset = x_prior.posteriors if x_prior.posteriors is not None \
            else _default_posteriors(task.block.n_rows, task.nw_prior)
        w_pset = w_prior.posteriors if w_prior.posteriors is not None \
            else _default_posteriors(task.block.n_cols, task.nw_prior)
    else:
        chain = gibbs_run(task.block, RowPriorSet(x_prior, w_prior),
                          task.nw_prior, task.gibbs)
        if task.save_chain:
            chain.save(chain_path(task.run_dir, *task.key))
        x_pset = fit_rows(chain.x_samples, task.approximation,
                          lam_policy=task.lambda_policy, top_n=task.top_n,
                          seed=task.fit_seed_x)
        w_pset = fit_rows(chain.w_samples, task.approximation,
                          lam_policy=task.lambda_policy, top_n=task.top_n,
                          seed=task.fit_seed_w)
    i, j = task.key
    persist_posteriors(task.run_dir, task.stage, i, j, "x", x_pset, task.row_range)
    persist_posteriors(task.run_dir, task.stage, i, j, "w", w_pset, task.col_range)
    seconds = time.perf_counter() - t0
    return _BlockResult(task.key, seconds, started, time.time())


def _execute_stage(tasks: list[_BlockTask], workers: int) -> list[_BlockResult]:
    if not tasks:
        return []
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(_run_block_task, tasks))
    return [_run_block_task(task) for task in tasks]


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class FactorizationResult:
    """Aggregated per-row posteriors, point matrices, and the timing ledger.

    Point and posterior arrays are indexed by original (pre-permutation)
    row/column ids.
    """

    method: str
    x_mean: np.ndarray
    w_mean: np.ndarray
    x_precisions: np.ndarray
    w_precisions: np.ndarray
    timings: dict
    run_dir: str
    config: RunConfig
    plan: PartitionPlan

    @property
    def total_seconds(self) -> float:
        return self.timings["total"]


def _stage_summary(results: list[_BlockResult]) -> dict:
    blocks = {f"{r.key[0]},{r.key[1]}": {"seconds": r.seconds, "started": r.started,
                                         "finished": r.finished}
              for r in results}
    return {"blocks": blocks,
            "max_seconds": max((r.seconds for r in results), default=0.0)}


def _make_run_dir(run_dir) -> str:
    if run_dir is None:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            os.makedirs(root, exist_ok=True)
        run_dir = tempfile.mkdtemp(prefix="dbmf-run-", dir=root)
    os.makedirs(run_dir, exist_ok=True)
    for sub in ("stage1", "stage2", "stage3", "aggregate", "chains"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    return run_dir


def _write_json(path, doc) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def _task_for(key, blocks, plan, config, nw, run_dir, x_prior_file, w_prior_file):
    i, j = key
    stage = stage_of(i, j)
    gibbs = GibbsConfig(config.n_factors, config.tau, config.n_iters,
                        config.burn_in, config.thin,
                        derive_seed(config.seed, stage, i, j))
    return _BlockTask(key=key, stage=stage, block=blocks[key], run_dir=run_dir,
                      x_prior_file=x_prior_file, w_prior_file=w_prior_file,
                      nw_prior=nw, gibbs=gibbs, approximation=config.approximation,
                      top_n=config.top_n, lambda_policy=config.lambda_policy,
                      fit_seed_x=derive_seed(config.seed, stage, i, j, 1),
                      fit_seed_w=derive_seed(config.seed, stage, i, j, 2),
                      row_range=plan.row_range(i), col_range=plan.col_range(j),
                      save_chain=config.save_chains)


def _aggregate_rows_pp(first: PosteriorSet, others: list[PosteriorSet],
                       events: list, label: str) -> tuple[np.ndarray, np.ndarray]:
    first = first.pooled()
    others = [p.pooled() for p in others]
    n, k = first.means.shape
    means = np.empty((n, k))
    precs = np.empty((n, k, k))
    for row in range(n):
        row_events = []
        agg = pp_aggregate_row(AggregationInput(first.row(row),
                                                [p.row(row) for p in others]),
                               events=row_events)
        means[row], precs[row] = agg.mean, agg.precision
        events.extend({"row": f"{label}{row}", "where": ev.where, "shift": ev.shift}
                      for ev in row_events)
    return means, precs


def _aggregate_rows_ep(psets: list[PosteriorSet], prior: RowPosterior,
                       events: list, label: str) -> tuple[np.ndarray, np.ndarray]:
    psets = [p.pooled() for p in psets]
    n, k = psets[0].means.shape
    means = np.empty((n, k))
    precs = np.empty((n, k, k))
    for row in range(n):
        row_events = []
        agg = ep_parametric_aggregate([p.row(row) for p in psets], prior,
                                      len(psets), events=row_events)
        means[row], precs[row] = agg.mean, agg.precision
        events.extend({"row": f"{label}{row}", "where": ev.where, "shift": ev.shift}
                      for ev in row_events)
    return means, precs


def _assemble(plan, x_parts, w_parts):
    """Stack per-block aggregates and map back to original indices."""
    x_mean_p = np.concatenate([m for m, _ in x_parts])
    x_prec_p = np.concatenate([p for _, p in x_parts])
    w_mean_p = np.concatenate([m for m, _ in w_parts])
    w_prec_p = np.concatenate([p for _, p in w_parts])
    n, d, k = plan.n_rows, plan.n_cols, x_mean_p.shape[1]
    x_mean = np.empty((n, k))
    x_prec = np.empty((n, k, k))
    w_mean = np.empty((d, k))
    w_prec = np.empty((d, k, k))
    x_mean[plan.row_perm] = x_mean_p
    x_prec[plan.row_perm] = x_prec_p
    w_mean[plan.col_perm] = w_mean_p
    w_prec[plan.col_perm] = w_prec_p
    return x_mean, x_prec, w_mean, w_prec


def _finish(method, run_dir, plan, config, stage_timings, agg_seconds,
            x_parts, w_parts, events):
    x_mean, x_prec, w_mean, w_prec = _assemble(plan, x_parts, w_parts)
    save_posterior_file(os.path.join(run_dir, "aggregate", "x.npz"),
                        PosteriorSet("gaussian", x_mean, x_prec), "x", 0, plan.n_rows)
    save_posterior_file(os.path.join(run_dir, "aggregate", "w.npz"),
                        PosteriorSet("gaussian", w_mean, w_prec), "w", 0, plan.n_cols)
    _write_json(os.path.join(run_dir, "aggregate", "corrections.json"),
                {"count": len(events), "events": events})
    total = sum(s["max_seconds"] for s in stage_timings.values()) + agg_seconds
    timings = {"stages": stage_timings, "aggregation_seconds": agg_seconds,
               "total": total}
    _write_json(os.path.join(run_dir, "timings.json"), timings)
    logger.info("%s run finished (ledger total %.2fs): %s", method, total, run_dir)
    return FactorizationResult(method, x_mean, w_mean, x_prec, w_prec,
                               timings, run_dir, config, plan)


def _start_run(method, train, plan, config, run_dir):
    if plan is None:
        plan = build_plan(train, config)
    if (plan.n_rows != train.n_rows or plan.n_cols != train.n_cols
            or plan.n_row_blocks != config.partition_rows
            or plan.n_col_blocks != config.partition_cols):
        raise ValidationError("partition plan inconsistent with data or config")
    run_dir = _make_run_dir(run_dir)
    meta = config.to_dict()
    meta["method"] = method
    _write_json(os.path.join(run_dir, "run_config.json"), meta)
    plan.save(os.path.join(run_dir, "plan.json"))
    return plan, run_dir, extract_blocks(train, plan)


def run_pp(train: SparseMatrix, config: RunConfig,
           plan: PartitionPlan | None = None, run_dir=None,
           _fit_kind: str | None = None) -> FactorizationResult:
    """Three-stage pipeline with posterior handoff and per-row aggregation."""
    method = "pp"
    if _fit_kind:
        method = "full"
        config = RunConfig(**{**config.to_dict(), "approximation": _fit_kind})
    plan, run_dir, blocks = _start_run(method, train, plan, config, run_dir)
    r, c = plan.n_row_blocks, plan.n_col_blocks
    nw = config.nw_prior()
    stage_timings = {}

    stage1 = [_task_for((0, 0), blocks, plan, config, nw, run_dir, None, None)]
    stage_timings["1"] = _stage_summary(_execute_stage(stage1, config.workers))

    x00 = posterior_path(run_dir, 1, "x", 0, 0)
    w00 = posterior_path(run_dir, 1, "w", 0, 0)
    stage2 = [_task_for((i, 0), blocks, plan, config, nw, run_dir, None, w00)
              for i in range(1, r)]
    stage2 += [_task_for((0, j), blocks, plan, config, nw, run_dir, x00, None)
               for j in range(1, c)]
    if stage2:
        stage_timings["2"] = _stage_summary(_execute_stage(stage2, config.workers))

    stage3 = [_task_for((i, j), blocks, plan, config, nw, run_dir,
                        posterior_path(run_dir, 2, "x", i, 0),
                        posterior_path(run_dir, 2, "w", 0, j))
              for i in range(1, r) for j in range(1, c)]
    if stage3:
        stage_timings["3"] = _stage_summary(_execute_stage(stage3, config.workers))

    agg_start = time.perf_counter()
    events = []
    x_parts = []
    for i in range(r):
        first = load_posteriors(run_dir, stage_of(i, 0), i, 0, "x")
        others = [load_posteriors(run_dir, stage_of(i, j), i, j, "x")
                  for j in range(1, c)]
        x_parts.append(_aggregate_rows_pp(first, others, events, f"x:{i}:"))
    w_parts = []
    for j in range(c):
        first = load_posteriors(run_dir, stage_of(0, j), 0, j, "w")
        others = [load_posteriors(run_dir, stage_of(i, j), i, j, "w")
                  for i in range(1, r)]
        w_parts.append(_aggregate_rows_pp(first, others, events, f"w:{j}:"))
    agg_seconds = time.perf_counter() - agg_start
    return _finish(method, run_dir, plan, config, stage_timings, agg_seconds,
                   x_parts, w_parts, events)


def run_full(train: SparseMatrix, config: RunConfig, run_dir=None) -> FactorizationResult:
    """Single sampler run over the whole matrix (1x1 grid); reported
    posteriors are moment-matched from the chain."""
    if config.partition_rows != 1 or config.partition_cols != 1:
        raise ValidationError("run_full requires a 1x1 partition")
    return run_pp(train, config, plan=None, run_dir=run_dir, _fit_kind="mm")


def run_ep(train: SparseMatrix, config: RunConfig,
           plan: PartitionPlan | None = None, run_dir=None,
           division_prior: RowPosterior | None = None) -> FactorizationResult:
    """Independent per-block runs (no propagation), aggregated by Gaussian
    products with the multiply-counted prior divided away.

    The divided-away prior defaults to the standard normal row prior;
    subset runs themselves use the same default hyperprior setup as the
    staged pipeline, so a 1x1 grid degenerates to the identical chain.
    """
    plan, run_dir, blocks = _start_run("ep", train, plan, config, run_dir)
    r, c = plan.n_row_blocks, plan.n_col_blocks
    nw = config.nw_prior()
    if division_prior is None:
        division_prior = RowPosterior(np.zeros(config.n_factors),
                                      np.eye(config.n_factors))

    tasks = [_task_for((i, j), blocks, plan, config, nw, run_dir, None, None)
             for i in range(r) for j in range(c)]
    stage_timings = {"ep": _stage_summary(_execute_stage(tasks, config.workers))}

    agg_start = time.perf_counter()
    events = []
    x_parts = []
    for i in range(r):
        psets = [load_posteriors(run_dir, stage_of(i, j), i, j, "x") for j in range(c)]
        if c == 1:
            pooled = psets[0].pooled()
            x_parts.append((pooled.means.copy(), pooled.precisions.copy()))
        else:
            x_parts.append(_aggregate_rows_ep(psets, division_prior, events, f"x:{i}:"))
    w_parts = []
    for j in range(c):
        psets = [load_posteriors(run_dir, stage_of(i, j), i, j, "w") for i in range(r)]
        if r == 1:
            pooled = psets[0].pooled()
            w_parts.append((pooled.means.copy(), pooled.precisions.copy()))
        else:
            w_parts.append(_aggregate_rows_ep(psets, division_prior, events, f"w:{j}:"))
    agg_seconds = time.perf_counter() - agg_start
    return _finish("ep", run_dir, plan, config, stage_timings, agg_seconds,
                   x_parts, w_parts, events)


def load_chain(run_dir, i: int = 0, j: int = 0) -> SampleChain:
    """Load a persisted block chain (runs with ``save_chains`` enabled)."""
    return SampleChain.load(chain_path(run_dir, i, j))
