"""Sparse observation matrices: loading, simulation, splitting, ordering, partitioning.

All functions are pure given their inputs; randomness always flows through an
explicit integer seed, so repeated calls are bitwise reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactError, TripletParseError, ValidationError

logger = logging.getLogger(__name__)

# Endpoints of the decreasing weight sequences used by the structured
# missingness scenario (one sequence per axis, linearly spaced).
STRUCTURED_WEIGHT_HIGH = 0.9
STRUCTURED_WEIGHT_LOW = 0.005


@dataclass
class SparseMatrix:
    """Observed entries of an ``n_rows x n_cols`` matrix in coordinate form.

    Entries are stored as three parallel arrays (row index, column index,
    value).  Every (row, col) pair appears at most once; indices are
    0-based and in range.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    # Original identifiers when indices were compacted (e.g. MovieLens ids);
    # row_ids[i] is the source id of compacted row index i.
    row_ids: np.ndarray | None = None
    col_ids: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.vals.shape):
            raise ValidationError("rows, cols and vals must have equal length")
        if self.rows.ndim != 1:
            raise ValidationError("entry arrays must be 1-D")
        if self.n_rows < 0 or self.n_cols < 0:
            raise ValidationError("matrix dimensions must be nonnegative")
        if self.m:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ValidationError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ValidationError("column index out of range")
            keys = self.rows * self.n_cols + self.cols
            if np.unique(keys).size != keys.size:
                raise ValidationError("duplicate (row, col) entries")

    @property
    def m(self) -> int:
        """Number of observed entries."""
        return self.rows.size

    def row_counts(self) -> np.ndarray:
        """Observation count per row."""
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    def to_dense(self, fill=np.nan) -> np.ndarray:
        """Dense copy with ``fill`` in unobserved cells.  Test-sized inputs only."""
        out = np.full((self.n_rows, self.n_cols), fill, dtype=np.float64)
        out[self.rows, self.cols] = self.vals
        return out

    def checksum(self) -> float:
        """Order-independent checksum over entries (used by partition tests)."""
        return float(np.sum(self.vals * (self.rows * self.n_cols + self.cols + 1.0)))


@dataclass
class GroundTruth:
    """Factors and noise precision behind a simulated matrix."""

    x_true: np.ndarray
    w_true: np.ndarray
    tau: float


@dataclass
class PartitionPlan:
    """An r x c grid over the permuted matrix.

    ``row_perm[new] = old``: position ``new`` of the permuted matrix holds
    original row ``old``.  ``row_cuts`` has r+1 strictly increasing entries
    with ``row_cuts[0] == 0`` and ``row_cuts[-1] == n_rows``; block (i, j)
    covers permuted rows ``[row_cuts[i], row_cuts[i+1])`` and columns
    ``[col_cuts[j], col_cuts[j+1])``.
    """

    row_perm: np.ndarray
    col_perm: np.ndarray
    row_cuts: np.ndarray
    col_cuts: np.ndarray

    def __post_init__(self):
        self.row_perm = np.asarray(self.row_perm, dtype=np.int64)
        self.col_perm = np.asarray(self.col_perm, dtype=np.int64)
        self.row_cuts = np.asarray(self.row_cuts, dtype=np.int64)
        self.col_cuts = np.asarray(self.col_cuts, dtype=np.int64)
        for perm, n, name in ((self.row_perm, self.n_rows, "row"),
                              (self.col_perm, self.n_cols, "col")):
            if not np.array_equal(np.sort(perm), np.arange(n)):
                raise ValidationError(f"{name}_perm is not a permutation")
        for cuts, n, name in ((self.row_cuts, self.n_rows, "row"),
                              (self.col_cuts, self.n_cols, "col")):
            if cuts[0] != 0 or cuts[-1] != n or np.any(np.diff(cuts) <= 0):
                raise ValidationError(f"{name}_cuts must be strictly increasing from 0 to {n}")

    @property
    def n_rows(self) -> int:
        return self.row_perm.size

    @property
    def n_cols(self) -> int:
        return self.col_perm.size

    @property
    def n_row_blocks(self) -> int:
        return self.row_cuts.size - 1

    @property
    def n_col_blocks(self) -> int:
        return self.col_cuts.size - 1

    def inverse_perms(self) -> tuple[np.ndarray, np.ndarray]:
        """Maps from original index to permuted position, for both axes."""
        inv_r = np.empty_like(self.row_perm)
        inv_r[self.row_perm] = np.arange(self.n_rows)
        inv_c = np.empty_like(self.col_perm)
        inv_c[self.col_perm] = np.arange(self.n_cols)
        return inv_r, inv_c

    def row_range(self, i: int) -> tuple[int, int]:
        return int(self.row_cuts[i]), int(self.row_cuts[i + 1])

    def col_range(self, j: int) -> tuple[int, int]:
        return int(self.col_cuts[j]), int(self.col_cuts[j + 1])

    def to_json(self) -> str:
        return json.dumps({
            "row_perm": self.row_perm.tolist(),
            "col_perm": self.col_perm.tolist(),
            "row_cuts": self.row_cuts.tolist(),
            "col_cuts": self.col_cuts.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        return cls(np.array(doc["row_perm"]), np.array(doc["col_perm"]),
                   np.array(doc["row_cuts"]), np.array(doc["col_cuts"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# Loading and saving triplet files
# ---------------------------------------------------------------------------

def _open_data(path):
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot read data file {path}: {exc}") from exc


def load_triplets(path, fmt: str = "plain") -> SparseMatrix:
    """Read a sparse matrix from disk.

    ``plain``: one ``row col value`` per line (whitespace or commas),
    0-based indices, ``#`` comment lines and blank lines ignored.
    Dimensions are inferred as max index + 1.

    ``movielens-dat``: ``user::item::rating::timestamp`` with 1-based ids;
    ids are compacted to dense 0-based indices (sorted id order) and the
    id maps are attached as ``row_ids`` / ``col_ids``.
    """
    if fmt == "plain":
        return _load_plain(path)
    if fmt == "movielens-dat":
        return _load_movielens(path)
    raise ValidationError(f"unknown triplet format: {fmt!r}")


def _load_plain(path) -> SparseMatrix:
    rows, cols, vals = [], [], []
    with _open_data(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.replace(",", " ").split()
            if len(parts) != 3:
                raise TripletParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise TripletParseError(path, lineno, str(exc)) from exc
            if r < 0 or c < 0:
                raise TripletParseError(path, lineno, "negative index")
            rows.append(r)
            cols.append(c)
            vals.append(v)
    n_rows = max(rows) + 1 if rows else 0
    n_cols = max(cols) + 1 if cols else 0
    mat = SparseMatrix(n_rows, n_cols, np.array(rows, dtype=np.int64),
                       np.array(cols, dtype=np.int64), np.array(vals))
    logger.info("loaded %s: %d x %d with %d entries", path, mat.n_rows, mat.n_cols, mat.m)
    return mat


def _load_movielens(path) -> SparseMatrix:
    users, items, ratings = [], [], []
    with _open_data(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split("::")
            if len(parts) != 4:
                raise TripletParseError(path, lineno, f"expected 4 '::' fields, got {len(parts)}")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                ratings.append(float(parts[2]))
            except ValueError as exc:
                raise TripletParseError(path, lineno, str(exc)) from exc
    if not users:
        return SparseMatrix(0, 0, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    user_ids, rows = np.unique(np.array(users, dtype=np.int64), return_inverse=True)
    item_ids, cols = np.unique(np.array(items, dtype=np.int64), return_inverse=True)
    mat = SparseMatrix(user_ids.size, item_ids.size, rows, cols, np.array(ratings),
                       row_ids=user_ids, col_ids=item_ids)
    logger.info("loaded %s: %d x %d with %d entries (ids compacted)",
                path, mat.n_rows, mat.n_cols, mat.m)
    return mat


def save_triplets(matrix: SparseMatrix, path) -> None:
    """Write in the plain triplet format (lossless for float64 values)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {matrix.n_rows} x {matrix.n_cols}, {matrix.m} entries\n")
        for r, c, v in zip(matrix.rows, matrix.cols, matrix.vals):
            fh.write(f"{r} {c} {float(v)!r}\n")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate(n_rows: int, n_cols: int, n_factors: int, tau: float,
             seed: int) -> tuple[SparseMatrix, GroundTruth]:
    """Fully observed low-rank matrix plus Gaussian noise of precision ``tau``.

    Factor entries are standard normal; the draw order (X, then W, then
    noise) is fixed so results are bitwise deterministic per seed.
    """
    if n_rows < 1 or n_cols < 1 or n_factors < 1:
        raise ValidationError("n_rows, n_cols and n_factors must be >= 1")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal((n_rows, n_factors))
    w_true = rng.standard_normal((n_cols, n_factors))
    y = x_true @ w_true.T
    y += rng.standard_normal((n_rows, n_cols)) * (tau ** -0.5)
    rows = np.repeat(np.arange(n_rows, dtype=np.int64), n_cols)
    cols = np.tile(np.arange(n_cols, dtype=np.int64), n_rows)
    mat = SparseMatrix(n_rows, n_cols, rows, cols, y.ravel())
    return mat, GroundTruth(x_true, w_true, float(tau))


# ---------------------------------------------------------------------------
# Train/test splitting
# ---------------------------------------------------------------------------

def _subset(matrix: SparseMatrix, mask: np.ndarray) -> SparseMatrix:
    return SparseMatrix(matrix.n_rows, matrix.n_cols,
                        matrix.rows[mask], matrix.cols[mask], matrix.vals[mask],
                        row_ids=matrix.row_ids, col_ids=matrix.col_ids)


def split_random(matrix: SparseMatrix, test_fraction: float,
                 seed: int) -> tuple[SparseMatrix, SparseMatrix]:
    """Withhold ``floor(test_fraction * m)`` uniformly chosen entries as test."""
    if matrix.m < 2:
        raise ValidationError("need at least 2 entries to split")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must lie in (0, 1)")
    n_test = int(test_fraction * matrix.m)
    order = np.random.default_rng(seed).permutation(matrix.m)
    mask = np.zeros(matrix.m, dtype=bool)
    mask[order[:n_test]] = True
    return _subset(matrix, ~mask), _subset(matrix, mask)


def structured_weights(n: int) -> np.ndarray:
    """Equally spaced decreasing weights from 0.9 down to 0.005."""
    if n == 1:
        return np.array([STRUCTURED_WEIGHT_HIGH])
    return np.linspace(STRUCTURED_WEIGHT_HIGH, STRUCTURED_WEIGHT_LOW, n)


def structured_rescale_factor(probs: np.ndarray, target_fraction: float) -> float:
    """Scale factor s such that mean(min(1, s * probs)) == target_fraction.

    Solved by bisection; the expected fraction is continuous and
    nondecreasing in s and saturates at 1, so a root exists whenever
    ``target_fraction < 1`` and some prob is positive.
    """
    if not 0.0 < target_fraction < 1.0:
        raise ValidationError("target_fraction must lie in (0, 1)")
    if probs.size == 0 or probs.max() <= 0:
        raise ValidationError("no positive assignment probabilities")

    def frac(s):
        return float(np.minimum(1.0, s * probs).mean())

    lo, hi = 0.0, 1.0
    while frac(hi) < target_fraction:
        hi *= 2.0
        if hi > 1e12:
            raise ValidationError("target fraction unattainable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target_fraction:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def split_structured(matrix: SparseMatrix, seed: int, mode: str = "raw",
                     target_fraction: float = 0.8) -> tuple[SparseMatrix, SparseMatrix]:
    """Assign entry (n, d) to the test set with probability w_n * w_d.

    Both axis weight sequences decrease linearly from 0.9 to 0.005, so rows
    and columns early in the index order lose the most data.  With the raw
    weights the expected test fraction equals the product of the two weight
    means (about 0.205 for long sequences).  ``mode="rescaled"`` multiplies
    the products by a bisection-derived factor so the expected fraction hits
    ``target_fraction`` (probabilities clipped at 1).
    """
    if matrix.m == 0:
        raise ValidationError("cannot split an empty matrix")
    w_row = structured_weights(matrix.n_rows)
    w_col = structured_weights(matrix.n_cols)
    probs = w_row[matrix.rows] * w_col[matrix.cols]
    if mode == "rescaled":
        probs = np.minimum(1.0, structured_rescale_factor(probs, target_fraction) * probs)
    elif mode != "raw":
        raise ValidationError(f"unknown structured-missingness mode: {mode!r}")
    mask = np.random.default_rng(seed).random(matrix.m) < probs
    realized = float(mask.mean())
    logger.info("structured split (%s): realized test fraction %.4f", mode, realized)
    return _subset(matrix, ~mask), _subset(matrix, mask)


# ---------------------------------------------------------------------------
# Ordering and partitioning
# ---------------------------------------------------------------------------

def order_matrix(matrix: SparseMatrix, scheme: str,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row/column permutations for partitioning; ``perm[new] = old``.

    ``decreasing`` sorts each axis by observation count, densest first,
    ties broken by ascending original index.  ``random`` permutes uniformly.
    ``none`` returns identity permutations.
    """
    if scheme == "none":
        return (np.arange(matrix.n_rows, dtype=np.int64),
                np.arange(matrix.n_cols, dtype=np.int64))
    if scheme == "random":
        rng = np.random.default_rng(seed)
        return (rng.permutation(matrix.n_rows).astype(np.int64),
                rng.permutation(matrix.n_cols).astype(np.int64))
    if scheme == "decreasing":
        def by_count(counts):
            return np.lexsort((np.arange(counts.size), -counts)).astype(np.int64)
        return by_count(matrix.row_counts()), by_count(matrix.col_counts())
    raise ValidationError(f"unknown ordering scheme: {scheme!r}")


def partition(matrix: SparseMatrix, perms: tuple[np.ndarray, np.ndarray],
              n_row_blocks: int, n_col_blocks: int) -> PartitionPlan:
    """Tile the permuted matrix into an r x c grid of near-equal blocks.

    When the axis size is not divisible, the remainder is spread one
    row/column at a time over the leading blocks.
    """
    row_perm, col_perm = perms
    if not 1 <= n_row_blocks <= matrix.n_rows:
        raise ValidationError(f"need 1 <= r <= {matrix.n_rows}, got {n_row_blocks}")
    if not 1 <= n_col_blocks <= matrix.n_cols:
        raise ValidationError(f"need 1 <= c <= {matrix.n_cols}, got {n_col_blocks}")
    return PartitionPlan(row_perm, col_perm,
                         _cuts(matrix.n_rows, n_row_blocks),
                         _cuts(matrix.n_cols, n_col_blocks))


def _cuts(n: int, blocks: int) -> np.ndarray:
    sizes = np.full(blocks, n // blocks, dtype=np.int64)
    sizes[: n % blocks] += 1
    return np.concatenate(([0], np.cumsum(sizes)))
