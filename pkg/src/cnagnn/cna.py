"""Cluster-normalize-activate stages for message-passing layers.

The stage groups node features with k-means, standardizes each cluster per
feature (no affine rescale), and applies one learnable rational function per
cluster. Any subset of the three steps can be enabled, which is what the
ablation driver exercises.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, accumulate, record_op, row_scatter, row_select
from .errors import ContractError, InitializationError, NumericError

__all__ = [
    "KMeansState",
    "RationalCoeffs",
    "CnaLayerState",
    "kmeans_fit",
    "cluster_normalize",
    "rational_forward",
    "rational_init_fit",
    "cna_apply",
    "ALL_STEPS",
]

ALL_STEPS = frozenset({"cluster", "normalize", "activate"})

NUMERATOR_DEGREE = 5
DENOMINATOR_DEGREE = 4


# ----------------------------------------------------------------------
# k-means


@dataclass
class KMeansState:
    """Result of one Lloyd fit: centroids, hard assignments, and inertia."""

    centroids: np.ndarray  # (K, d)
    assignments: np.ndarray  # (n,) int
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clip tiny negatives from cancellation.
    d2 = (
        (x * x).sum(axis=1, keepdims=True)
        - 2.0 * (x @ centroids.T)
        + (centroids * centroids).sum(axis=1)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step samples a few candidates proportionally to
    squared distance and keeps the one minimizing the resulting potential."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            picks = rng.integers(n, size=trials)
        else:
            picks = rng.choice(n, size=trials, p=d2 / total)
        best_pick, best_d2, best_total = None, None, np.inf
        for pick in picks:
            cand = np.minimum(d2, ((x - x[int(pick)]) ** 2).sum(axis=1))
            cand_total = cand.sum()
            if cand_total < best_total:
                best_pick, best_d2, best_total = int(pick), cand, cand_total
        centroids[j] = x[best_pick]
        d2 = best_d2
    return centroids


def _segment_sum(x: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    n, d = x.shape
    flat = assign[:, None] * d + np.arange(d)
    return np.bincount(flat.ravel(), weights=x.ravel(), minlength=k * d).reshape(k, d)


def _repair_empty(
    x: np.ndarray, assign: np.ndarray, centroids: np.ndarray
) -> np.ndarray:
    """Give each empty cluster the point currently farthest from its centroid.

    Victims are only taken from clusters with at least two members, so a
    seizure never creates a new empty cluster; with n >= k one always exists.
    """
    k = centroids.shape[0]
    while True:
        counts = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size == 0:
            return assign
        own_dist = ((x - centroids[assign]) ** 2).sum(axis=1)
        own_dist[counts[assign] < 2] = -np.inf
        victim = int(np.argmax(own_dist))
        assign[victim] = empties[0]
        centroids[empties[0]] = x[victim]


def kmeans_fit(
    x: np.ndarray,
    k: int,
    max_iter: int = 100,
    tol: float = 1e-4,
    seed: int | np.random.Generator | None = None,
    warm_centroids: np.ndarray | None = None,
) -> KMeansState:
    """Lloyd iterations from k-means++ (or warm) centroids.

    Stops when the assignment vector repeats, the maximum centroid shift
    drops below ``tol``, or ``max_iter`` is reached. Nearest-centroid ties
    break toward the lowest cluster index; empty clusters seize the point
    farthest from its centroid. Deterministic under ``seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("kmeans_fit expects a 2-D feature matrix")
    n = x.shape[0]
    if k < 1:
        raise ContractError("k must be at least 1")
    if n < k:
        raise ContractError(f"need at least k={k} points, got {n}")
    if max_iter < 1:
        raise ContractError("max_iter must be at least 1")
    if not np.isfinite(x).all():
        raise NumericError("kmeans_fit: non-finite features")

    if warm_centroids is not None:
        centroids = np.asarray(warm_centroids, dtype=np.float64).copy()
        if centroids.shape != (k, x.shape[1]):
            raise ContractError("warm_centroids shape must be (k, d)")
    else:
        rng = np.random.default_rng(seed)
        centroids = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    prev_assign: np.ndarray | None = None
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_distances(x, centroids)
        assign = np.argmin(d2, axis=1)
        assign = _repair_empty(x, assign, centroids)
        inertia = float(((x - centroids[assign]) ** 2).sum())
        history.append(inertia)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()
        new_centroids = _segment_sum(x, assign, k) / np.bincount(assign, minlength=k)[:, None]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            # One final assignment pass so labels match the final centroids.
            d2 = _sq_distances(x, centroids)
            assign = _repair_empty(x, np.argmin(d2, axis=1), centroids)
            history.append(float(((x - centroids[assign]) ** 2).sum()))
            break
    return KMeansState(
        centroids=centroids,
        assignments=assign.astype(np.int64),
        inertia=history[-1],
        inertia_history=history,
    )


# ----------------------------------------------------------------------
# Per-cluster standardization


def cluster_normalize(x: Tensor, assignments: np.ndarray, eps: float) -> Tensor:
    """Standardize each cluster per feature: (x - mean) / sqrt(var + eps).

    Means and population variances are taken within each cluster and feature;
    no affine rescale follows. Assignments are constants, but the backward
    rule differentiates through the cluster statistics, so gradients match
    the usual batch-norm input gradient restricted to each cluster.
    """
    if eps <= 0:
        raise ContractError("cluster_normalize: eps must be positive")
    assign = np.asarray(assignments, dtype=np.int64)
    if assign.shape != (x.rows,):
        raise ContractError("assignments must hold one cluster id per row")
    k = int(assign.max()) + 1 if assign.size else 1

    counts = np.maximum(np.bincount(assign, minlength=k), 1)[:, None].astype(np.float64)
    mu = _segment_sum(x.data, assign, k) / counts
    centered = x.data - mu[assign]
    var = _segment_sum(centered * centered, assign, k) / counts
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[assign]

    def backward_fn(grad):
        g_mean = _segment_sum(grad, assign, k) / counts
        gx_mean = _segment_sum(grad * xhat, assign, k) / counts
        accumulate(x, inv_std[assign] * (grad - g_mean[assign] - xhat * gx_mean[assign]))

    return record_op(xhat, (x,), backward_fn, "cluster_normalize")


# ----------------------------------------------------------------------
# Rational activations


@dataclass(eq=False)
class RationalCoeffs:
    """Learnable coefficients of R(x) = P(x) / (1 + |S(x)|).

    P has degree 5 (six coefficients a0..a5) and S degree 4 (four
    coefficients b1..b4, no constant term), so the denominator never drops
    below 1.
    """

    numerator: Parameter  # (1, 6)
    denominator: Parameter  # (1, 4)
    label: str = ""

    @classmethod
    def from_arrays(cls, a, b, label: str = "") -> "RationalCoeffs":
        # Copy so coefficient sets cloned from one template stay independent.
        a = np.array(a, dtype=np.float64).reshape(1, -1)
        b = np.array(b, dtype=np.float64).reshape(1, -1)
        if a.shape != (1, NUMERATOR_DEGREE + 1):
            raise ContractError(f"numerator needs {NUMERATOR_DEGREE + 1} coefficients")
        if b.shape != (1, DENOMINATOR_DEGREE):
            raise ContractError(f"denominator needs {DENOMINATOR_DEGREE} coefficients")
        return cls(
            numerator=Parameter(a, group="activation_coeffs"),
            denominator=Parameter(b, group="activation_coeffs"),
            label=label,
        )

    @classmethod
    def identity(cls, label: str = "") -> "RationalCoeffs":
        return cls.from_arrays([0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0] * 4, label)

    @classmethod
    def constant(cls, value: float, label: str = "") -> "RationalCoeffs":
        return cls.from_arrays([value, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0] * 4, label)

    def parameters(self) -> list[Parameter]:
        return [self.numerator, self.denominator]


def _poly_eval(x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    # Horner, highest degree first; coeffs[k] multiplies x^k.
    out = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        out = out * x + c
    return out


def _poly_deriv_eval(x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    deriv = coeffs[1:] * np.arange(1, len(coeffs))
    return _poly_eval(x, deriv)


def rational_forward(x: Tensor, coeffs: RationalCoeffs) -> Tensor:
    """Apply R(x) = P(x) / (1 + |S(x)|) elementwise, on the tape.

    Gradients flow to the input and to every coefficient. The absolute value
    uses subgradient 0 at S(x) = 0.
    """
    a = coeffs.numerator.data[0]
    b = coeffs.denominator.data[0]
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError(f"rational {coeffs.label or '?'}: non-finite coefficients")
    xd = x.data
    s_coeffs = np.concatenate([[0.0], b])  # S has no constant term
    p = _poly_eval(xd, a)
    s = _poly_eval(xd, s_coeffs)
    q = 1.0 + np.abs(s)
    if __debug__ and (q < 1.0).any():
        raise NumericError(f"rational {coeffs.label or '?'}: denominator below 1")
    out_data = p / q
    if not np.isfinite(out_data).all():
        raise NumericError(f"rational {coeffs.label or '?'}: non-finite output")
    sign_s = np.sign(s)

    def backward_fn(grad):
        inv_q = 1.0 / q
        g_over_q = grad * inv_q
        if x.requires_grad or x._backward is not None:
            dp = _poly_deriv_eval(xd, a)
            ds = _poly_deriv_eval(xd, s_coeffs)
            accumulate(x, g_over_q * (dp - out_data * sign_s * ds))
        coeff_seed = g_over_q  # d out / d a_k = x^k / Q
        grad_a = np.empty((1, a.size))
        power = np.ones_like(xd)
        for k in range(a.size):
            grad_a[0, k] = (coeff_seed * power).sum()
            if k + 1 < a.size:
                power = power * xd
        accumulate(coeffs.numerator, grad_a)
        den_seed = -g_over_q * out_data * sign_s  # d out / d b_k = -R sign(S) x^k / Q
        grad_b = np.empty((1, b.size))
        power = xd.copy()
        for k in range(b.size):
            grad_b[0, k] = (den_seed * power).sum()
            if k + 1 < b.size:
                power = power * xd
        accumulate(coeffs.denominator, grad_b)

    return record_op(out_data, (x, coeffs.numerator, coeffs.denominator), backward_fn, "rational")


def _leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def rational_init_fit(
    target: str = "leaky_relu",
    negative_slope: float = 0.01,
    grid: tuple[float, float] = (-3.0, 3.0),
    samples: int = 1000,
    rounds: int = 50,
) -> RationalCoeffs:
    """Fit rational coefficients to a reference activation on a uniform grid.

    Iterated linear least squares: each round linearizes P(x) ~ y (1 + S(x)),
    solves for all coefficients under 1/Q weights from the previous round
    (starting from b = 0, i.e. unit weights), then re-solves the numerator
    with the denominator fixed. Keeps the best iterate and raises if the max
    absolute error on the grid is not below 0.1.
    """
    if target != "leaky_relu":
        raise ContractError(f"unknown init target {target!r}")
    xs = np.linspace(grid[0], grid[1], samples)
    ys = _leaky_relu(xs, negative_slope)
    va = np.vander(xs, NUMERATOR_DEGREE + 1, increasing=True)  # columns x^0..x^5
    vb = np.vander(xs, DENOMINATOR_DEGREE + 1, increasing=True)[:, 1:]  # x^1..x^4

    def evaluate(a, b):
        q = 1.0 + np.abs(vb @ b)
        return (va @ a) / q

    def keep_best(a, b, best):
        err = float(np.abs(evaluate(a, b) - ys).max())
        return (err, a.copy(), b.copy()) if err < best[0] else best

    b = np.zeros(DENOMINATOR_DEGREE)
    best = (np.inf, None, None)
    for _ in range(rounds):
        q = 1.0 + np.abs(vb @ b)
        design = np.concatenate([va, -ys[:, None] * vb], axis=1) / q[:, None]
        sol, *_ = np.linalg.lstsq(design, ys / q, rcond=None)
        a, b = sol[: NUMERATOR_DEGREE + 1], sol[NUMERATOR_DEGREE + 1 :]
        best = keep_best(a, b, best)
        # Numerator polish against the actual (abs-form) denominator.
        q = 1.0 + np.abs(vb @ b)
        a, *_ = np.linalg.lstsq(va / q[:, None], ys, rcond=None)
        best = keep_best(a, b, best)
    best_err, best_a, best_b = best
    if best_err >= 0.1:
        raise InitializationError(
            f"rational fit to {target} reached max error {best_err:.4f} (need < 0.1)"
        )
    return RationalCoeffs.from_arrays(best_a, best_b, label=f"{target}_fit")


# ----------------------------------------------------------------------
# The full stage


@dataclass(eq=False)
class CnaLayerState:
    """Per-layer clustering state plus one rational per cluster.

    ``warm_start`` reuses the previous centroids across forward passes;
    ``frozen`` pins the stored assignments entirely (used by gradient checks,
    where the piecewise-constant clustering must not move).
    """

    num_clusters: int
    rationals: list[RationalCoeffs]
    eps: float = 1e-5
    warm_start: bool = True
    frozen: bool = False
    kmeans: KMeansState | None = None
    max_iter: int = 100
    tol: float = 1e-4
    # Lloyd budget for warm-started refits; small values make centroids track
    # the drifting features lazily, which keeps the cluster-to-rational
    # pairing stable across optimizer steps. Cold starts use max_iter.
    warm_refit_iters: int | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ContractError("num_clusters must be at least 1")
        if len(self.rationals) != self.num_clusters:
            raise ContractError("need exactly one rational per cluster")

    def parameters(self) -> list[Parameter]:
        return [p for r in self.rationals for p in r.parameters()]


def cna_apply(
    h: Tensor,
    state: CnaLayerState,
    mode: str = "train",
    enabled: frozenset[str] = ALL_STEPS,
) -> Tensor:
    """Run the enabled subset of cluster / normalize / activate on ``h``.

    With clustering disabled all nodes form one pseudo-cluster and a single
    shared rational is used; with everything disabled this is the identity.
    Cluster assignments are recomputed from the current features on every
    call (train and eval alike) unless the state is frozen.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    unknown = set(enabled) - ALL_STEPS
    if unknown:
        raise ContractError(f"unknown stage names: {sorted(unknown)}")

    n = h.rows
    if "cluster" in enabled:
        if state.num_clusters > n:
            raise ContractError(
                f"num_clusters={state.num_clusters} exceeds {n} nodes"
            )
        if state.frozen:
            if state.kmeans is None:
                raise ContractError("frozen state has no stored clustering")
        else:
            warm = None
            if (
                state.warm_start
                and state.kmeans is not None
                and state.kmeans.centroids.shape == (state.num_clusters, h.cols)
            ):
                warm = state.kmeans.centroids
            iters = state.max_iter
            if warm is not None and state.warm_refit_iters is not None:
                iters = state.warm_refit_iters
            state.kmeans = kmeans_fit(
                h.data,
                state.num_clusters,
                max_iter=iters,
                tol=state.tol,
                seed=state.rng,
                warm_centroids=warm,
            )
        assign = state.kmeans.assignments
    else:
        assign = np.zeros(n, dtype=np.int64)

    out = h
    if "normalize" in enabled:
        out = cluster_normalize(out, assign, state.eps)
    if "activate" in enabled:
        if "cluster" in enabled:
            parts, indices = [], []
            for k in range(state.num_clusters):
                members = np.flatnonzero(assign == k)
                if members.size == 0:
                    continue
                parts.append(rational_forward(row_select(out, members), state.rationals[k]))
                indices.append(members)
            out = row_scatter(n, parts, indices)
        else:
            out = rational_forward(out, state.rationals[0])
    return out
