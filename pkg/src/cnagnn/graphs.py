"""Graph ingestion, adjacency preprocessing, splits, and synthetic data.

Bundle directory format (all files tab separated, node order = index order):

- ``meta.json``: ``{"num_nodes": int, "num_features": int, "task":
  "classify"|"regress", "num_classes": int (classify only)}``
- ``edges.tsv``: one undirected edge per line, ``src<TAB>dst``, 0-based
- ``features.tsv``: one node per line, ``num_features`` floats
- ``labels.tsv``: one value per line (int class or float target)
- ``splits.tsv`` (optional): one token per line in {train, val, test}
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, IngestionError, ValidationError

__all__ = [
    "GraphBundle",
    "CsrAdjacency",
    "SbmParams",
    "load_bundle",
    "write_bundle",
    "gcn_normalize",
    "mean_neighbor_adjacency",
    "node_homophily",
    "generate_sbm",
    "with_block_targets",
    "make_splits",
    "split_mask",
]

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class GraphBundle:
    """One undirected graph with node features, targets, and optional splits."""

    num_nodes: int
    num_features: int
    task: str  # "classify" | "regress"
    features: np.ndarray  # (num_nodes, num_features) float64
    edges: np.ndarray  # (E, 2) int64, i < j, each undirected edge once
    labels: np.ndarray  # int64 classes or float64 targets, shape (num_nodes,)
    num_classes: int | None = None
    splits: np.ndarray | None = None  # (num_nodes,) of {train,val,test}

    def validate(self) -> "GraphBundle":
        if self.task not in ("classify", "regress"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.features.shape != (self.num_nodes, self.num_features):
            raise ValidationError(
                f"features shape {self.features.shape} does not match "
                f"({self.num_nodes}, {self.num_features})"
            )
        if self.labels.shape != (self.num_nodes,):
            raise ValidationError("labels must hold one value per node")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.num_nodes:
                raise ValidationError("edge endpoint out of range")
            if (self.edges[:, 0] == self.edges[:, 1]).any():
                raise ValidationError("self-loops are not stored")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ValidationError("duplicate edges are not stored")
        if self.task == "classify":
            if self.num_classes is None or self.num_classes < 1:
                raise ValidationError("classify bundles need num_classes >= 1")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValidationError("class label out of range")
        if self.splits is not None:
            if self.splits.shape != (self.num_nodes,):
                raise ValidationError("splits must hold one tag per node")
            for name in SPLIT_NAMES:
                if not (self.splits == name).any():
                    raise ValidationError(f"split {name!r} is empty")
        return self

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def split_mask(bundle: GraphBundle, name: str) -> np.ndarray:
    """Boolean node mask for one of the train/val/test splits."""
    if name not in SPLIT_NAMES:
        raise ContractError(f"unknown split {name!r}")
    if bundle.splits is None:
        raise ContractError("bundle has no splits attached")
    return bundle.splits == name


@dataclass(eq=False)
class CsrAdjacency:
    """Compressed sparse row matrix over the node set (column indices sorted)."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    _scipy: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _scipy_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def to_scipy(self) -> sp.csr_matrix:
        if self._scipy is None:
            self._scipy = sp.csr_matrix(
                (self.values, self.indices, self.indptr),
                shape=(self.num_nodes, self.num_nodes),
            )
        return self._scipy

    def transpose_scipy(self) -> sp.csr_matrix:
        if self._scipy_t is None:
            self._scipy_t = self.to_scipy().T.tocsr()
        return self._scipy_t

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


def _csr_from_coo(n: int, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> CsrAdjacency:
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return CsrAdjacency(n, indptr, cols.astype(np.int64), vals.astype(np.float64))


def _degrees(num_nodes: int, edges: np.ndarray) -> np.ndarray:
    deg = np.zeros(num_nodes, dtype=np.int64)
    if edges.size:
        deg += np.bincount(edges[:, 0], minlength=num_nodes)
        deg += np.bincount(edges[:, 1], minlength=num_nodes)
    return deg


def gcn_normalize(bundle: GraphBundle) -> CsrAdjacency:
    """Symmetrically normalized adjacency with self-loops.

    Entry (i, j) of the result is 1/sqrt((1+d_i)(1+d_j)) for each edge and for
    the diagonal, with d the degree before self-loops. Isolated nodes get a
    diagonal 1. The output is exactly symmetric.
    """
    n = bundle.num_nodes
    deg = _degrees(n, bundle.edges)
    inv_sqrt = 1.0 / np.sqrt(1.0 + deg)
    loops = np.arange(n, dtype=np.int64)
    if bundle.edges.size:
        e = bundle.edges
        rows = np.concatenate([e[:, 0], e[:, 1], loops])
        cols = np.concatenate([e[:, 1], e[:, 0], loops])
    else:
        rows = cols = loops
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    return _csr_from_coo(n, rows, cols, vals)


def mean_neighbor_adjacency(bundle: GraphBundle) -> CsrAdjacency:
    """Row-stochastic neighbor averaging matrix (no self-loops).

    Rows of isolated nodes are empty, so their neighbor mean is zero.
    """
    n = bundle.num_nodes
    if not bundle.edges.size:
        return _csr_from_coo(
            n, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64)
        )
    deg = _degrees(n, bundle.edges)
    e = bundle.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    vals = 1.0 / deg[rows]
    return _csr_from_coo(n, rows, cols, vals)


def node_homophily(bundle: GraphBundle) -> float:
    """Mean over non-isolated nodes of the fraction of same-label neighbors."""
    if bundle.task != "classify":
        raise ContractError("node_homophily is defined for classification bundles")
    n = bundle.num_nodes
    deg = _degrees(n, bundle.edges)
    same = np.zeros(n, dtype=np.float64)
    if bundle.edges.size:
        y = bundle.labels
        match = (y[bundle.edges[:, 0]] == y[bundle.edges[:, 1]]).astype(np.float64)
        np.add.at(same, bundle.edges[:, 0], match)
        np.add.at(same, bundle.edges[:, 1], match)
    keep = deg > 0
    if not keep.any():
        return 0.0
    return float(np.mean(same[keep] / deg[keep]))


# ----------------------------------------------------------------------
# Bundle directory I/O


def _canonical_edges(pairs: np.ndarray) -> np.ndarray:
    """Orient pairs low-high, drop duplicates, sort lexicographically."""
    if pairs.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    lo = pairs.min(axis=1)
    hi = pairs.max(axis=1)
    canon = np.stack([lo, hi], axis=1)
    return np.unique(canon, axis=0)


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise IngestionError(f"missing file: {path.name}")
    text = path.read_text()
    lines = text.splitlines()
    return [ln for ln in lines if ln.strip() != ""]


def load_bundle(path: str | Path) -> GraphBundle:
    """Read a bundle directory, deduplicating edges and validating contents."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise IngestionError(f"missing file: {meta_path.name}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"meta.json is not valid JSON: {exc}") from exc
    try:
        n = int(meta["num_nodes"])
        d = int(meta["num_features"])
        task = str(meta["task"])
    except KeyError as exc:
        raise ValidationError(f"meta.json is missing key {exc}") from exc
    if task not in ("classify", "regress"):
        raise ValidationError(f"meta.json: unknown task {task!r}")
    num_classes = int(meta["num_classes"]) if task == "classify" else None

    raw_edges = []
    for ln, line in enumerate(_read_lines(root / "edges.tsv"), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"edges.tsv line {ln}: expected 'src<TAB>dst'")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(f"edges.tsv line {ln}: endpoints must be integers")
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"edges.tsv line {ln}: endpoint out of range")
        if i == j:
            raise ValidationError(f"edges.tsv line {ln}: self-loop not allowed")
        raw_edges.append((i, j))
    edges = _canonical_edges(np.array(raw_edges, dtype=np.int64).reshape(-1, 2))

    feat_lines = _read_lines(root / "features.tsv")
    if len(feat_lines) != n:
        raise ValidationError(f"features.tsv: expected {n} lines, found {len(feat_lines)}")
    features = np.empty((n, d), dtype=np.float64)
    for ln, line in enumerate(feat_lines, start=1):
        parts = line.split("\t")
        if len(parts) != d:
            raise ValidationError(f"features.tsv line {ln}: expected {d} values")
        try:
            features[ln - 1] = [float(v) for v in parts]
        except ValueError:
            raise ValidationError(f"features.tsv line {ln}: non-numeric value")

    label_lines = _read_lines(root / "labels.tsv")
    if len(label_lines) != n:
        raise ValidationError(f"labels.tsv: expected {n} lines, found {len(label_lines)}")
    if task == "classify":
        labels = np.empty(n, dtype=np.int64)
        for ln, line in enumerate(label_lines, start=1):
            try:
                v = int(line.strip())
            except ValueError:
                raise ValidationError(f"labels.tsv line {ln}: expected an integer class")
            if not (0 <= v < num_classes):
                raise ValidationError(f"labels.tsv line {ln}: label {v} out of range")
            labels[ln - 1] = v
    else:
        labels = np.empty(n, dtype=np.float64)
        for ln, line in enumerate(label_lines, start=1):
            try:
                labels[ln - 1] = float(line.strip())
            except ValueError:
                raise ValidationError(f"labels.tsv line {ln}: expected a float target")

    splits = None
    splits_path = root / "splits.tsv"
    if splits_path.is_file():
        split_lines = _read_lines(splits_path)
        if len(split_lines) != n:
            raise ValidationError(f"splits.tsv: expected {n} lines, found {len(split_lines)}")
        splits = np.empty(n, dtype="<U5")
        for ln, line in enumerate(split_lines, start=1):
            token = line.strip()
            if token not in SPLIT_NAMES:
                raise ValidationError(f"splits.tsv line {ln}: unknown tag {token!r}")
            splits[ln - 1] = token

    bundle = GraphBundle(
        num_nodes=n,
        num_features=d,
        task=task,
        features=features,
        edges=edges,
        labels=labels,
        num_classes=num_classes,
        splits=splits,
    )
    return bundle.validate()


def write_bundle(bundle: GraphBundle, path: str | Path) -> None:
    """Write a bundle directory that :func:`load_bundle` reads back verbatim."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": bundle.num_nodes,
        "num_features": bundle.num_features,
        "task": bundle.task,
    }
    if bundle.task == "classify":
        meta["num_classes"] = bundle.num_classes
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    (root / "edges.tsv").write_text(
        "".join(f"{i}\t{j}\n" for i, j in bundle.edges)
    )
    (root / "features.tsv").write_text(
        "".join("\t".join(repr(float(v)) for v in row) + "\n" for row in bundle.features)
    )
    if bundle.task == "classify":
        (root / "labels.tsv").write_text("".join(f"{int(v)}\n" for v in bundle.labels))
    else:
        (root / "labels.tsv").write_text("".join(f"{repr(float(v))}\n" for v in bundle.labels))
    if bundle.splits is not None:
        (root / "splits.tsv").write_text("".join(f"{t}\n" for t in bundle.splits))


# ----------------------------------------------------------------------
# Synthetic stochastic block model graphs


@dataclass
class SbmParams:
    """Balanced stochastic block model with Gaussian block-mean features."""

    num_nodes: int
    num_blocks: int
    p_in: float
    p_out: float
    feature_dim: int
    block_mean_separation: float = 3.0
    feature_noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> "SbmParams":
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ContractError("need 0 <= p_out <= p_in <= 1")
        if self.num_blocks < 1 or self.num_nodes % self.num_blocks != 0:
            raise ContractError("num_blocks must divide num_nodes evenly")
        if self.feature_dim < self.num_blocks:
            raise ContractError("feature_dim must be >= num_blocks (one mean axis per block)")
        return self


def generate_sbm(params: SbmParams) -> GraphBundle:
    """Sample a labeled, feature-attributed block-model graph.

    Blocks are contiguous index ranges of equal size. Block b's feature mean
    sits at ``block_mean_separation`` along coordinate axis b; features add
    isotropic Gaussian noise with ``feature_noise_sigma``. Deterministic under
    ``params.seed``.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    n, b = params.num_nodes, params.num_blocks
    labels = np.arange(n, dtype=np.int64) // (n // b)

    iu, ju = np.triu_indices(n, k=1)
    same_block = labels[iu] == labels[ju]
    prob = np.where(same_block, params.p_in, params.p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)

    means = np.zeros((b, params.feature_dim))
    means[np.arange(b), np.arange(b)] = params.block_mean_separation
    features = means[labels] + params.feature_noise_sigma * rng.standard_normal(
        (n, params.feature_dim)
    )

    bundle = GraphBundle(
        num_nodes=n,
        num_features=params.feature_dim,
        task="classify",
        features=features,
        edges=edges,
        labels=labels,
        num_classes=b,
    )
    return bundle.validate()


def with_block_targets(
    bundle: GraphBundle,
    low: float = 1e-5,
    high: float = 1.0,
    noise_sigma: float = 0.01,
    seed: int = 0,
) -> GraphBundle:
    """Turn a classification bundle into a multi-scale regression one.

    Block k's target is the k-th point of a geometric ladder from ``low`` to
    ``high``; node targets add Gaussian noise scaled by ``noise_sigma`` times
    the block target.
    """
    if bundle.task != "classify":
        raise ContractError("with_block_targets needs a classification bundle")
    rng = np.random.default_rng(seed)
    k = bundle.num_classes
    ladder = np.geomspace(low, high, k)
    base = ladder[bundle.labels]
    targets = base + noise_sigma * base * rng.standard_normal(bundle.num_nodes)
    return GraphBundle(
        num_nodes=bundle.num_nodes,
        num_features=bundle.num_features,
        task="regress",
        features=bundle.features.copy(),
        edges=bundle.edges.copy(),
        labels=targets,
        num_classes=None,
        splits=None if bundle.splits is None else bundle.splits.copy(),
    ).validate()


# ----------------------------------------------------------------------
# Train/val/test splits


def _allocate(count: int, fractions: tuple[float, float, float]) -> list[int]:
    # Floor allocation, then hand leftovers to the largest fractional remainders.
    raw = [f * count for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    leftover = count - sum(counts)
    for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[idx] += 1
    return counts


def make_splits(
    bundle: GraphBundle,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> np.ndarray:
    """Assign every node a train/val/test tag, stratified by class.

    Classification bundles are split per class so proportions hold within one
    node; if any class has fewer than 3 members it falls back to a single
    unstratified shuffle and warns. Deterministic under ``seed``.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ContractError("three positive split fractions required")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must sum to 1, got {sum(fractions)}")
    if bundle.num_nodes < 3:
        raise ContractError("need at least 3 nodes to split")
    rng = np.random.default_rng(seed)
    tags = np.empty(bundle.num_nodes, dtype="<U5")

    stratify = bundle.task == "classify"
    if stratify:
        class_counts = np.bincount(bundle.labels, minlength=bundle.num_classes)
        if (class_counts[class_counts > 0] < 3).any():
            warnings.warn(
                "a class has fewer than 3 members; falling back to an unstratified split",
                stacklevel=2,
            )
            stratify = False

    if stratify:
        for c in range(bundle.num_classes):
            members = np.flatnonzero(bundle.labels == c)
            rng.shuffle(members)
            n_train, n_val, _ = _allocate(len(members), tuple(fractions))
            tags[members[:n_train]] = "train"
            tags[members[n_train : n_train + n_val]] = "val"
            tags[members[n_train + n_val :]] = "test"
    else:
        order = rng.permutation(bundle.num_nodes)
        n_train, n_val, _ = _allocate(bundle.num_nodes, tuple(fractions))
        tags[order[:n_train]] = "train"
        tags[order[n_train : n_train + n_val]] = "val"
        tags[order[n_train + n_val :]] = "test"

    # Guarantee every split is populated (tiny graphs with skewed fractions).
    for name in SPLIT_NAMES:
        if not (tags == name).any():
            donor = max(SPLIT_NAMES, key=lambda s: (tags == s).sum())
            tags[np.flatnonzero(tags == donor)[0]] = name
    return tags
