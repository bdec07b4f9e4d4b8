"""Adam optimization, the full-batch training loop, and experiment drivers.

Training is transductive: one fixed graph, masked train/val/test nodes, one
gradient step per epoch. Runs are deterministic given the config and seed;
the test metric reported is the one at the best validation epoch.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Parameter, backward, no_grad
from .cna import ALL_STEPS
from .errors import ContractError, NumericError
from .graphs import (
    GraphBundle,
    SbmParams,
    generate_sbm,
    load_bundle,
    make_splits,
    split_mask,
    with_block_targets,
)
from .layers import Model, ModelConfig, model_forward, param_count
from .metrics import accuracy, cross_entropy_loss, dirichlet_energy, mse_loss, nmse

__all__ = [
    "TrainConfig",
    "AdamState",
    "Adam",
    "adam_step",
    "RunRecord",
    "train",
    "depth_sweep",
    "ablation_run",
    "SWEEP_ACTIVATIONS",
    "DEFAULT_SEEDS",
    "subset_label",
    "parse_subset",
]

SWEEP_ACTIVATIONS = ("relu", "none", "cna")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


# ----------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter, plus the step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Parameter]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Parameter],
    state: AdamState,
    lr_by_group: dict[str, float],
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    adam_eps: float = 1e-8,
) -> None:
    """One classical Adam update with coupled L2 decay and per-group rates.

    The decay term is added to the gradient before the moment updates; the
    ``weights`` and ``activation_coeffs`` groups read their own learning
    rates. Parameters with no gradient are treated as having zero gradient.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    for p, m, v in zip(params, state.m, state.v):
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            grad = grad + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = lr_by_group[p.group] * m_hat / (np.sqrt(v_hat) + adam_eps)
        if not np.isfinite(update).all():
            raise NumericError(f"adam_step: non-finite update for group {p.group!r}")
        p.data -= update


class Adam:
    """Convenience wrapper binding parameters, rates, and state together."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float,
        lr_act: float | None = None,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr_by_group = {"weights": lr, "activation_coeffs": lr_act if lr_act is not None else lr}
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(
            self.params,
            self.state,
            self.lr_by_group,
            weight_decay=self.weight_decay,
            betas=self.betas,
            adam_eps=self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ----------------------------------------------------------------------
# Configuration and run records


@dataclass
class TrainConfig:
    """Everything one training run needs; exactly one data source must be set."""

    dataset: str | None = None
    sbm: SbmParams | None = None
    arch: str = "gcn"
    num_layers: int = 2
    hidden: int = 16
    activation: str = "relu"
    clusters: int = 4
    cna_enabled: frozenset = ALL_STEPS
    epochs: int = 200
    lr: float = 1e-2
    lr_act: float = 1e-2
    weight_decay: float = 0.0
    eps: float = 1e-5
    seed: int = 0
    kmeans_refit_iters: int | None = None
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    task: str | None = None  # None: use the bundle's task
    out_dir: str | None = None
    dump_clusters: bool = False

    def validate(self) -> "TrainConfig":
        if (self.dataset is None) == (self.sbm is None):
            raise ContractError("exactly one of dataset or sbm must be given")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.lr <= 0 or self.lr_act <= 0:
            raise ContractError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.task not in (None, "classify", "regress"):
            raise ContractError(f"unknown task {self.task!r}")
        return self

    def with_(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["cna_enabled"] = sorted(self.cna_enabled)
        d["split"] = list(self.split)
        return d


@dataclass
class RunRecord:
    """Per-epoch curves plus the selected test metric and diagnostics."""

    config: dict
    metric_name: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    val_metric: float = float("nan")
    test_metric: float = float("nan")
    dirichlet_trace: list[float] = field(default_factory=list)
    param_count: int = 0
    wall_clock_sec: float = 0.0
    failed: bool = False
    failure: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _resolve_bundle(config: TrainConfig) -> GraphBundle:
    if config.dataset is not None:
        bundle = load_bundle(config.dataset)
    else:
        bundle = generate_sbm(config.sbm)
        if config.task == "regress":
            bundle = with_block_targets(bundle, seed=config.sbm.seed)
    if config.task is not None and config.task != bundle.task:
        if config.dataset is not None:
            raise ContractError(
                f"config task {config.task!r} does not match bundle task {bundle.task!r}"
            )
    if bundle.splits is None:
        bundle.splits = make_splits(bundle, config.split, seed=config.seed)
        bundle.validate()
    return bundle


def _metric(bundle: GraphBundle, out, mask: np.ndarray) -> float:
    if bundle.task == "classify":
        return accuracy(out, bundle.labels, mask)
    return nmse(out, bundle.labels, mask)


def _better(task: str, candidate: float, incumbent: float) -> bool:
    if np.isnan(incumbent):
        return True
    return candidate > incumbent if task == "classify" else candidate < incumbent


def _dump_cluster_tsvs(model: Model, out_dir: Path, epoch: int) -> None:
    target = out_dir / "clusters"
    target.mkdir(parents=True, exist_ok=True)
    for i, state in enumerate(model.cna_states):
        if state is None or state.kmeans is None:
            continue
        stem = f"epoch{epoch:04d}_layer{i}"
        (target / f"{stem}_assignments.tsv").write_text(
            "".join(f"{int(a)}\n" for a in state.kmeans.assignments)
        )
        (target / f"{stem}_centroids.tsv").write_text(
            "".join(
                "\t".join(repr(float(v)) for v in row) + "\n"
                for row in state.kmeans.centroids
            )
        )


def train(config: TrainConfig) -> RunRecord:
    """Full-batch training with per-epoch evaluation and best-val selection.

    A numeric blow-up marks the record failed instead of raising; the record
    then carries the epochs completed so far and the diagnostic message.
    """
    config.validate()
    start = time.perf_counter()
    bundle = _resolve_bundle(config)
    task = bundle.task
    metric_name = "accuracy" if task == "classify" else "nmse"

    model = Model.build(
        ModelConfig(
            arch=config.arch,
            num_layers=config.num_layers,
            hidden=config.hidden,
            activation=config.activation,
            task=task,
            num_classes=bundle.num_classes,
            clusters=config.clusters,
            eps=config.eps,
            cna_enabled=config.cna_enabled,
            kmeans_refit_iters=config.kmeans_refit_iters,
        ),
        num_features=bundle.num_features,
        seed=config.seed,
    )
    record = RunRecord(
        config=config.to_jsonable(),
        metric_name=metric_name,
        param_count=param_count(model),
    )

    masks = {name: split_mask(bundle, name) for name in ("train", "val", "test")}
    optimizer = Adam(
        model.parameters(),
        lr=config.lr,
        lr_act=config.lr_act,
        weight_decay=config.weight_decay,
    )

    def loss_fn(out):
        if task == "classify":
            return cross_entropy_loss(out, bundle.labels, masks["train"])
        return mse_loss(out, bundle.labels, masks["train"])

    out_dir = Path(config.out_dir) if config.out_dir else None
    try:
        for epoch in range(config.epochs):
            optimizer.zero_grad()
            out = model_forward(model, bundle, mode="train")
            loss = loss_fn(out)
            backward(loss)
            optimizer.step()

            with no_grad():
                eval_out = model_forward(model, bundle, mode="eval")
            row = {"epoch": epoch, "train_loss": loss.item()}
            for name in ("train", "val", "test"):
                row[f"{name}_metric"] = _metric(bundle, eval_out, masks[name])
            record.epochs.append(row)
            if _better(task, row["val_metric"], record.val_metric):
                record.best_epoch = epoch
                record.val_metric = row["val_metric"]
                record.test_metric = row["test_metric"]
            if config.dump_clusters and out_dir is not None:
                _dump_cluster_tsvs(model, out_dir, epoch)
        trace: list[np.ndarray] = []
        with no_grad():
            model_forward(model, bundle, mode="eval", trace_sink=trace)
        record.dirichlet_trace = [dirichlet_energy(bundle.edges, h) for h in trace]
    except NumericError as exc:
        record.failed = True
        record.failure = str(exc)
    record.wall_clock_sec = time.perf_counter() - start

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_record.json").write_text(record.to_json() + "\n")
        write_metrics_csv(record, out_dir / "metrics.csv")
    return record


def write_metrics_csv(record: RunRecord, path: str | Path) -> None:
    """Per-epoch curves as RFC-4180 CSV (floats via repr, so byte-stable)."""
    fields = ["epoch", "train_loss", "train_metric", "val_metric", "test_metric"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in record.epochs:
            writer.writerow(
                [row["epoch"]] + [repr(float(row[f])) for f in fields[1:]]
            )


# ----------------------------------------------------------------------
# Experiment drivers


def _final_hidden_dirichlet(record: RunRecord) -> float:
    trace = record.dirichlet_trace
    if not trace:
        return float("nan")
    return trace[-2] if len(trace) >= 2 else trace[-1]


def depth_sweep(
    config: TrainConfig,
    depths: list[int],
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    activations: tuple[str, ...] = SWEEP_ACTIVATIONS,
) -> list[dict]:
    """Train every (depth, activation, seed) combination on the same data.

    Failed runs are kept as rows with status "failed" so the sweep shape is
    predictable. Rows are sorted by (depth, activation, seed).
    """
    if not depths:
        raise ContractError("depth_sweep needs at least one depth")
    rows = []
    for depth in sorted(depths):
        for act in activations:
            for seed in seeds:
                run_cfg = config.with_(
                    num_layers=depth, activation=act, seed=seed, out_dir=None
                )
                record = train(run_cfg)
                rows.append(
                    {
                        "depth": depth,
                        "activation": act,
                        "seed": seed,
                        "status": "failed" if record.failed else "ok",
                        "test_metric": record.test_metric,
                        "final_hidden_dirichlet": _final_hidden_dirichlet(record),
                    }
                )
    rows.sort(key=lambda r: (r["depth"], r["activation"], r["seed"]))
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    fields = ["depth", "activation", "seed", "status", "test_metric", "final_hidden_dirichlet"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(
                [
                    row["depth"],
                    row["activation"],
                    row["seed"],
                    row["status"],
                    repr(float(row["test_metric"])),
                    repr(float(row["final_hidden_dirichlet"])),
                ]
            )


_LETTER = {"C": "cluster", "N": "normalize", "A": "activate"}


def subset_label(enabled: frozenset) -> str:
    label = "".join(letter for letter in "CNA" if _LETTER[letter] in enabled)
    return label or "none"


def parse_subset(label: str) -> frozenset:
    label = label.strip()
    if label.lower() in ("", "none"):
        return frozenset()
    steps = set()
    for ch in label.upper():
        if ch not in _LETTER:
            raise ContractError(f"unknown ablation letter {ch!r} in {label!r}")
        steps.add(_LETTER[ch])
    return frozenset(steps)


def ablation_run(
    config: TrainConfig,
    enabled_sets: list[frozenset],
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
) -> list[dict]:
    """Mean and std of the test metric per enabled-step subset.

    Every subset trains with activation="cna" and the given steps switched
    on, so the empty subset reproduces the activation-free baseline exactly.
    """
    rows = []
    for enabled in enabled_sets:
        metrics = []
        for seed in seeds:
            run_cfg = config.with_(
                activation="cna", cna_enabled=frozenset(enabled), seed=seed, out_dir=None
            )
            record = train(run_cfg)
            if record.failed:
                warnings.warn(f"ablation run failed for {subset_label(enabled)}: {record.failure}")
                metrics.append(float("nan"))
            else:
                metrics.append(record.test_metric)
        arr = np.array(metrics)
        rows.append(
            {
                "subset": subset_label(frozenset(enabled)),
                "mean_metric": float(np.nanmean(arr)),
                "std_metric": float(np.nanstd(arr)),
                "num_seeds": len(seeds),
            }
        )
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "mean_metric", "std_metric", "num_seeds"])
        for row in rows:
            writer.writerow(
                [
                    row["subset"],
                    repr(float(row["mean_metric"])),
                    repr(float(row["std_metric"])),
                    row["num_seeds"],
                ]
            )
