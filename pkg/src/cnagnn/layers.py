"""Message-passing layers (GCN, GraphSAGE) and model assembly.

A model is a stack of layers; after every layer except the last, the
configured activation stage runs (nothing, ReLU, or a cluster-normalize-
activate stage). The final layer emits raw logits or scalar predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Parameter, Tensor, accumulate, add, matmul, record_op, relu, repeat_rows
from .cna import ALL_STEPS, CnaLayerState, RationalCoeffs, cna_apply, rational_init_fit
from .errors import ContractError, DimensionError
from .graphs import CsrAdjacency, GraphBundle, gcn_normalize, mean_neighbor_adjacency

__all__ = [
    "GcnLayer",
    "SageLayer",
    "ModelConfig",
    "Model",
    "model_forward",
    "param_count",
    "spmm",
    "glorot_uniform",
]

ARCHS = ("gcn", "sage")
ACTIVATIONS = ("none", "relu", "cna")


def spmm(adj: CsrAdjacency, h: Tensor) -> Tensor:
    """Sparse-dense product adj @ h on the tape; the adjacency is a constant."""
    if adj.num_nodes != h.rows:
        raise DimensionError(f"spmm: adjacency is {adj.num_nodes} nodes, features {h.rows}")
    mat = adj.to_scipy()

    def backward_fn(grad):
        accumulate(h, adj.transpose_scipy() @ grad)

    return record_op(np.asarray(mat @ h.data), (h,), backward_fn, "spmm")


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class GcnLayer:
    """Graph convolution: (normalized adjacency) @ h @ W + bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Parameter(glorot_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros((1, d_out)))

    def forward(self, adj: CsrAdjacency, h: Tensor) -> Tensor:
        out = matmul(spmm(adj, h), self.weight)
        return add(out, repeat_rows(self.bias, out.rows))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class SageLayer:
    """GraphSAGE: h @ W_self + mean_neighbors(h) @ W_neigh + bias.

    Isolated nodes contribute a zero neighbor mean.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight_self = Parameter(glorot_uniform(rng, d_in, d_out))
        self.weight_neigh = Parameter(glorot_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros((1, d_out)))

    def forward(self, adj: CsrAdjacency, h: Tensor) -> Tensor:
        out = add(matmul(h, self.weight_self), matmul(spmm(adj, h), self.weight_neigh))
        return add(out, repeat_rows(self.bias, out.rows))

    def parameters(self) -> list[Parameter]:
        return [self.weight_self, self.weight_neigh, self.bias]


@dataclass
class ModelConfig:
    """Shape and activation-stage options for a node-level model."""

    arch: str = "gcn"
    num_layers: int = 2
    hidden: int = 16
    activation: str = "relu"
    task: str = "classify"
    num_classes: int | None = None
    clusters: int = 4
    numerator_degree: int = 5
    denominator_degree: int = 4
    eps: float = 1e-5
    cna_enabled: frozenset = ALL_STEPS
    kmeans_refit_iters: int | None = None  # Lloyd budget for warm refits

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ContractError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        if self.num_layers < 1:
            raise ContractError("num_layers must be at least 1")
        if self.hidden < 1:
            raise ContractError("hidden width must be at least 1")
        if self.task == "classify":
            if self.num_classes is None or self.num_classes < 2:
                raise ContractError("classification needs num_classes >= 2")
        elif self.task != "regress":
            raise ContractError(f"unknown task {self.task!r}")
        if self.activation == "cna" and self.clusters < 1:
            raise ContractError("cna needs at least one cluster")
        if set(self.cna_enabled) - ALL_STEPS:
            raise ContractError(f"unknown cna stages in {sorted(self.cna_enabled)}")
        return self

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classify" else 1

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


class Model:
    """An ordered layer stack with per-layer activation state."""

    def __init__(self, config: ModelConfig, layers, cna_states):
        self.config = config
        self.layers = layers
        self.cna_states: list[CnaLayerState | None] = cna_states
        self._prepared_for: GraphBundle | None = None
        self._adj: CsrAdjacency | None = None

    @classmethod
    def build(cls, config: ModelConfig, num_features: int, seed: int = 0) -> "Model":
        config.validate()
        rng = np.random.default_rng(seed)
        layer_cls = GcnLayer if config.arch == "gcn" else SageLayer
        widths = (
            [num_features]
            + [config.hidden] * (config.num_layers - 1)
            + [config.out_dim]
        )
        layers = [
            layer_cls(widths[i], widths[i + 1], rng) for i in range(config.num_layers)
        ]
        cna_states: list[CnaLayerState | None] = [None] * (config.num_layers - 1)
        if config.activation == "cna":
            base = rational_init_fit()
            for i in range(config.num_layers - 1):
                rationals = [
                    RationalCoeffs.from_arrays(
                        base.numerator.data,
                        base.denominator.data,
                        label=f"layer{i}/cluster{k}",
                    )
                    for k in range(config.clusters)
                ]
                cna_states[i] = CnaLayerState(
                    num_clusters=config.clusters,
                    rationals=rationals,
                    eps=config.eps,
                    warm_refit_iters=config.kmeans_refit_iters,
                    rng=np.random.default_rng(rng.integers(2**63)),
                )
        return cls(config, layers, cna_states)

    def parameters(self) -> list[Parameter]:
        params = [p for layer in self.layers for p in layer.parameters()]
        for state in self.cna_states:
            if state is not None:
                params.extend(state.parameters())
        return params

    def adjacency(self, bundle: GraphBundle) -> CsrAdjacency:
        if self._prepared_for is not bundle:
            builder = gcn_normalize if self.config.arch == "gcn" else mean_neighbor_adjacency
            self._adj = builder(bundle)
            self._prepared_for = bundle
        return self._adj

    def freeze_clusters(self, frozen: bool = True) -> None:
        """Pin (or release) stored cluster assignments across forwards."""
        for state in self.cna_states:
            if state is not None:
                state.frozen = frozen

    def forward(self, bundle: GraphBundle, mode: str = "train", inputs: Tensor | None = None,
                trace_sink: list | None = None) -> Tensor:
        return model_forward(self, bundle, mode, inputs=inputs, trace_sink=trace_sink)


def model_forward(
    model: Model,
    bundle: GraphBundle,
    mode: str = "train",
    inputs: Tensor | None = None,
    trace_sink: list | None = None,
) -> Tensor:
    """Run the stack on the bundle's nodes and return the head output.

    ``inputs`` substitutes a tensor for the bundle features (so gradients can
    reach them); ``trace_sink`` collects a copy of each layer's output after
    its activation stage, in order.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = inputs if inputs is not None else Tensor(bundle.features)
    first_in = model.layers[0].parameters()[0].rows
    if h.cols != first_in:
        raise DimensionError(
            f"model expects {first_in} input features, bundle has {h.cols}"
        )
    adj = model.adjacency(bundle)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = layer.forward(adj, h)
        if i < last:
            if model.config.activation == "relu":
                h = relu(h)
            elif model.config.activation == "cna":
                h = cna_apply(h, model.cna_states[i], mode, model.config.cna_enabled)
        if trace_sink is not None:
            trace_sink.append(h.data.copy())
    return h


def param_count(model: Model) -> int:
    """Total learnable scalars, rational coefficients included."""
    return sum(p.data.size for p in model.parameters())
