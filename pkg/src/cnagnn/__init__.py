"""A small numpy GNN training stack with cluster-normalize-activate layers.

The package implements, from scratch: dense reverse-mode autodiff, graph
bundles with normalized sparse adjacencies, GCN/GraphSAGE layers whose
activation stage can be swapped for a cluster-normalize-activate module
(k-means grouping, per-cluster standardization, learnable rational
activations), oversmoothing diagnostics, and a deterministic full-batch
training loop with depth-sweep and ablation drivers.
"""

from .autodiff import (
    Parameter,
    Tensor,
    backward,
    finite_difference_check,
    no_grad,
)
from .cna import (
    ALL_STEPS,
    CnaLayerState,
    KMeansState,
    RationalCoeffs,
    cluster_normalize,
    cna_apply,
    kmeans_fit,
    rational_forward,
    rational_init_fit,
)
from .errors import (
    CnagnnError,
    ContractError,
    DimensionError,
    IngestionError,
    InitializationError,
    NumericError,
    UndefinedResultError,
    ValidationError,
)
from .graphs import (
    CsrAdjacency,
    GraphBundle,
    SbmParams,
    gcn_normalize,
    generate_sbm,
    load_bundle,
    make_splits,
    mean_neighbor_adjacency,
    node_homophily,
    split_mask,
    with_block_targets,
    write_bundle,
)
from .layers import (
    GcnLayer,
    Model,
    ModelConfig,
    SageLayer,
    model_forward,
    param_count,
    spmm,
)
from .metrics import (
    accuracy,
    cross_entropy_loss,
    dirichlet_energy,
    mad,
    mse_loss,
    nmse,
)
from .training import (
    Adam,
    AdamState,
    RunRecord,
    TrainConfig,
    ablation_run,
    adam_step,
    depth_sweep,
    train,
)

__version__ = "0.1.0"
