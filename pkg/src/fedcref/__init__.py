"""fedcref: deterministic simulator for unsupervised federated clustering.

Clients holding unlabeled, multi-cluster local data train one small
autoencoder per cluster, associate clusters across clients by mutual
reconstruction-error similarity, train a federated model per discovered
group, and refine their local partitions until the system stabilizes,
discovering the number of global data distributions without labels.
"""

from .backend import backend_name, get_kernels
from .data import (
    ClientState,
    FederationSystem,
    GenerationError,
    IdxFormatError,
    LabeledDataset,
    SnapshotError,
    apply_dirty_clustering,
    build_federation,
    derive_seed,
    dirty_uniform_clustering,
    export_federation,
    generate_synthetic,
    import_federation,
    load_idx,
)
from .metrics import IterationMetrics, acc, collect, hungarian, wrong_associations
from .nn import (
    AggregationError,
    CheckpointError,
    EmptyInputError,
    InvalidArchitectureError,
    Model,
    OptimizerState,
    ShapeError,
    TrainingDivergedError,
    backward,
    fedavg,
    forward,
    init_model,
    load_model,
    mean_loss,
    reconstruction_errors,
    save_model,
    train_local,
)
from .protocol import (
    AssociationGraph,
    ClusterId,
    ProtocolOrderError,
    ProtocolState,
    RunResult,
    ThresholdConfig,
    TrainingSchedule,
    associate_clusters,
    build_graph,
    check_global_stop,
    cluster_refine,
    directional_pass,
    init_state,
    normalize_unit,
    run_fedcref,
    train_group_federated,
    update_active_set,
)

__version__ = "0.1.0"
