"""The FedCRef iteration loop.

Each iteration runs five bulk-synchronous steps: (1) every active client
retrains one autoencoder per local cluster; (2) models are exchanged
all-to-all and cluster pairs are associated when their reconstruction-error
profiles match in both directions; (3) the association graph's connected
components define communities (size >= 2) and isolated clusters; (4) every
community trains a federated model over its members' samples; (5) active
clients re-partition their samples against the local + federated model pool
and drop out of the active set once their partition stops moving. The run
ends when no client is active, when community/isolated counts plateau, or
at an iteration cap.

Everything is a pure function of (system, config, seed): work may fan out
over threads, but results merge in a fixed order so any parallelism degree
yields bit-identical runs.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import metrics, nn
from .data import FederationSystem, ClientState, derive_seed

DEFAULT_ENCODER_WIDTHS = (100, 64, 32)  # appended to the data dimension

_TAG_LOCAL_INIT = 101
_TAG_LOCAL_TRAIN = 102
_TAG_GROUP_INIT = 103
_TAG_GROUP_TRAIN = 104


class ProtocolOrderError(RuntimeError):
    """A step ran before the state it depends on was produced."""


class AlignmentError(ValueError):
    """Paired error vectors have different lengths."""


class ClusterId(NamedTuple):
    client_id: int
    cluster_index: int

    def __str__(self):
        return f"{self.client_id}:{self.cluster_index}"


@dataclass
class ThresholdConfig:
    """Association and stopping thresholds.

    theta: ceiling on normalized error differences; alpha: fraction of a
    cluster's samples that must fall under it (both inclusive); tau: the
    iteration-over-iteration stability level that deactivates a client.
    """

    theta: float = 0.2
    alpha: float = 0.75
    tau: float = 0.8
    fl_rounds: int = 15
    global_stop_window: int = 3
    global_stop_rel_change: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta {self.theta} outside (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside (0, 1]")
        if not 0.8 <= self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside [0.8, 1]")
        if self.fl_rounds < 1:
            raise ValueError(f"fl_rounds {self.fl_rounds} must be >= 1")
        if self.global_stop_window < 2:
            raise ValueError("global_stop_window must be >= 2")


@dataclass
class TrainingSchedule:
    """Local/federated training knobs (everything the thresholds don't cover)."""

    local_epochs: int = 20
    batch_size: int = 64
    round_epochs: int = 1
    max_iterations: int = 30
    learning_rate: float = 1e-3
    encoder_widths: tuple | None = None

    def widths_for(self, dim: int) -> tuple:
        if self.encoder_widths is not None:
            widths = tuple(int(w) for w in self.encoder_widths)
            if widths[0] != dim:
                raise ValueError(
                    f"encoder width {widths[0]} != data dimension {dim}")
            return widths
        return (dim,) + DEFAULT_ENCODER_WIDTHS


@dataclass
class AssociationGraph:
    """Vertices are (client, cluster) pairs; edges are mutual associations.

    ``communities`` holds the connected components with >= 2 vertices (each
    sorted, listed by smallest member); ``isolated`` the size-1 components.
    """

    vertices: list
    edges: list
    communities: list
    isolated: list


@dataclass
class ProtocolState:
    system: FederationSystem
    local_models: dict
    group_models: dict
    graph: AssociationGraph
    active_set: set
    iteration: int = 0
    history: list = field(default_factory=list)
    prev_assignments: dict = field(default_factory=dict)


@dataclass
class RunResult:
    state: ProtocolState
    metrics: list
    termination: str


def all_cluster_ids(system: FederationSystem) -> list[ClusterId]:
    return [ClusterId(c.client_id, q)
            for c in system.clients for q in range(c.k_local)]


def cluster_samples(client: ClientState, q: int) -> np.ndarray:
    return client.samples[client.cluster_members(q)]


def _pmap(fn, items, n_threads):
    items = list(items)
    if n_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


def normalize_unit(values) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant vector maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty vector")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def directional_pass(own_errors, foreign_errors, theta: float,
                     alpha: float) -> bool:
    """One direction of the association test on a single cluster's samples:
    at least an ``alpha`` fraction of the normalized |own - foreign| error
    differences must be <= ``theta`` (both comparisons inclusive)."""
    own = np.asarray(own_errors, dtype=np.float64)
    foreign = np.asarray(foreign_errors, dtype=np.float64)
    if own.shape != foreign.shape:
        raise AlignmentError(
            f"error vectors differ in shape: {own.shape} vs {foreign.shape}")
    diffs = normalize_unit(np.abs(own - foreign))
    return bool(np.mean(diffs <= theta) >= alpha)


def init_state(system: FederationSystem, seed: int,
               schedule: TrainingSchedule | None = None) -> ProtocolState:
    """Fresh state: one seeded model per cluster, everyone active, no edges."""
    schedule = schedule or TrainingSchedule()
    dim = system.clients[0].samples.shape[1]
    widths = schedule.widths_for(dim)
    local_models = {}
    for cid in all_cluster_ids(system):
        local_models[cid] = nn.init_model(
            widths, derive_seed(seed, _TAG_LOCAL_INIT, *cid))
    for client in system.clients:
        client.active = True
    return ProtocolState(
        system=system,
        local_models=local_models,
        group_models={},
        graph=build_graph([], all_cluster_ids(system)),
        active_set={c.client_id for c in system.clients},
        iteration=0,
        history=[],
        prev_assignments={c.client_id: c.assignment.copy()
                          for c in system.clients},
    )


def train_local_models(state: ProtocolState, schedule: TrainingSchedule,
                       seed: int, n_threads: int = 1) -> None:
    """Step 1: retrain every non-empty cluster model of every active client.

    Non-active clients keep their last-trained models; empty clusters keep
    their parameters and sit out this iteration's associations.
    """
    tasks = []
    for cid in sorted(state.active_set):
        client = state.system.clients[cid]
        for q in range(client.k_local):
            x = cluster_samples(client, q)
            if x.shape[0] == 0:
                continue
            tasks.append((ClusterId(cid, q), x))

    def train_one(task):
        cluster_id, x = task
        opt = nn.OptimizerState.fresh(state.local_models[cluster_id],
                                      learning_rate=schedule.learning_rate)
        return nn.train_local(
            state.local_models[cluster_id], x,
            epochs=schedule.local_epochs, batch_size=schedule.batch_size,
            opt=opt,
            rng_seed=derive_seed(seed, _TAG_LOCAL_TRAIN, state.iteration,
                                 *cluster_id))

    trained = _pmap(train_one, tasks, n_threads)
    for (cluster_id, _), model in zip(tasks, trained):
        state.local_models[cluster_id] = model


def associate_clusters(state: ProtocolState, cfg: ThresholdConfig,
                       n_threads: int = 1) -> list[tuple]:
    """Step 2: bidirectional association test over all cross-client pairs.

    Returns the undirected edge list as (smaller, larger) ClusterId pairs.
    Evaluation is read-only on samples; every cluster (active or not)
    participates with its last-trained model.
    """
    populated = []
    samples = {}
    for cid in all_cluster_ids(state.system):
        if cid not in state.local_models:
            raise ProtocolOrderError(f"no model for cluster {cid}")
        x = cluster_samples(state.system.clients[cid.client_id],
                            cid.cluster_index)
        if x.shape[0] > 0:
            populated.append(cid)
            samples[cid] = x

    def errors_on(target):
        own = nn.reconstruction_errors(state.local_models[target],
                                       samples[target])
        foreign = {}
        for src in populated:
            if src.client_id != target.client_id:
                foreign[src] = nn.reconstruction_errors(
                    state.local_models[src], samples[target])
        return own, foreign

    results = _pmap(errors_on, populated, n_threads)
    own = {cid: res[0] for cid, res in zip(populated, results)}
    foreign = {cid: res[1] for cid, res in zip(populated, results)}

    edges = []
    for i, a in enumerate(populated):
        for b in populated[i + 1:]:
            if a.client_id == b.client_id:
                continue
            if (directional_pass(own[a], foreign[a][b], cfg.theta, cfg.alpha)
                    and directional_pass(own[b], foreign[b][a],
                                         cfg.theta, cfg.alpha)):
                edges.append((a, b))
    return edges


def build_graph(edges, all_clusters) -> AssociationGraph:
    """Step 3: connected components via union-find, smallest-member order."""
    vertices = sorted(all_clusters)
    index = {v: i for i, v in enumerate(vertices)}
    parent = list(range(len(vertices)))

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b in edges:
        if a not in index or b not in index:
            raise ValueError(f"edge ({a}, {b}) references an unknown cluster")
        if a.client_id == b.client_id:
            raise ValueError(f"self-client edge ({a}, {b})")
        ra, rb = find(index[a]), find(index[b])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    components = {}
    for v in vertices:
        components.setdefault(find(index[v]), []).append(v)
    communities = sorted((sorted(c) for c in components.values() if len(c) > 1),
                         key=lambda c: c[0])
    isolated = sorted(c[0] for c in components.values() if len(c) == 1)
    canonical = [tuple(sorted(e)) for e in edges]
    return AssociationGraph(vertices=vertices, edges=canonical,
                            communities=communities, isolated=isolated)


def train_group_federated(state: ProtocolState, group, cfg: ThresholdConfig,
                          schedule: TrainingSchedule, seed: int,
                          n_threads: int = 1) -> nn.Model:
    """Step 4 (one community): federated rounds over the member clusters.

    A fresh model is seeded from the sorted membership fingerprint; each
    round every member trains a copy on its current samples and the copies
    are averaged with sample-count weights, in ClusterId order.
    """
    members = sorted(group)
    if len(members) < 2:
        raise ValueError(f"group {members} smaller than 2")
    fingerprint = [part for cid in members for part in cid]
    dim = state.system.clients[0].samples.shape[1]
    model = nn.init_model(schedule.widths_for(dim),
                          derive_seed(seed, _TAG_GROUP_INIT, *fingerprint))
    member_samples = [cluster_samples(state.system.clients[cid.client_id],
                                      cid.cluster_index) for cid in members]
    weights = [x.shape[0] for x in member_samples]

    for fl_round in range(1, cfg.fl_rounds + 1):
        def train_member(item):
            cid, x = item
            opt = nn.OptimizerState.fresh(model,
                                          learning_rate=schedule.learning_rate)
            return nn.train_local(
                model, x, epochs=schedule.round_epochs,
                batch_size=schedule.batch_size, opt=opt,
                rng_seed=derive_seed(seed, _TAG_GROUP_TRAIN, state.iteration,
                                     fl_round, *cid))

        locals_ = _pmap(train_member, zip(members, member_samples), n_threads)
        model = nn.fedavg(locals_, weights)
    return model


def train_all_groups(state: ProtocolState, cfg: ThresholdConfig,
                     schedule: TrainingSchedule, seed: int,
                     n_threads: int = 1) -> dict:
    """Step 4: one federated model per community, keyed by community index."""
    groups = state.graph.communities
    if len(groups) >= n_threads:
        trained = _pmap(
            lambda g: train_group_federated(state, g, cfg, schedule, seed, 1),
            groups, n_threads)
    else:
        trained = [train_group_federated(state, g, cfg, schedule, seed,
                                         n_threads) for g in groups]
    return dict(enumerate(trained))


def _refine_detail(client: ClientState, local_models, federated_models):
    """The refinement subroutine; returns (assignment, selected models).

    Pool = local models then federated models. K_i passes each pick the
    model that is the per-sample error argmin for the most still-unassigned
    samples (ties toward the lowest model index), claim those samples as the
    next cluster, and retire the model. Leftover samples join the cluster of
    their best-performing selected model.
    """
    pool = list(local_models) + list(federated_models)
    k = client.k_local
    if len(local_models) != k:
        raise ValueError(f"{len(local_models)} local models but K={k}")
    x = client.samples
    n = x.shape[0]
    errors = np.stack([nn.reconstruction_errors(m, x) for m in pool], axis=1)

    assignment = np.zeros(n, dtype=np.int64)
    unassigned = np.ones(n, dtype=bool)
    remaining = list(range(len(pool)))
    selected = []
    for p in range(k):
        has_left = bool(unassigned.any())
        if has_left:
            sub = errors[np.ix_(unassigned, remaining)]
            best = np.argmin(sub, axis=1)  # ties -> lowest model index
            counts = np.bincount(best, minlength=len(remaining))
        else:
            counts = np.zeros(len(remaining), dtype=np.int64)
        winner_pos = int(np.argmax(counts))  # ties -> lowest model index
        winner = remaining[winner_pos]
        if has_left:
            rows = np.flatnonzero(unassigned)
            taken = rows[best == winner_pos]
            assignment[taken] = p
            unassigned[taken] = False
        selected.append(winner)
        remaining.pop(winner_pos)
    if unassigned.any():
        rows = np.flatnonzero(unassigned)
        best = np.argmin(errors[np.ix_(rows, selected)], axis=1)
        assignment[rows] = best
    return assignment, [pool[i] for i in selected]


def cluster_refine(client: ClientState, local_models,
                   federated_models) -> np.ndarray:
    """Step 5 (one client): re-partition the local samples into K_i clusters
    against the pooled local + federated models. With no federated models
    this reduces exactly to the per-sample argmin over the local models."""
    assignment, _ = _refine_detail(client, local_models, federated_models)
    return assignment


def refine_active_clients(state: ProtocolState, n_threads: int = 1) -> None:
    """Step 5: refine every active client; the selected models become the
    clients' local models for the next iteration."""
    fed = [state.group_models[g] for g in sorted(state.group_models)]
    active = sorted(state.active_set)

    def refine_one(cid):
        client = state.system.clients[cid]
        local = [state.local_models[ClusterId(cid, q)]
                 for q in range(client.k_local)]
        return _refine_detail(client, local, fed)

    results = _pmap(refine_one, active, n_threads)
    for cid, (assignment, selected) in zip(active, results):
        client = state.system.clients[cid]
        state.prev_assignments[cid] = client.assignment.copy()
        client.assignment = assignment
        for q, model in enumerate(selected):
            state.local_models[ClusterId(cid, q)] = model


def update_active_set(state: ProtocolState, tau: float) -> set:
    """Deactivate clients whose refinement left the partition stable:
    ACC(previous, current) >= tau. Deactivation is permanent."""
    still_active = set()
    for cid in sorted(state.active_set):
        client = state.system.clients[cid]
        stability = metrics.acc(state.prev_assignments[cid], client.assignment)
        if stability < tau:
            still_active.add(cid)
        else:
            client.active = False
    state.active_set = still_active
    return still_active


def check_global_stop(history, window: int = 3,
                      rel_change: float = 0.10) -> bool:
    """True when |G| and |I| both changed by at most ``rel_change`` between
    every consecutive pair of the last ``window`` iterations (0 -> 0 counts
    as no change, 0 -> anything else as unbounded change)."""
    if len(history) < window:
        return False
    recent = history[-window:]
    for (g0, i0), (g1, i1) in zip(recent, recent[1:]):
        for old, new in ((g0, g1), (i0, i1)):
            if old == 0:
                if new != 0:
                    return False
            elif abs(new - old) / old > rel_change:
                return False
    return True


def run_fedcref(system: FederationSystem, cfg: ThresholdConfig, seed: int,
                schedule: TrainingSchedule | None = None, n_threads: int = 1,
                on_iteration=None, collect_fn=metrics.collect) -> RunResult:
    """Drive the full protocol until a stopping condition fires.

    Emits one metrics record for the initial state (iteration 0) and one per
    iteration. ``on_iteration(state, record)`` runs after each record; pass
    ``collect_fn=None`` to skip evaluation entirely (then no ground-truth
    labels are read anywhere in the run).
    """
    schedule = schedule or TrainingSchedule()
    state = init_state(system, seed, schedule)
    records = []

    def emit():
        if collect_fn is None:
            return
        record = collect_fn(state)
        records.append(record)
        if on_iteration is not None:
            on_iteration(state, record)

    emit()
    termination = "iteration-cap"
    for iteration in range(1, schedule.max_iterations + 1):
        state.iteration = iteration
        train_local_models(state, schedule, seed, n_threads)
        edges = associate_clusters(state, cfg, n_threads)
        state.graph = build_graph(edges, all_cluster_ids(system))
        state.group_models = train_all_groups(state, cfg, schedule, seed,
                                              n_threads)
        refine_active_clients(state, n_threads)
        update_active_set(state, cfg.tau)
        state.history.append((len(state.graph.communities),
                              len(state.graph.isolated)))
        if len(state.history) > cfg.global_stop_window:
            state.history.pop(0)
        emit()
        if not state.active_set:
            termination = "no-active-clients"
            break
        if check_global_stop(state.history, cfg.global_stop_window,
                             cfg.global_stop_rel_change):
            termination = "global-stability"
            break
    return RunResult(state=state, metrics=records, termination=termination)
