"""Dataset ingestion and federation construction.

Builds the simulated world: a labeled source dataset (IDX files or synthetic
Gaussian blobs) partitioned into N clients, each holding K_i clusters of S
samples drawn from K_i distinct classes. Ground-truth labels stay on the
client records purely for evaluation; protocol code never reads them.
"""

import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SEED_TAG_DIRTY = 901


class IdxFormatError(ValueError):
    """An IDX file failed validation; the message names the offending field."""


class GenerationError(ValueError):
    """The federation could not be built from the given dataset."""


class SnapshotError(ValueError):
    """A federation snapshot file is malformed or inconsistent."""


@dataclass
class LabeledDataset:
    """Feature matrix in [0,1]^d plus per-sample integer class labels."""

    samples: np.ndarray
    labels: np.ndarray
    class_set: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels lengths differ")
        if self.class_set is None:
            self.class_set = np.unique(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass
class ClientState:
    """One simulated client: local samples, hidden truth, cluster assignment.

    ``true_labels`` exists for generation and evaluation only; the protocol
    operates exclusively on ``samples`` and ``assignment``.
    """

    client_id: int
    samples: np.ndarray
    true_labels: np.ndarray
    assignment: np.ndarray
    k_local: int
    active: bool = True
    sample_indices: np.ndarray = None

    def cluster_members(self, q: int) -> np.ndarray:
        """Indices of the samples currently assigned to cluster ``q``."""
        return np.flatnonzero(self.assignment == q)


@dataclass
class FederationSystem:
    clients: list
    class_set: np.ndarray
    config: dict

    @property
    def n_clients(self) -> int:
        return len(self.clients)


def _open_maybe_gzip(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n, what):
    blob = fh.read(n)
    if len(blob) != n:
        raise IdxFormatError(f"truncated {what}: wanted {n} bytes, got {len(blob)}")
    return blob


def load_idx(images_path, labels_path, min_class_count: int = 0) -> LabeledDataset:
    """Load an IDX image/label file pair (gzip transparent via .gz suffix).

    Header words are big-endian u32 per the IDX convention. Pixels are scaled
    to [0, 1] by /255. Classes with fewer than ``min_class_count`` samples
    are dropped entirely.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, n_img, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, "images header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"images magic {magic:#010x} != {IDX_IMAGES_MAGIC:#010x}")
        payload = _read_exact(fh, n_img * rows * cols, "images payload")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    samples = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0

    with _open_maybe_gzip(labels_path) as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, "labels header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"labels magic {magic:#010x} != {IDX_LABELS_MAGIC:#010x}")
        labels = np.frombuffer(
            _read_exact(fh, n_lab, "labels payload"), dtype=np.uint8)
    labels = labels.astype(np.int64)

    if n_img != n_lab:
        raise IdxFormatError(f"count mismatch: {n_img} images vs {n_lab} labels")

    if min_class_count > 0:
        values, counts = np.unique(labels, return_counts=True)
        keep_classes = values[counts >= min_class_count]
        keep = np.isin(labels, keep_classes)
        samples, labels = samples[keep], labels[keep]
        if labels.size == 0:
            raise IdxFormatError(
                f"min_class_count={min_class_count} removed every class")
    return LabeledDataset(samples=samples, labels=labels)


def generate_synthetic(n_classes: int, dim: int, per_class: int,
                       separation: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian blobs clipped to [0,1]^dim, one blob per class.

    Blob centers are drawn uniformly and redrawn until every pair is at
    least ``separation`` apart; the blob sigma is separation/8 so a
    nearest-centroid rule separates the classes essentially perfectly.
    """
    if n_classes < 2 or dim < 2:
        raise ValueError("need n_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    means = []
    tries = 0
    while len(means) < n_classes:
        cand = rng.uniform(0.25, 0.75, size=dim)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
        tries += 1
        if tries > 1000 * n_classes:
            raise GenerationError(
                f"cannot place {n_classes} means {separation} apart in "
                f"[0.25,0.75]^{dim}")
    sigma = separation / 8.0
    samples = np.empty((n_classes * per_class, dim))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c, mean in enumerate(means):
        block = slice(c * per_class, (c + 1) * per_class)
        samples[block] = np.clip(
            mean + sigma * rng.standard_normal((per_class, dim)), 0.0, 1.0)
        labels[block] = c
    return LabeledDataset(samples=samples, labels=labels)


def build_federation(ds: LabeledDataset, n_clients: int,
                     samples_per_cluster: int, overlap: float,
                     seed: int) -> FederationSystem:
    """Partition a labeled dataset into N clients with hidden labels.

    Per client: K_i drawn uniformly from {2, ..., |U|//2}, K_i distinct
    classes, S samples per class. With overlap O > 0 every class keeps a
    shared pool of floor(O*S) samples included by each client holding it, so
    any two such clients share exactly that many samples; the private
    remainders are disjoint across the whole system. The initial assignment
    is the class-pure partition (cluster q = q-th drawn class).
    """
    if n_clients < 2:
        raise GenerationError(f"need at least 2 clients, got {n_clients}")
    if not 0.0 <= overlap <= 1.0:
        raise GenerationError(f"overlap {overlap} outside [0, 1]")
    classes = np.asarray(ds.class_set)
    k_max = len(classes) // 2
    if k_max < 2:
        raise GenerationError(
            f"{len(classes)} classes leave no room for K_i in [2, |U|/2]")

    rng = np.random.default_rng(seed)
    s = samples_per_cluster
    shared = int(overlap * s)

    k_locals = rng.integers(2, k_max + 1, size=n_clients)
    chosen = [rng.choice(classes, size=int(k), replace=False)
              for k in k_locals]

    # one shuffled index list per class; the shared pool is its head and
    # private draws are consecutive disjoint chunks after it
    class_pool = {}
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        class_pool[int(c)] = rng.permutation(idx)
    holders = {int(c): sum(1 for cl in chosen if c in cl) for c in classes}
    for c, n_holders in holders.items():
        needed = shared + n_holders * (s - shared)
        if needed > len(class_pool[c]):
            raise GenerationError(
                f"class {c} has {len(class_pool[c])} samples but the draw "
                f"needs {needed}")

    cursor = {int(c): shared for c in classes}
    clients = []
    for cid in range(n_clients):
        parts, labels, assign = [], [], []
        for q, c in enumerate(chosen[cid]):
            c = int(c)
            pool = class_pool[c]
            take = pool[cursor[c]:cursor[c] + (s - shared)]
            cursor[c] += s - shared
            idx = np.concatenate([pool[:shared], take]).astype(np.int64)
            parts.append(idx)
            labels.append(np.full(s, c, dtype=np.int64))
            assign.append(np.full(s, q, dtype=np.int64))
        sample_indices = np.concatenate(parts)
        clients.append(ClientState(
            client_id=cid,
            samples=ds.samples[sample_indices].copy(),
            true_labels=np.concatenate(labels),
            assignment=np.concatenate(assign),
            k_local=int(k_locals[cid]),
            sample_indices=sample_indices,
        ))
    config = {"n_clients": n_clients, "samples_per_cluster": s,
              "overlap": overlap, "seed": seed}
    return FederationSystem(clients=clients, class_set=classes.copy(),
                            config=config)


def dirty_uniform_clustering(client: ClientState, dirtiness: float,
                             seed: int) -> ClientState:
    """Corrupt an assignment: each sample moves to a uniformly random
    *different* local cluster with probability ``dirtiness``.

    Returns a new ClientState; the input is untouched. A fixed number of RNG
    draws keeps the result deterministic in (client, dirtiness, seed).
    """
    if not 0.0 <= dirtiness <= 1.0:
        raise ValueError(f"dirtiness {dirtiness} outside [0, 1]")
    rng = np.random.default_rng(seed)
    n = client.assignment.shape[0]
    k = client.k_local
    flip = rng.random(n) < dirtiness
    offsets = rng.integers(1, k, size=n) if k > 1 else np.zeros(n, np.int64)
    new_assignment = client.assignment.copy()
    new_assignment[flip] = (client.assignment[flip] + offsets[flip]) % k
    return ClientState(
        client_id=client.client_id,
        samples=client.samples,
        true_labels=client.true_labels,
        assignment=new_assignment,
        k_local=client.k_local,
        active=client.active,
        sample_indices=client.sample_indices,
    )


def apply_dirty_clustering(system: FederationSystem, dirtiness: float,
                           seed: int) -> FederationSystem:
    """Dirty-corrupt every client with per-client seeds derived from one seed."""
    clients = []
    for client in system.clients:
        sub = derive_seed(seed, _SEED_TAG_DIRTY, client.client_id)
        clients.append(dirty_uniform_clustering(client, dirtiness, sub))
    config = dict(system.config, dirtiness=dirtiness)
    return FederationSystem(clients=clients, class_set=system.class_set,
                            config=config)


def derive_seed(*parts) -> int:
    """Stable child seed from integer parts (no hash randomization)."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


SNAPSHOT_FORMAT = "fedcref-federation"
SNAPSHOT_VERSION = 1


def export_federation(system: FederationSystem, path,
                      dataset_spec: dict | None = None) -> None:
    """Write the federation as a JSON snapshot (indices into the source
    dataset, current assignments, config echo) for reproducible reruns."""
    doc = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "dataset": dataset_spec or {},
        "config": system.config,
        "class_set": [int(c) for c in system.class_set],
        "clients": [
            {
                "client_id": c.client_id,
                "k_local": c.k_local,
                "active": c.active,
                "sample_indices": [int(i) for i in c.sample_indices],
                "assignment": [int(a) for a in c.assignment],
            }
            for c in system.clients
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def import_federation(path, ds: LabeledDataset) -> FederationSystem:
    """Rebuild a federation snapshot against its source dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"not a federation snapshot: {path}")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {doc.get('version')}")
    clients = []
    for rec in doc["clients"]:
        idx = np.asarray(rec["sample_indices"], dtype=np.int64)
        if idx.size and idx.max() >= ds.samples.shape[0]:
            raise SnapshotError(
                f"client {rec['client_id']} references sample "
                f"{int(idx.max())} outside the dataset")
        assignment = np.asarray(rec["assignment"], dtype=np.int64)
        if assignment.shape[0] != idx.shape[0]:
            raise SnapshotError(
                f"client {rec['client_id']}: assignment length != sample count")
        clients.append(ClientState(
            client_id=int(rec["client_id"]),
            samples=ds.samples[idx].copy(),
            true_labels=ds.labels[idx].copy(),
            assignment=assignment,
            k_local=int(rec["k_local"]),
            active=bool(rec.get("active", True)),
            sample_indices=idx,
        ))
    return FederationSystem(clients=clients,
                            class_set=np.asarray(doc["class_set"]),
                            config=dict(doc["config"]))
