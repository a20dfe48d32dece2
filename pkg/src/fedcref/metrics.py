"""Evaluation against hidden ground truth: clustering accuracy via optimal
label matching, wrong-association percentage, and per-iteration aggregation.

Only this module (and generation code) may read ``ClientState.true_labels``.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

CSV_COLUMNS = ("iteration", "communities_found", "isolated", "active",
               "wrong_assoc_pct", "mean_acc", "min_acc", "max_acc")


@dataclass
class IterationMetrics:
    iteration: int
    communities_found: int
    isolated_count: int
    wrong_assoc_pct: float
    mean_acc: float
    acc_per_client: list
    active_count: int

    @property
    def min_acc(self) -> float:
        return min(self.acc_per_client)

    @property
    def max_acc(self) -> float:
        return max(self.acc_per_client)

    def csv_row(self):
        return (self.iteration, self.communities_found, self.isolated_count,
                self.active_count, repr(self.wrong_assoc_pct),
                repr(self.mean_acc), repr(self.min_acc), repr(self.max_acc))


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment on a square matrix.

    Returns the matched column index for each row. Delegates to scipy's
    linear_sum_assignment (the classic O(K^3) assignment solver).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    out = np.empty(c.shape[0], dtype=np.int64)
    out[rows] = cols
    return out


def contingency(predicted, reference) -> np.ndarray:
    """Square co-occurrence count matrix, rows = predicted labels, columns =
    reference labels, padded with zeros when the alphabets differ in size."""
    y = np.asarray(predicted).ravel()
    t = np.asarray(reference).ravel()
    p_vals, p_inv = np.unique(y, return_inverse=True)
    r_vals, r_inv = np.unique(t, return_inverse=True)
    k = max(len(p_vals), len(r_vals))
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (p_inv, r_inv), 1)
    return counts


def acc(predicted, reference) -> float:
    """Unsupervised clustering accuracy: best label-matching agreement.

    The fraction of samples on which the two labelings agree under the
    optimal bijective relabeling (found by ``hungarian`` on negated
    co-occurrence counts). Invariant to renaming labels on either side.
    """
    y = np.asarray(predicted).ravel()
    t = np.asarray(reference).ravel()
    if y.shape[0] != t.shape[0]:
        raise ValueError(f"label lengths differ: {y.shape[0]} vs {t.shape[0]}")
    if y.shape[0] == 0:
        raise ValueError("need at least one sample")
    counts = contingency(y, t)
    match = hungarian(-counts.astype(np.float64))
    matched = counts[np.arange(counts.shape[0]), match].sum()
    return float(matched) / y.shape[0]


def _plurality(values) -> int:
    """Most frequent value, smallest value on ties; -1 for empty input."""
    values = np.asarray(values)
    if values.size == 0:
        return -1
    uniq, counts = np.unique(values, return_counts=True)
    return int(uniq[np.argmax(counts)])  # uniq sorted -> ties pick smallest


def cluster_true_label(system, cluster_id) -> int:
    """Plurality hidden label of the samples currently in the cluster."""
    client = system.clients[cluster_id[0]]
    members = client.cluster_members(cluster_id[1])
    return _plurality(client.true_labels[members])


def wrong_associations(graph, system) -> float:
    """Percentage of community members whose plurality label disagrees with
    their community's plurality label; 0 when there are no communities."""
    total = 0
    wrong = 0
    for community in graph.communities:
        labels = [cluster_true_label(system, cid) for cid in community]
        community_label = _plurality(labels)
        total += len(labels)
        wrong += sum(1 for lab in labels if lab != community_label)
    if total == 0:
        return 0.0
    return 100.0 * wrong / total


def collect(state) -> IterationMetrics:
    """Assemble the per-iteration record from a protocol state."""
    system = state.system
    accs = [acc(c.assignment, c.true_labels) for c in system.clients]
    return IterationMetrics(
        iteration=state.iteration,
        communities_found=len(state.graph.communities),
        isolated_count=len(state.graph.isolated),
        wrong_assoc_pct=wrong_associations(state.graph, system),
        mean_acc=float(np.mean(accs)),
        acc_per_client=accs,
        active_count=len(state.active_set),
    )


def write_iterations_csv(path, metrics_list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for m in metrics_list:
            writer.writerow(m.csv_row())


def read_iterations_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [
            {k: float(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and 95% Student-t confidence half-width (nan for n=1)."""
    from scipy import stats

    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    if arr.size < 2:
        return mean, float("nan")
    half = float(stats.t.ppf(0.975, arr.size - 1)
                 * np.std(arr, ddof=1) / np.sqrt(arr.size))
    return mean, half
