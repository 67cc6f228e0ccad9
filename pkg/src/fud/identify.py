"""Feature identification without annotations.

Filters of a chosen higher conv layer are compared through the Pearson
correlation of their activation maps.  The eigengap of the similarity
graph's Laplacian picks the number of groups, spectral clustering assigns
filters to groups, and a grouping loss then pushes filters in the same group
to respond to the same pattern.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from fud import tensor as T
from fud.models import FilterPartition, Identifier
from fud.tensor import ContractError
from fud.training import check_finite, epoch_rng, minibatches, task_loss

TOP_GAPS = 5


def filter_vectors(model, layer_id: int, probe_x: np.ndarray) -> np.ndarray:
    """``[d, N*h*w]``: each row is one filter's activations over the whole probe batch."""
    if len(probe_x) < 2:
        raise ContractError("probe batch needs at least 2 instances")
    _, act = model.forward(probe_x, hook=layer_id)
    a = act.data
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def similarity_matrix(vectors: np.ndarray) -> np.ndarray:
    """``s_ij = rho_ij + 1`` for rows of ``vectors``; zero-variance rows correlate 0 with everything."""
    X = np.asarray(vectors, dtype=np.float64)
    centered = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    z = centered / safe[:, None]
    rho = np.clip(z @ z.T, -1.0, 1.0)
    rho = 0.5 * (rho + rho.T)
    S = rho + 1.0
    np.fill_diagonal(S, 2.0)
    return S


def _similarity_tensor(act: T.Tensor) -> T.Tensor:
    """Differentiable counterpart of :func:`similarity_matrix` over an ``[N, d, h, w]`` activation."""
    d = act.shape[1]
    X = T.reshape(T.transpose(act, (1, 0, 2, 3)), (d, -1))
    centered = X - T.mean(X, axis=1, keepdims=True)
    sq = T.tsum(centered * centered, axis=1, keepdims=True)
    # constant rows: pad the zero norm to 1 so they normalize to an all-zero row
    pad = (sq.data == 0).astype(np.float64)
    z = centered / T.sqrt(sq + pad)
    rho = z @ T.transpose(z)
    off = 1.0 - np.eye(d)
    return rho * off + (1.0 + np.eye(d))


def laplacian(S: np.ndarray) -> np.ndarray:
    """Unnormalized graph Laplacian ``D - S``."""
    S = np.asarray(S, dtype=np.float64)
    return np.diag(S.sum(axis=1)) - S


def spectrum(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ascending Laplacian eigenvalues and their eigenvectors (columns)."""
    values, vectors = np.linalg.eigh(laplacian(S))
    return values, vectors


def eigengap_candidates(eigenvalues: np.ndarray, top: int = TOP_GAPS) -> list[int]:
    """1-based indices ``k`` of the ``top`` largest gaps ``lambda_{k+1} - lambda_k``.

    Ties go to the smaller index.  Returned in decreasing gap order.
    """
    gaps = np.diff(np.asarray(eigenvalues, dtype=np.float64))
    order = np.argsort(-gaps, kind="stable")[:top]
    return [int(i) + 1 for i in order]


def eigengap_select_k(S: np.ndarray, top: int = TOP_GAPS) -> int:
    """Largest candidate index among the top eigengaps, clamped to ``[2, d]``."""
    d = np.asarray(S).shape[0]
    if d < 3:
        raise ContractError(f"eigengap selection needs at least 3 filters, got {d}")
    values, _ = spectrum(S)
    return int(min(max(max(eigengap_candidates(values, top)), 2), d))


# ---------------------------------------------------------------------------
# clustering


def _kmeans_once(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    n = len(points)
    # k-means++ seeding
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(points[idx])
    centers = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        new = dist.argmin(axis=1)
        new = _repair_empty(points, new, k)
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([points[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(((points - centers[labels]) ** 2).sum())
    return labels, inertia


def _repair_empty(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the member of the largest cluster farthest from its centroid."""
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(sizes.argmax())
        members = np.flatnonzero(labels == big)
        centroid = points[members].mean(axis=0)
        far = members[((points[members] - centroid) ** 2).sum(-1).argmax()]
        labels[far] = j
    return labels


def _canonical(labels: np.ndarray) -> list[int]:
    """1-based labels numbered by first appearance."""
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping) + 1)
    return [mapping[int(lab)] for lab in labels]


def kmeans(points: np.ndarray, k: int, seed: int = 0, restarts: int = 20) -> np.ndarray:
    """Seeded Lloyd k-means; best of ``restarts`` by inertia."""
    points = np.asarray(points, dtype=np.float64)
    if not 1 <= k <= len(points):
        raise ContractError(f"k={k} out of range for {len(points)} points")
    best, best_inertia = None, np.inf
    for r in range(restarts):
        labels, inertia = _kmeans_once(points, k, np.random.default_rng([seed, 0xC105, r]))
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return best


def spectral_partition(S: np.ndarray, k: int, seed: int = 0) -> FilterPartition:
    """Cluster the rows of the first ``k`` Laplacian eigenvectors."""
    d = np.asarray(S).shape[0]
    if not 2 <= k <= d:
        raise ContractError(f"need 2 <= K <= d, got K={k}, d={d}")
    if k == d:
        return FilterPartition(list(range(1, d + 1)))
    _, vectors = spectrum(S)
    labels = kmeans(vectors[:, :k], k, seed)
    return FilterPartition(_canonical(labels))


# ---------------------------------------------------------------------------
# grouping loss


def cls_loss(activation: T.Tensor, partition: FilterPartition) -> T.Tensor:
    """``-sum_k within_k / all_k`` where, for group k, ``within_k`` sums similarities
    between members and ``all_k`` sums similarities from members to every filter."""
    activation = T.as_tensor(activation)
    d = activation.shape[1]
    partition.validate(d)
    S = _similarity_tensor(activation)
    G = partition.indicator()
    SG = S @ G
    within = T.tsum(SG * G, axis=0)
    total = T.tsum(SG, axis=0)
    return -T.tsum(within / total)


def cls_loss_value(S: np.ndarray, partition: FilterPartition) -> float:
    """Plain numpy evaluation of the grouping loss from a similarity matrix."""
    total = 0.0
    for members in partition.groups():
        idx = np.array(members)
        total += S[np.ix_(idx, idx)].sum() / S[idx].sum()
    return -total


def group_similarity_stats(S: np.ndarray, partition: FilterPartition) -> tuple[float, float]:
    """Mean off-diagonal similarity within groups and between groups."""
    labels = np.asarray(partition.assignment)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = S[same & off]
    between = S[~same]
    return (float(within.mean()) if within.size else float("nan"), float(between.mean()) if between.size else float("nan"))


# ---------------------------------------------------------------------------
# training


@dataclass
class IdentifyResult:
    similarity: np.ndarray
    eigenvalues: np.ndarray
    candidates: list[int]
    k: int
    partition: FilterPartition
    history: list[dict] = field(default_factory=list)


def train_identifier(
    model: Identifier,
    x: np.ndarray,
    y: np.ndarray,
    probe_x: np.ndarray,
    gamma: float = 1.0,
    t1: int = 3,
    t2: int = 3,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
    k: int | None = None,
) -> IdentifyResult:
    """Two phases: ``t1`` epochs of task loss, then a fixed partition and ``t2``
    epochs of task loss plus ``gamma`` times the grouping loss.

    ``k`` overrides the eigengap choice of group count.
    """
    if t1 < 0 or t2 < 0:
        raise ContractError("epoch counts must be nonnegative")
    model.set_trainable(True)
    params = model.parameters()
    layer = model.target_layer
    history = []
    for epoch in range(t1):
        history.append({"epoch": epoch, "phase": "task", "loss": _epoch(model, x, y, None, 0.0, lr, batch_size, seed, epoch, layer, params)})

    S = similarity_matrix(filter_vectors(model, layer, probe_x))
    values, _ = spectrum(S)
    candidates = eigengap_candidates(values)
    chosen = eigengap_select_k(S) if k is None else int(k)
    partition = spectral_partition(S, chosen, seed)
    model.partition = partition

    for epoch in range(t1, t1 + t2):
        history.append(
            {"epoch": epoch, "phase": "grouping", "loss": _epoch(model, x, y, partition, gamma, lr, batch_size, seed, epoch, layer, params)}
        )
    return IdentifyResult(S, values, candidates, chosen, partition, history)


def _epoch(model, x, y, partition, gamma, lr, batch_size, seed, epoch, layer, params) -> float:
    total, batches = 0.0, 0
    # same shuffling stream as plain classifier training, so gamma = 0 reproduces it bitwise
    for idx in minibatches(len(x), batch_size, epoch_rng(seed, 0x7A1, epoch)):
        for p in params:
            p.zero_grad()
        with T.Tape() as tape:
            if partition is None or gamma == 0:
                loss = task_loss(model, x[idx], y[idx])
            else:
                out, act = model.forward(x[idx], hook=layer)
                ori = T.cross_entropy(out, y[idx]) if model.spec.head == "softmax" else T.bce(out, y[idx].reshape(out.shape).astype(float))
                loss = ori + gamma * cls_loss(act, partition)
        value = loss.item()
        check_finite(value, epoch=epoch, phase="identify")
        T.backward(tape, loss)
        T.sgd_step(params, lr)
        total += value
        batches += 1
    return total / max(batches, 1)


def similarity_csv(S: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(S), delimiter=",", fmt="%.17g")
    return buf.getvalue()
