"""Shallow user/URL embeddings learned from the engagement graph.

Each sampled edge ``(p, w)`` contributes the negative-sampling logistic loss

    -log sigmoid(<p, w>) - sum_j log sigmoid(-<p, w_j>)

with ``w_j`` drawn from the URL degree distribution raised to 0.75. Updates are
plain SGD with a learning rate decayed linearly to zero. With ``workers > 1``
the epoch is split across threads that update the shared tables without locks.
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import FormatError, TrainingError, ValidationError
from .graph import BipartiteGraph

logger = logging.getLogger(__name__)

REAL = np.float32


class Side(enum.IntEnum):
    USER = 0
    URL = 1


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    side: Side

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValidationError("embedding vectors must be a 2-d array")
        self.side = Side(self.side)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, idx):
        return self.vectors[idx]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.vectors.copy(), self.side)


@dataclass
class GraphTrainConfig:
    dim: int = 128
    negatives: int = 5
    learning_rate: float = 0.05
    epochs: int = 10
    init_scale: float | None = None  # None -> 1/sqrt(dim)
    seed: int = 0
    workers: int = 1
    negative_sampling: str = "unigram"  # or "uniform"
    negative_power: float = 0.75

    def __post_init__(self):
        if self.negatives < 1:
            raise ValidationError("negatives must be >= 1")
        if self.dim < 2:
            raise ValidationError("dim must be >= 2")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0 or self.workers < 1:
            raise ValidationError("epochs must be >= 0 and workers >= 1")
        if self.negative_sampling not in ("unigram", "uniform"):
            raise ValidationError(f"unknown negative_sampling {self.negative_sampling!r}")

    @property
    def scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 1.0 / np.sqrt(self.dim)


@dataclass
class GraphTrainResult:
    users: EmbeddingTable
    urls: EmbeddingTable
    epoch_losses: list[float] = field(default_factory=list)


def score(p, w) -> float:
    """Relevance score of a user/URL pair; ``sigmoid(score)`` is the relevance probability."""
    p = np.asarray(p, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if p.shape != w.shape or p.ndim != 1:
        raise ValidationError(f"dimension mismatch: {p.shape} vs {w.shape}")
    return float(p @ w)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


@numba.njit(cache=True, nogil=True, fastmath=False)
def _softplus(x):
    # log(1 + exp(x)), stable for both signs
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@numba.njit(cache=True, nogil=True)
def _sgd_chunk(U, W, pos_u, pos_w, negs, lr0, step0, total_steps, losses):
    """Apply SGD for one slice of samples; returns the index of a non-finite step or -1."""
    d = U.shape[1]
    k = negs.shape[1]
    grad_u = np.empty(d, dtype=U.dtype)
    for i in range(pos_u.shape[0]):
        lr = lr0 * (1.0 - (step0 + i) / total_steps)
        u = pos_u[i]
        grad_u[:] = 0.0
        loss = 0.0
        for j in range(k + 1):
            if j == 0:
                t = pos_w[i]
                label = 1.0
            else:
                t = negs[i, j - 1]
                if t == pos_w[i]:
                    continue
                label = 0.0
            s = 0.0
            for c in range(d):
                s += U[u, c] * W[t, c]
            if label == 1.0:
                loss += _softplus(-s)
            else:
                loss += _softplus(s)
            g = (label - 1.0 / (1.0 + np.exp(-s))) * lr
            for c in range(d):
                grad_u[c] += g * W[t, c]
                W[t, c] += g * U[u, c]
        for c in range(d):
            U[u, c] += grad_u[c]
        losses[i] = loss
        if not np.isfinite(loss):
            return i
    return -1


def init_tables(num_users: int, num_urls: int, config: GraphTrainConfig) -> tuple[EmbeddingTable, EmbeddingTable]:
    """Seeded uniform(-scale, scale) initialization for both sides."""
    rng = np.random.default_rng([config.seed, 0x1417])
    s = config.scale
    users = rng.uniform(-s, s, size=(num_users, config.dim)).astype(REAL)
    urls = rng.uniform(-s, s, size=(num_urls, config.dim)).astype(REAL)
    return EmbeddingTable(users, Side.USER), EmbeddingTable(urls, Side.URL)


def negative_distribution(graph: BipartiteGraph, config: GraphTrainConfig) -> np.ndarray:
    if config.negative_sampling == "uniform":
        p = np.ones(graph.num_urls)
    else:
        p = graph.url_degrees.astype(np.float64) ** config.negative_power
    return p / p.sum()


def train_graph_embeddings(graph: BipartiteGraph, config: GraphTrainConfig | None = None) -> GraphTrainResult:
    """Fit user and URL tables; returns them with the per-epoch mean loss."""
    config = config or GraphTrainConfig()
    if graph.num_edges == 0:
        raise ValidationError("cannot train embeddings on a graph without edges")
    users, urls = init_tables(graph.num_users, graph.num_urls, config)
    n_iso_u = int((graph.user_degrees == 0).sum())
    n_iso_w = int((graph.url_degrees == 0).sum())
    if n_iso_u or n_iso_w:
        warnings.warn(f"{n_iso_u} users and {n_iso_w} urls have no edges; their rows keep the random init",
                      stacklevel=2)

    edge_p = graph.counts / graph.counts.sum()
    neg_p = negative_distribution(graph, config)
    steps_per_epoch = graph.num_edges
    total_steps = float(steps_per_epoch * max(config.epochs, 1))
    U, W = users.vectors, urls.vectors
    epoch_losses: list[float] = []

    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        picks = rng.choice(graph.num_edges, size=steps_per_epoch, p=edge_p)
        pos_u = graph.users[picks].copy()
        pos_w = graph.urls[picks].copy()
        negs = rng.choice(graph.num_urls, size=(steps_per_epoch, config.negatives), p=neg_p)
        losses = np.zeros(steps_per_epoch, dtype=np.float64)
        step0 = epoch * steps_per_epoch
        bad = _run_workers(U, W, pos_u, pos_w, negs, config, step0, total_steps, losses)
        if bad >= 0:
            raise TrainingError(f"non-finite loss at epoch {epoch}, step {bad} "
                                f"(user {pos_u[bad]}, url {pos_w[bad]}); try a smaller learning rate")
        epoch_losses.append(float(losses.mean()))
        logger.info("graph epoch %d loss %.5f", epoch, epoch_losses[-1])

    if not (np.isfinite(U).all() and np.isfinite(W).all()):
        raise TrainingError("embedding table contains non-finite values after training")
    return GraphTrainResult(users, urls, epoch_losses)


def _run_workers(U, W, pos_u, pos_w, negs, config, step0, total_steps, losses) -> int:
    lr0 = float(config.learning_rate)
    if config.workers == 1:
        return int(_sgd_chunk(U, W, pos_u, pos_w, negs, lr0, step0, total_steps, losses))
    bounds = np.linspace(0, len(pos_u), config.workers + 1).astype(int)
    results = [-1] * config.workers

    def work(i):
        a, b = bounds[i], bounds[i + 1]
        # every worker sees the same decay schedule position as the serial run would
        r = _sgd_chunk(U, W, pos_u[a:b], pos_w[a:b], negs[a:b], lr0, step0 + a, total_steps, losses[a:b])
        results[i] = a + r if r >= 0 else -1

    threads = [threading.Thread(target=work, args=(i,)) for i in range(config.workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    bad = [r for r in results if r >= 0]
    return min(bad) if bad else -1


def mean_loss(graph: BipartiteGraph, users: EmbeddingTable, urls: EmbeddingTable,
              config: GraphTrainConfig, num_samples: int = 2000) -> float:
    """Monte-Carlo estimate of the per-edge training loss without updating anything."""
    rng = np.random.default_rng([config.seed, 0x10F5])
    picks = rng.choice(graph.num_edges, size=num_samples, p=graph.counts / graph.counts.sum())
    negs = rng.choice(graph.num_urls, size=(num_samples, config.negatives), p=negative_distribution(graph, config))
    P = users.vectors[graph.users[picks]].astype(np.float64)
    pos = np.einsum("ij,ij->i", P, urls.vectors[graph.urls[picks]])
    neg = np.einsum("ij,ikj->ik", P, urls.vectors[negs])
    valid = negs != graph.urls[picks][:, None]
    return float(np.mean(np.logaddexp(0, -pos) + (np.logaddexp(0, neg) * valid).sum(axis=1)))


def write_loss_csv(losses, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(losses):
            fh.write(f"{epoch},{loss!r}\n")


# -- evaluation -------------------------------------------------------------

@dataclass
class LinkPredictionResult:
    hits_at_10: float
    mrr: float
    ranks: np.ndarray


def link_prediction_eval(users: EmbeddingTable, urls: EmbeddingTable, heldout_edges, negatives: int = 99,
                         seed: int = 0, exclude: BipartiteGraph | None = None) -> LinkPredictionResult:
    """Rank each held-out URL against ``negatives`` URLs sampled uniformly without replacement.

    ``exclude`` (usually the training graph) removes the user's known URLs from the
    negative pool. Ties count against the true URL.
    """
    edges = np.asarray(heldout_edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise ValidationError("no held-out edges")
    if edges.min() < 0 or edges[:, 0].max() >= len(users) or edges[:, 1].max() >= len(urls):
        raise ValidationError("held-out edge references an unknown user or url id")
    if users.dim != urls.dim:
        raise ValidationError("user and url tables differ in dimension")
    rng = np.random.default_rng([seed, 0x11F7])
    n_urls = len(urls)
    U = users.vectors.astype(np.float64)
    W = urls.vectors.astype(np.float64)
    ranks = np.empty(len(edges), dtype=np.int64)
    for i, (u, w) in enumerate(edges):
        banned = np.zeros(n_urls, dtype=bool)
        banned[w] = True
        if exclude is not None:
            banned[exclude.neighbors(u)] = True
        pool = np.flatnonzero(~banned)
        if len(pool) < negatives:
            raise ValidationError(f"only {len(pool)} candidate negatives for user {u}, need {negatives}")
        neg = rng.choice(pool, size=negatives, replace=False)
        true_score = U[u] @ W[w]
        ranks[i] = 1 + int(np.count_nonzero(W[neg] @ U[u] >= true_score))
    return LinkPredictionResult(float(np.mean(ranks <= 10)), float(np.mean(1.0 / ranks)), ranks)


def cosine_matrix(vectors) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.where(norms == 0, 1.0, norms)
    return X @ X.T


def community_cosine(table: EmbeddingTable, labels) -> tuple[float, float]:
    """Mean pairwise cosine within and across communities (self-pairs excluded)."""
    labels = np.asarray(labels)
    C = cosine_matrix(table.vectors)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return float(C[same & off_diag].mean()), float(C[~same].mean())


# -- persistence --------------------------------------------------------------

TABLE_MAGIC = b"URLEMBT\x00"
TABLE_VERSION = 1
_HEADER = struct.Struct("<8sIIQI4x")  # magic, version, side, rows, dim
HEADER_SIZE = _HEADER.size
VALUE_WIDTH = np.dtype("<f4").itemsize


def save_table(table: EmbeddingTable, path: str | os.PathLike) -> None:
    """Little-endian float32 rows after a fixed 32-byte header."""
    data = np.ascontiguousarray(table.vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, int(table.side), data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def load_table(path: str | os.PathLike, expect_dim: int | None = None,
               expect_side: Side | None = None) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version, side, rows, dim = _HEADER.unpack_from(raw)
    if magic != TABLE_MAGIC:
        raise FormatError(f"{path}: not an embedding table")
    if version != TABLE_VERSION:
        raise FormatError(f"{path}: unsupported table version {version}")
    if side not in (0, 1):
        raise FormatError(f"{path}: bad side code {side}")
    if expect_dim is not None and dim != expect_dim:
        raise FormatError(f"{path}: dim {dim} does not match expected {expect_dim}")
    if expect_side is not None and side != expect_side:
        raise FormatError(f"{path}: side {Side(side).name} does not match expected {Side(expect_side).name}")
    expected = HEADER_SIZE + rows * dim * VALUE_WIDTH
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vectors = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(rows, dim).astype(REAL)
    return EmbeddingTable(vectors, Side(side))
