"""Downstream task suite: few-shot probes over aligned and unaligned encoders.

Three synthetic tasks stand in for the topic, hashtag and engagement evaluations:

* ``topic``: fresh pages labelled with their community, CLS-pooled features.
* ``hashtag``: the same pages with mean-pooled features and a ReLU probe.
* ``engagement``: held-out user/URL edges against sampled non-edges, with the
  user's graph vector concatenated to the page representation.

Each task keeps one fixed test set; only the few-shot training draw changes
with N and the probe seed.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingTable
from .encoder import TextEncoder, represent_poolings
from .errors import FormatError, ValidationError
from .graph import BipartiteGraph
from .probes import ProbeConfig, few_shot_sample, macro_f1, micro_f1, pr_auc, train_probe, user_url_features
from .synthetic import SyntheticCorpus
from .tokenizer import Vocab, tokenize

logger = logging.getLogger(__name__)

TASK_KINDS = ("topic", "hashtag", "engagement")
DEFAULT_GRID = (8, 16, 64, 128, 256, 512)
REPORT_HEADER = ("task", "variant", "N", "metric", "value", "seed")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    labels: str  # one of TASK_KINDS
    pooling: str = "cls"
    activation: str = "tanh"
    n_grid: tuple[int, ...] = DEFAULT_GRID
    seeds: tuple[int, ...] = (0, 1, 2)
    test_per_class: int = 250

    def __post_init__(self):
        if self.labels not in TASK_KINDS:
            raise ValidationError(f"task labels must be one of {TASK_KINDS}, got {self.labels!r}")
        if self.pooling not in ("cls", "mean"):
            raise ValidationError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if not self.n_grid or min(self.n_grid) < 1:
            raise ValidationError("n_grid must be a non-empty list of positive counts")
        if not self.seeds:
            raise ValidationError("at least one probe seed is required")
        if self.test_per_class < 1:
            raise ValidationError("test_per_class must be >= 1")


def default_tasks(n_grid=DEFAULT_GRID, seeds=(0, 1, 2), test_per_class: int = 250) -> list[TaskSpec]:
    n_grid, seeds = tuple(n_grid), tuple(seeds)
    return [
        TaskSpec("topic", "topic", "cls", "tanh", n_grid, seeds, test_per_class),
        TaskSpec("hashtag", "hashtag", "mean", "relu", n_grid, seeds, test_per_class),
        TaskSpec("engagement", "engagement", "cls", "tanh", n_grid, seeds, test_per_class),
    ]


@dataclass(frozen=True)
class MetricRecord:
    task: str
    variant: str
    n: int
    metric: str
    value: float
    seed: int


@dataclass
class MetricsReport:
    records: list[MetricRecord] = field(default_factory=list)

    def add(self, *args) -> None:
        self.records.append(MetricRecord(*args))

    def values(self, task: str, variant: str, n: int, metric: str) -> list[float]:
        return [r.value for r in self.records
                if (r.task, r.variant, r.n, r.metric) == (task, variant, n, metric)]

    def mean(self, task: str, variant: str, n: int, metric: str) -> float:
        vals = self.values(task, variant, n, metric)
        if not vals:
            raise KeyError(f"no records for {(task, variant, n, metric)}")
        return float(np.mean(vals))

    def cells(self) -> set[tuple[str, str, int]]:
        return {(r.task, r.variant, r.n) for r in self.records}

    def write(self, fh) -> None:
        fh.write("\t".join(REPORT_HEADER) + "\n")
        for r in self.records:
            fh.write(f"{r.task}\t{r.variant}\t{r.n}\t{r.metric}\t{r.value!r}\t{r.seed}\n")

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            self.write(fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsReport":
        report = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != REPORT_HEADER:
                raise FormatError(f"{path}: not a metrics report")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 6:
                    raise FormatError(f"{path}: line {lineno}: expected 6 fields")
                report.add(parts[0], parts[1], int(parts[2]), parts[3], float(parts[4]), int(parts[5]))
        return report


@dataclass
class TaskData:
    """Precomputed features per variant plus labels and the fixed train-pool/test split."""
    features: dict[str, np.ndarray]
    labels: np.ndarray
    pool: np.ndarray
    test: np.ndarray
    num_classes: int


def _split_pool_test(labels: np.ndarray, test_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x7E57])
    pool, test = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        test.append(idx[:test_per_class])
        pool.append(idx[test_per_class:])
    return np.sort(np.concatenate(pool)), np.sort(np.concatenate(test))


def page_task_data(encoders: dict[str, TextEncoder], corpus: SyntheticCorpus, vocab: Vocab,
                   max_n: int, test_per_class: int, seed: int) -> dict[str, TaskData]:
    """Features for the topic (CLS) and hashtag (mean) tasks on fresh, unseen pages."""
    pages, labels = corpus.sample_pages(max_n + 1 + test_per_class, seed)
    seqs = [tokenize(p, vocab) for p in pages]
    pool, test = _split_pool_test(labels, test_per_class, seed)
    views = {name: represent_poolings(enc, seqs, ("cls", "mean")) for name, enc in encoders.items()}
    k = corpus.num_communities
    return {
        "cls": TaskData({v: f["cls"] for v, f in views.items()}, labels, pool, test, k),
        "mean": TaskData({v: f["mean"] for v, f in views.items()}, labels, pool, test, k),
    }


def sample_non_edges(graph: BipartiteGraph, n: int, seed: int) -> np.ndarray:
    """``n`` distinct (user, url) pairs that are not edges of ``graph``."""
    free = graph.num_users * graph.num_urls - graph.num_edges
    if n > free:
        raise ValidationError(f"asked for {n} non-edges but only {free} exist")
    rng = np.random.default_rng([seed, 0x0E6E])
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < n:
        u = int(rng.integers(graph.num_users))
        w = int(rng.integers(graph.num_urls))
        if (u, w) in seen or graph.has_edge(u, w):
            continue
        seen.add((u, w))
        out.append((u, w))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def engagement_task_data(encoders: dict[str, TextEncoder], corpus: SyntheticCorpus, vocab: Vocab,
                         users: EmbeddingTable, heldout: np.ndarray, max_n: int, test_per_class: int,
                         seed: int) -> TaskData:
    """Balanced held-out edges (label 1) and non-edges of the full graph (label 0)."""
    heldout = np.asarray(heldout, dtype=np.int64).reshape(-1, 2)
    need = max_n + 1 + test_per_class
    if len(heldout) < need:
        raise ValidationError(f"engagement task needs {need} held-out edges, found {len(heldout)}")
    rng = np.random.default_rng([seed, 0xE6A])
    pos = heldout[np.sort(rng.choice(len(heldout), need, replace=False))]
    neg = sample_non_edges(corpus.graph, need, seed)
    pairs = np.concatenate([neg, pos])
    labels = np.repeat([0, 1], need)
    seqs = [tokenize(c, vocab) for c in corpus.contents]
    features = {}
    for name, enc in encoders.items():
        reps = represent_poolings(enc, seqs, ("cls",))["cls"]
        features[name] = user_url_features(users.vectors.astype(np.float64), pairs[:, 0], reps[pairs[:, 1]])
    pool, test = _split_pool_test(labels, test_per_class, seed)
    return TaskData(features, labels, pool, test, 2)


def _score_cell(report: MetricsReport, task: TaskSpec, data: TaskData, variant: str, n: int, seed: int,
                probe: ProbeConfig | None) -> None:
    pool_labels = data.labels[data.pool]
    split = few_shot_sample(pool_labels, n, seed=seed, test_cap=None)
    train_idx = data.pool[split.train]
    x = data.features[variant]
    if probe is None:
        cfg = ProbeConfig(num_classes=data.num_classes, activation=task.activation, seed=seed)
    else:
        cfg = dataclasses.replace(probe, num_classes=data.num_classes, activation=task.activation, seed=seed)
    head = train_probe(x[train_idx], data.labels[train_idx], cfg).head
    proba = head.predict_proba(x[data.test])
    pred = proba.argmax(axis=1)
    truth = data.labels[data.test]
    report.add(task.name, variant, n, "macro_f1", macro_f1(pred, truth, data.num_classes), seed)
    report.add(task.name, variant, n, "micro_f1", micro_f1(pred, truth, data.num_classes), seed)
    if data.num_classes == 2:
        report.add(task.name, variant, n, "pr_auc", pr_auc(proba[:, 1], truth), seed)


def run_task_suite(encoders: dict[str, TextEncoder], users: EmbeddingTable, corpus: SyntheticCorpus,
                   vocab: Vocab, heldout: np.ndarray, tasks: list[TaskSpec] | None = None,
                   seed: int = 0, probe: ProbeConfig | None = None) -> MetricsReport:
    """Probe every (task, variant, N, seed) cell; ``encoders`` maps variant name to a frozen encoder.

    ``heldout`` holds the (user, url) edges withheld from graph training; ``users``
    is the user table trained without them. ``probe`` supplies the head's
    hyperparameters (its class count, activation and seed are set per cell).
    """
    tasks = tasks if tasks is not None else default_tasks()
    if not encoders:
        raise ValidationError("no encoders to evaluate")
    report = MetricsReport()
    cache: dict[tuple, object] = {}
    for task in tasks:
        key = (task.labels == "engagement", max(task.n_grid), task.test_per_class)
        if key not in cache:
            if key[0]:
                cache[key] = engagement_task_data(encoders, corpus, vocab, users, heldout, key[1], key[2], seed)
            else:
                cache[key] = page_task_data(encoders, corpus, vocab, key[1], key[2], seed)
        data = cache[key] if key[0] else cache[key][task.pooling]
        for variant in encoders:
            for n in task.n_grid:
                for s in task.seeds:
                    _score_cell(report, task, data, variant, n, s, probe)
            logger.info("task %s variant %s done", task.name, variant)
    return report
