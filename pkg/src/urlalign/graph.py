"""Bipartite user/URL engagement graph: data model, TSV ingestion and degree statistics.

Users and URLs live in separate dense id spaces (``0..num_users-1`` and
``0..num_urls-1``). Repeated engagements between the same pair are merged into
one edge; per-kind counts are kept as metadata so the graph can be written back
out without loss.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)


class EngagementKind(enum.IntEnum):
    FAVORITE = 0
    REPLY = 1
    RETWEET = 2
    SHARE = 3

    @classmethod
    def parse(cls, text: str) -> "EngagementKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown engagement kind {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


NUM_KINDS = len(EngagementKind)


@dataclass(frozen=True)
class EngagementEdge:
    user: int
    url: int
    kind: EngagementKind = EngagementKind.FAVORITE
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError(f"edge count must be >= 1, got {self.count}")
        if self.user < 0 or self.url < 0:
            raise ValidationError("ids must be non-negative")


class IdMap:
    """Bidirectional map between original string ids and dense integer ids."""

    def __init__(self, originals: Sequence[str]):
        self.originals = list(originals)
        self._index = {orig: i for i, orig in enumerate(self.originals)}
        if len(self._index) != len(self.originals):
            raise ValidationError("duplicate original id in id map")

    @classmethod
    def from_keys(cls, keys: Iterable[str]) -> "IdMap":
        """Dense ids follow numeric order when every key is an integer, else string order."""
        unique = set(keys)
        if all(k.isdigit() for k in unique):
            ordered = sorted(unique, key=int)
        else:
            ordered = sorted(unique)
        return cls(ordered)

    def __len__(self) -> int:
        return len(self.originals)

    def __eq__(self, other) -> bool:
        return isinstance(other, IdMap) and self.originals == other.originals

    def to_dense(self, original: str) -> int:
        try:
            return self._index[original]
        except KeyError:
            raise ValidationError(f"unknown id {original!r}") from None

    def to_original(self, dense: int) -> str:
        if not 0 <= dense < len(self.originals):
            raise ValidationError(f"dense id {dense} out of range")
        return self.originals[dense]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, orig in enumerate(self.originals):
                fh.write(f"{orig}\t{i}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "IdMap":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ParseError("expected 'original<TAB>dense'", lineno)
                rows.append((int(parts[1]), parts[0]))
        rows.sort()
        if [d for d, _ in rows] != list(range(len(rows))):
            raise ValidationError(f"{path}: dense ids are not contiguous")
        return cls([orig for _, orig in rows])


class BipartiteGraph:
    """Immutable bipartite engagement graph with merged (user, url) edges.

    Edge arrays are sorted by ``(user, url)``; ``kind_counts[e, k]`` holds how many
    engagements of kind ``k`` were merged into edge ``e``.
    """

    def __init__(self, num_users: int, num_urls: int, users, urls, kind_counts,
                 user_ids: IdMap | None = None, url_ids: IdMap | None = None):
        users = np.asarray(users, dtype=np.int64)
        urls = np.asarray(urls, dtype=np.int64)
        kind_counts = np.asarray(kind_counts, dtype=np.int64).reshape(len(users), NUM_KINDS)
        if num_users < 0 or num_urls < 0:
            raise ValidationError("partition sizes must be non-negative")
        if len(users) != len(urls):
            raise ValidationError("users and urls arrays differ in length")
        if len(users):
            if users.min() < 0 or users.max() >= num_users:
                raise ValidationError("user id outside [0, num_users)")
            if urls.min() < 0 or urls.max() >= num_urls:
                raise ValidationError("url id outside [0, num_urls)")
        if (kind_counts < 0).any() or (kind_counts.sum(axis=1) < 1).any():
            raise ValidationError("every edge needs a positive engagement count")
        order = np.lexsort((urls, users))
        users, urls, kind_counts = users[order], urls[order], kind_counts[order]
        if len(users) > 1:
            dup = (np.diff(users) == 0) & (np.diff(urls) == 0)
            if dup.any():
                raise ValidationError("duplicate (user, url) pair; use BipartiteGraph.from_edges to merge")
        if user_ids is not None and len(user_ids) != num_users:
            raise ValidationError("user id map size does not match num_users")
        if url_ids is not None and len(url_ids) != num_urls:
            raise ValidationError("url id map size does not match num_urls")

        self.num_users = int(num_users)
        self.num_urls = int(num_urls)
        self.users = users
        self.urls = urls
        self.kind_counts = kind_counts
        self.counts = kind_counts.sum(axis=1)
        self.user_ids = user_ids
        self.url_ids = url_ids
        self.user_degrees = np.bincount(users, minlength=self.num_users)
        self.url_degrees = np.bincount(urls, minlength=self.num_urls)
        self.url_engagements = np.bincount(urls, weights=self.counts, minlength=self.num_urls).astype(np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(self.user_degrees)])
        for arr in (self.users, self.urls, self.kind_counts, self.counts, self.user_degrees,
                    self.url_degrees, self.url_engagements, self.indptr):
            arr.flags.writeable = False

    @classmethod
    def from_edges(cls, edges: Iterable[EngagementEdge], num_users: int | None = None,
                   num_urls: int | None = None, **id_maps) -> "BipartiteGraph":
        """Build a graph, merging repeated pairs: kinds are unioned and counts summed."""
        merged: dict[tuple[int, int], np.ndarray] = {}
        for edge in edges:
            key = (edge.user, edge.url)
            if key not in merged:
                merged[key] = np.zeros(NUM_KINDS, dtype=np.int64)
            merged[key][int(edge.kind)] += edge.count
        keys = list(merged)
        users = np.array([k[0] for k in keys], dtype=np.int64)
        urls = np.array([k[1] for k in keys], dtype=np.int64)
        kc = np.array([merged[k] for k in keys], dtype=np.int64).reshape(len(keys), NUM_KINDS)
        if num_users is None:
            num_users = int(users.max()) + 1 if len(users) else 0
        if num_urls is None:
            num_urls = int(urls.max()) + 1 if len(urls) else 0
        return cls(num_users, num_urls, users, urls, kc, **id_maps)

    @property
    def num_edges(self) -> int:
        return len(self.users)

    def __len__(self) -> int:
        return self.num_edges

    def __eq__(self, other) -> bool:
        if not isinstance(other, BipartiteGraph):
            return NotImplemented
        return (self.num_users == other.num_users and self.num_urls == other.num_urls
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.urls, other.urls)
                and np.array_equal(self.kind_counts, other.kind_counts))

    def __repr__(self) -> str:
        return f"BipartiteGraph(num_users={self.num_users}, num_urls={self.num_urls}, num_edges={self.num_edges})"

    def neighbors(self, user: int) -> np.ndarray:
        """Sorted URL ids the user engaged with."""
        return self.urls[self.indptr[user]:self.indptr[user + 1]]

    def has_edge(self, user: int, url: int) -> bool:
        nbrs = self.neighbors(user)
        i = np.searchsorted(nbrs, url)
        return bool(i < len(nbrs) and nbrs[i] == url)

    def kinds(self, edge_index: int) -> frozenset[EngagementKind]:
        row = self.kind_counts[edge_index]
        return frozenset(EngagementKind(k) for k in range(NUM_KINDS) if row[k] > 0)

    def edge_pairs(self) -> np.ndarray:
        """(num_edges, 2) array of (user, url)."""
        return np.stack([self.users, self.urls], axis=1)

    def iter_edges(self) -> Iterator[EngagementEdge]:
        """One record per (pair, kind) with a non-zero count."""
        for e in range(self.num_edges):
            for k in range(NUM_KINDS):
                c = int(self.kind_counts[e, k])
                if c:
                    yield EngagementEdge(int(self.users[e]), int(self.urls[e]), EngagementKind(k), c)

    def subgraph(self, edge_mask) -> "BipartiteGraph":
        """Same node sets, keeping only the selected edges."""
        edge_mask = np.asarray(edge_mask)
        return BipartiteGraph(self.num_users, self.num_urls, self.users[edge_mask], self.urls[edge_mask],
                              self.kind_counts[edge_mask], user_ids=self.user_ids, url_ids=self.url_ids)


def _idmap_paths(path: Path) -> tuple[Path, Path]:
    return (path.with_name(path.name + ".user_ids.tsv"), path.with_name(path.name + ".url_ids.tsv"))


def load_edges(path: str | os.PathLike, dense: bool = False, num_users: int | None = None,
               num_urls: int | None = None, write_idmap: bool = True) -> BipartiteGraph:
    """Read a ``user<TAB>url<TAB>kind<TAB>count`` edge list.

    With ``dense=False`` (the default) ids are arbitrary strings remapped to dense
    integers, and the two id maps are written next to the input as
    ``<name>.user_ids.tsv`` / ``<name>.url_ids.tsv``. With ``dense=True`` ids must
    already be non-negative integers and are used as-is.
    """
    path = Path(path)
    records: list[tuple[str, str, EngagementKind, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            user, url, kind, count = parts
            if not user or not url:
                raise ParseError("empty id", lineno)
            try:
                count_val = int(count)
            except ValueError:
                raise ParseError(f"count {count!r} is not an integer", lineno) from None
            if count_val < 1:
                raise ParseError(f"count must be >= 1, got {count_val}", lineno)
            try:
                kind_val = EngagementKind.parse(kind)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            if dense and not (user.isdigit() and url.isdigit()):
                raise ParseError("dense mode requires non-negative integer ids", lineno)
            records.append((user, url, kind_val, count_val))
    if not records:
        raise ValidationError(f"{path}: no edge records")

    if dense:
        edges = [EngagementEdge(int(u), int(w), k, c) for u, w, k, c in records]
        return BipartiteGraph.from_edges(edges, num_users=num_users, num_urls=num_urls)

    user_map = IdMap.from_keys(r[0] for r in records)
    url_map = IdMap.from_keys(r[1] for r in records)
    edges = [EngagementEdge(user_map.to_dense(u), url_map.to_dense(w), k, c) for u, w, k, c in records]
    graph = BipartiteGraph.from_edges(edges, num_users=len(user_map), num_urls=len(url_map),
                                      user_ids=user_map, url_ids=url_map)
    if write_idmap:
        user_path, url_path = _idmap_paths(path)
        user_map.save(user_path)
        url_map.save(url_path)
    return graph


def save_edges(graph: BipartiteGraph, path: str | os.PathLike) -> None:
    """Write one line per (user, url, kind); original ids are used when the graph has id maps."""
    with open(path, "w", encoding="utf-8") as fh:
        for edge in graph.iter_edges():
            u = graph.user_ids.to_original(edge.user) if graph.user_ids else str(edge.user)
            w = graph.url_ids.to_original(edge.url) if graph.url_ids else str(edge.url)
            fh.write(f"{u}\t{w}\t{edge.kind.label}\t{edge.count}\n")


@dataclass(frozen=True)
class SideStats:
    min: int
    median: int
    p95: int
    max: int


@dataclass(frozen=True)
class DegreeStats:
    users: SideStats
    urls: SideStats


def _order_stats(degrees: np.ndarray) -> SideStats:
    # inverted_cdf picks an actual order statistic: ceil(q * n)-th smallest value
    q50, q95 = np.percentile(degrees, [50, 95], method="inverted_cdf")
    return SideStats(int(degrees.min()), int(q50), int(q95), int(degrees.max()))


def degree_stats(graph: BipartiteGraph) -> DegreeStats:
    """Min/median/p95/max degree on each side.

    Quantiles are order statistics (nearest rank), so they are always observed
    integer degrees. Nodes without edges count as degree 0.
    """
    if graph.num_edges == 0 or graph.num_users == 0 or graph.num_urls == 0:
        raise ValidationError("degree_stats needs a non-empty graph")
    return DegreeStats(_order_stats(graph.user_degrees), _order_stats(graph.url_degrees))


def split_edges(graph: BipartiteGraph, fraction: float, seed: int = 0) -> tuple[BipartiteGraph, np.ndarray]:
    """Hold out a random ``fraction`` of merged edges; returns (train graph, held-out (user, url) pairs)."""
    if not 0.0 <= fraction < 1.0:
        raise ValidationError("holdout fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, 0x5A17])
    n_hold = int(round(fraction * graph.num_edges))
    held = np.zeros(graph.num_edges, dtype=bool)
    held[rng.choice(graph.num_edges, size=n_hold, replace=False)] = True
    return graph.subgraph(~held), graph.edge_pairs()[held]
