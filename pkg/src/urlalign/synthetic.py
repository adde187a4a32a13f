"""Planted-community engagement corpus.

Users and URLs are assigned to communities round-robin. Every user engages with
``edges_per_user`` distinct URLs; each pick lands in the user's own community with
probability ``p_in`` and otherwise on a uniformly chosen URL from another
community. Page text is drawn from a per-community topic vocabulary mixed with a
shared background vocabulary, so content carries the same community signal as
the graph.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .graph import BipartiteGraph, EngagementKind, load_edges, save_edges
from .tokenizer import WebpageContent

_ONSETS = ("b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io", "ou")

# Favorite, Reply, Retweet, Share
_KIND_WEIGHTS = np.array([0.55, 0.10, 0.20, 0.15])

CORPUS_FORMAT_VERSION = 1


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf(n: int, exponent: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


@dataclass
class ContentModel:
    """Token distributions for page text: one topic block per community plus a shared background."""

    vocab_size: int
    num_communities: int
    seed: int
    topic_mix: float = 0.5
    background_share: float = 0.4
    domains_per_community: int = 4
    words: list[str] = field(init=False, repr=False)
    background: np.ndarray = field(init=False, repr=False)
    topics: list[np.ndarray] = field(init=False, repr=False)
    domains: list[list[str]] = field(init=False, repr=False)

    def __post_init__(self):
        k = self.num_communities
        n_background = int(round(self.vocab_size * self.background_share))
        if self.vocab_size - n_background < 2 * k:
            raise ValidationError(f"vocab_size {self.vocab_size} too small for {k} communities")
        rng = np.random.default_rng([self.seed, 0xC0])
        self.words = _make_words(self.vocab_size, rng)
        self.background = np.arange(n_background)
        topic_ids = np.arange(n_background, self.vocab_size)
        self.topics = [block for block in np.array_split(topic_ids, k)]
        self.domains = []
        for block in self.topics:
            picks = rng.choice(block, size=(self.domains_per_community, 2), replace=True)
            self.domains.append([self.words[a] + self.words[b] for a, b in picks])
        self._bg_p = _zipf(len(self.background))
        self._topic_p = [_zipf(len(block)) for block in self.topics]

    def _draw(self, community: int, n: int, rng: np.random.Generator) -> list[str]:
        from_topic = rng.random(n) < self.topic_mix
        topic = rng.choice(self.topics[community], size=n, p=self._topic_p[community])
        back = rng.choice(self.background, size=n, p=self._bg_p)
        return [self.words[i] for i in np.where(from_topic, topic, back)]

    def sample_page(self, community: int, page_id: int, rng: np.random.Generator) -> WebpageContent:
        domain = self.domains[community][rng.integers(self.domains_per_community)]
        section = self._draw(community, 1, rng)[0]
        slug = "-".join(self._draw(community, int(rng.integers(2, 6)), rng))
        url = f"https://www.{domain}.com/{section}/{slug}-{page_id}"
        title_words = self._draw(community, int(rng.integers(4, 10)), rng)
        title = " ".join(w.capitalize() for w in title_words)
        sentences = []
        remaining = int(rng.integers(15, 60))
        while remaining > 0:
            n = min(remaining, int(rng.integers(6, 14)))
            words = self._draw(community, n, rng)
            sentences.append(" ".join([words[0].capitalize(), *words[1:]]) + ".")
            remaining -= n
        return WebpageContent(url, title, " ".join(sentences))


@dataclass
class SyntheticCorpus:
    graph: BipartiteGraph
    contents: list[WebpageContent]
    url_community: np.ndarray
    user_community: np.ndarray
    num_communities: int
    params: dict
    content_model: ContentModel = field(repr=False)

    def __post_init__(self):
        if len(self.contents) != self.graph.num_urls or len(self.url_community) != self.graph.num_urls:
            raise ValidationError("need exactly one content entry and label per URL")
        if len(self.url_community) and not (0 <= self.url_community.min() and self.url_community.max() < self.num_communities):
            raise ValidationError("url community label out of range")

    def sample_pages(self, n_per_community: int, seed: int) -> tuple[list[WebpageContent], np.ndarray]:
        """Fresh pages (never in the graph) drawn from each community's content distribution."""
        rng = np.random.default_rng([seed, 0x9A6E])
        contents, labels = [], []
        next_id = self.graph.num_urls + 1_000_000 * (1 + seed % 1000)
        for c in range(self.num_communities):
            for _ in range(n_per_community):
                contents.append(self.content_model.sample_page(c, next_id, rng))
                labels.append(c)
                next_id += 1
        return contents, np.array(labels, dtype=np.int64)


def generate_synthetic(num_users: int = 400, num_urls: int = 200, num_communities: int = 4,
                       edges_per_user: int = 30, p_in: float = 0.9, vocab_size: int = 1000,
                       seed: int = 0, topic_mix: float = 0.5) -> SyntheticCorpus:
    """Build a planted-community corpus; a pure function of its arguments."""
    if num_users <= 0 or num_urls <= 0 or num_communities <= 0:
        raise ValidationError("num_users, num_urls and num_communities must be positive")
    if edges_per_user <= 0:
        raise ValidationError("edges_per_user must be positive")
    if not 0.5 < p_in <= 1.0:
        raise ValidationError(f"p_in must be in (0.5, 1], got {p_in}")
    if num_communities > min(num_users, num_urls):
        raise ValidationError("more communities than users or urls")
    k = num_communities
    user_comm = np.arange(num_users) % k
    url_comm = np.arange(num_urls) % k
    members = [np.flatnonzero(url_comm == c) for c in range(k)]
    smallest_in = min(len(m) for m in members)
    if p_in == 1.0 and edges_per_user > smallest_in:
        raise ValidationError("edges_per_user exceeds community size with p_in=1")
    if edges_per_user > num_urls:
        raise ValidationError("edges_per_user exceeds the number of urls")

    rng = np.random.default_rng([seed, 0xED6E])
    users, urls = [], []
    for u in range(num_users):
        c = user_comm[u]
        own = list(rng.permutation(members[c]))
        other = list(rng.permutation(np.flatnonzero(url_comm != c)))
        for _ in range(edges_per_user):
            if (rng.random() < p_in and own) or not other:
                w = own.pop()
            else:
                w = other.pop()
            users.append(u)
            urls.append(w)
    n_edges = len(users)
    kinds = rng.choice(len(_KIND_WEIGHTS), size=n_edges, p=_KIND_WEIGHTS)
    counts = rng.geometric(0.6, size=n_edges)
    kind_counts = np.zeros((n_edges, len(EngagementKind)), dtype=np.int64)
    kind_counts[np.arange(n_edges), kinds] = counts
    graph = BipartiteGraph(num_users, num_urls, users, urls, kind_counts)

    model = ContentModel(vocab_size, k, seed, topic_mix=topic_mix)
    content_rng = np.random.default_rng([seed, 0xC047])
    contents = [model.sample_page(int(url_comm[j]), j, content_rng) for j in range(num_urls)]
    params = dict(num_users=num_users, num_urls=num_urls, num_communities=num_communities,
                  edges_per_user=edges_per_user, p_in=p_in, vocab_size=vocab_size, seed=seed,
                  topic_mix=topic_mix)
    return SyntheticCorpus(graph, contents, url_comm, user_comm, k, params, model)


def within_community_fraction(graph: BipartiteGraph, user_community, url_community) -> float:
    return float(np.mean(np.asarray(user_community)[graph.users] == np.asarray(url_community)[graph.urls]))


def _check_field(value: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValidationError(f"field contains a tab or newline: {value[:40]!r}")
    return value


def save_contents(contents: list[WebpageContent], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j, c in enumerate(contents):
            fh.write(f"{j}\t{_check_field(c.url)}\t{_check_field(c.title)}\t{_check_field(c.description)}\n")


def load_contents(path: str | os.PathLike) -> list[WebpageContent]:
    rows: dict[int, WebpageContent] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4 or not parts[0].isdigit():
                raise FormatError(f"{path}:{lineno}: expected url_id<TAB>url<TAB>title<TAB>description")
            rows[int(parts[0])] = WebpageContent(parts[1], parts[2], parts[3])
    if sorted(rows) != list(range(len(rows))):
        raise FormatError(f"{path}: url ids are not contiguous from 0")
    return [rows[i] for i in range(len(rows))]


def save_corpus(corpus: SyntheticCorpus, directory: str | os.PathLike) -> None:
    """Write ``edges.tsv``, ``contents.tsv``, ``labels.tsv`` and ``corpus.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_edges(corpus.graph, d / "edges.tsv")
    save_contents(corpus.contents, d / "contents.tsv")
    with open(d / "labels.tsv", "w", encoding="utf-8") as fh:
        for i, c in enumerate(corpus.user_community):
            fh.write(f"user\t{i}\t{int(c)}\n")
        for j, c in enumerate(corpus.url_community):
            fh.write(f"url\t{j}\t{int(c)}\n")
    meta = {"format_version": CORPUS_FORMAT_VERSION, "params": corpus.params}
    (d / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(directory: str | os.PathLike) -> SyntheticCorpus:
    d = Path(directory)
    meta = json.loads((d / "corpus.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported corpus version {meta.get('format_version')}")
    p = meta["params"]
    graph = load_edges(d / "edges.tsv", dense=True, num_users=p["num_users"], num_urls=p["num_urls"])
    contents = load_contents(d / "contents.tsv")
    user_comm = np.zeros(p["num_users"], dtype=np.int64)
    url_comm = np.zeros(p["num_urls"], dtype=np.int64)
    with open(d / "labels.tsv", encoding="utf-8") as fh:
        for line in fh:
            side, idx, comm = line.rstrip("\n").split("\t")
            (user_comm if side == "user" else url_comm)[int(idx)] = int(comm)
    model = ContentModel(p["vocab_size"], p["num_communities"], p["seed"], topic_mix=p.get("topic_mix", 0.5))
    return SyntheticCorpus(graph, contents, url_comm, user_comm, p["num_communities"], p, model)
