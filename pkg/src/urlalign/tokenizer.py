"""Word-level tokenizer for webpage content.

A page is laid out as ``[CLS] url-tokens [FSEP] title-tokens [FSEP] desc-tokens [SEP]``
and capped at ``max_len`` tokens (160 by default). When the budget is exceeded
the description is cut from its tail first, then the title; URL tokens are
never dropped.
"""

from __future__ import annotations

import enum
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContentTooLongError, FormatError, ValidationError

MAX_LEN = 160

PAD_ID, UNK_ID, CLS_ID, SEP_ID, FSEP_ID = range(5)
RESERVED = ("<pad>", "<unk>", "[CLS]", "[SEP]", "[FSEP]")
NUM_SPECIAL_IN_SEQUENCE = 4  # CLS, two FSEP, SEP

VOCAB_MAGIC = "#urlalign-vocab"
VOCAB_VERSION = 1

_URL_SPLIT = re.compile(r"://|[/.?&=\-_\s]+")
_TEXT_TOKEN = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class WebpageContent:
    url: str
    title: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.url:
            raise ValidationError("webpage url must be non-empty")


class Segment(enum.IntEnum):
    SPECIAL = 0
    URL = 1
    TITLE = 2
    DESC = 3


def url_tokens(url: str) -> list[str]:
    return [t for t in _URL_SPLIT.split(url.lower()) if t]


def text_tokens(text: str) -> list[str]:
    return _TEXT_TOKEN.findall(text.lower())


def content_tokens(content: WebpageContent) -> tuple[list[str], list[str], list[str]]:
    return url_tokens(content.url), text_tokens(content.title), text_tokens(content.description)


class Vocab:
    """Immutable token <-> id mapping with five reserved ids."""

    def __init__(self, tokens: list[str], freqs: list[int] | None = None, min_freq: int = 1):
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary tokens must be unique")
        if any(t in RESERVED for t in tokens):
            raise ValidationError("corpus tokens may not reuse reserved strings")
        self.min_freq = min_freq
        self.id_to_token = list(RESERVED) + list(tokens)
        self.freqs = [0] * len(RESERVED) + list(freqs if freqs is not None else [0] * len(tokens))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token and self.freqs == other.freqs

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{VOCAB_MAGIC}\tv{VOCAB_VERSION}\tmin_freq={self.min_freq}\n")
            for i, (tok, freq) in enumerate(zip(self.id_to_token, self.freqs)):
                fh.write(f"{tok}\t{i}\t{freq}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if len(header) != 3 or header[0] != VOCAB_MAGIC or not header[2].startswith("min_freq="):
                raise FormatError(f"{path}: not a vocab file")
            if header[1] != f"v{VOCAB_VERSION}":
                raise FormatError(f"{path}: unsupported vocab version {header[1]}")
            min_freq = int(header[2].split("=", 1)[1])
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        if any(len(r) != 3 for r in rows):
            raise FormatError(f"{path}: malformed vocab row")
        if [int(r[1]) for r in rows] != list(range(len(rows))) or [r[0] for r in rows[:len(RESERVED)]] != list(RESERVED):
            raise FormatError(f"{path}: ids are not contiguous or reserved ids are wrong")
        body = rows[len(RESERVED):]
        return cls([r[0] for r in body], [int(r[2]) for r in body], min_freq=min_freq)


def build_vocab(corpus: Iterable[WebpageContent], min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Keep every token seen at least ``min_freq`` times.

    Ids are assigned by descending frequency, ties broken lexicographically, so the
    result only depends on the multiset of tokens. ``max_size`` caps the number of
    corpus tokens (reserved ids excluded).
    """
    counter: Counter[str] = Counter()
    n_docs = 0
    for content in corpus:
        n_docs += 1
        for seg in content_tokens(content):
            counter.update(seg)
    if n_docs == 0:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counter.pop(tok, None)
    kept = sorted((t for t, c in counter.items() if c >= min_freq), key=lambda t: (-counter[t], t))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocab(kept, [counter[t] for t in kept], min_freq=min_freq)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray
    truncated: int = 0  # tokens removed to fit the length budget

    def __post_init__(self):
        if len(self.ids) != len(self.segments):
            raise ValidationError("ids and segments differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def attention_length(self) -> int:
        return int(np.count_nonzero(self.ids != PAD_ID))

    def padded(self, length: int) -> "TokenSequence":
        if length < len(self.ids):
            raise ValidationError("cannot pad to a shorter length")
        extra = length - len(self.ids)
        return TokenSequence(np.concatenate([self.ids, np.full(extra, PAD_ID, dtype=self.ids.dtype)]),
                             np.concatenate([self.segments, np.full(extra, Segment.SPECIAL, dtype=self.segments.dtype)]),
                             self.truncated)

    def segment_ids(self, segment: Segment) -> np.ndarray:
        return self.ids[self.segments == segment]


def tokenize(content: WebpageContent, vocab: Vocab, max_len: int = MAX_LEN) -> TokenSequence:
    u, t, d = ([vocab.lookup(tok) for tok in seg] for seg in content_tokens(content))
    budget = max_len - NUM_SPECIAL_IN_SEQUENCE
    if len(u) > budget:
        raise ContentTooLongError(f"url has {len(u)} tokens; at most {budget} fit in {max_len}")
    over = len(u) + len(t) + len(d) - budget
    removed = 0
    if over > 0:
        cut = min(over, len(d))
        d = d[:len(d) - cut]
        over -= cut
        removed += cut
        if over > 0:
            t = t[:len(t) - over]
            removed += over
    ids = [CLS_ID, *u, FSEP_ID, *t, FSEP_ID, *d, SEP_ID]
    segs = ([Segment.SPECIAL] + [Segment.URL] * len(u) + [Segment.SPECIAL] + [Segment.TITLE] * len(t)
            + [Segment.SPECIAL] + [Segment.DESC] * len(d) + [Segment.SPECIAL])
    return TokenSequence(np.array(ids, dtype=np.int64), np.array(segs, dtype=np.int8), removed)


_SEGMENT_LABEL = {Segment.URL: "url", Segment.TITLE: "title", Segment.DESC: "desc"}


def detokenize_debug(seq: TokenSequence, vocab: Vocab) -> str:
    """Render a sequence as ``[CLS] url{...} [FSEP] title{...} [FSEP] desc{...} [SEP]``.

    Lossy: out-of-vocabulary tokens show as ``<unk>``. A truncated sequence ends its
    desc block with ``...+N``.
    """
    parts: list[str] = []
    current: Segment | None = None
    for tok_id, seg in zip(seq.ids.tolist(), seq.segments.tolist()):
        if not 0 <= tok_id < len(vocab):
            raise ValidationError(f"token id {tok_id} outside vocabulary of size {len(vocab)}")
        seg = Segment(seg)
        if seg != current and current not in (None, Segment.SPECIAL):
            parts.append("}")
        if seg == Segment.SPECIAL:
            if tok_id == SEP_ID and seq.truncated and current == Segment.DESC:
                parts.insert(len(parts) - 1, f"...+{seq.truncated}")
            if tok_id != PAD_ID:
                parts.append(vocab.id_to_token[tok_id])
        else:
            if seg != current:
                parts.append(_SEGMENT_LABEL[seg] + "{")
            parts.append(vocab.id_to_token[tok_id])
        current = seg
    if current not in (None, Segment.SPECIAL):
        parts.append("}")
    return " ".join(parts)
