"""Contrastive alignment of the text encoder to frozen graph URL embeddings.

For a batch of B pages with pooled representations ``f_i`` and graph targets
``g_i`` the per-item loss is

    L_i = -log( exp(cos(f_i, g_i) / tau) / sum_j exp(cos(f_i, g_j) / tau) )

where ``j`` runs over the B targets in the batch, the positive included. Only the
encoder and its pooler are optimized; the URL table is read-only.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import torch

from .embed import EmbeddingTable
from .encoder import TextEncoder, collate, represent_batch
from .errors import TrainingError, ValidationError
from .tokenizer import TokenSequence, Vocab, WebpageContent, tokenize

logger = logging.getLogger(__name__)


@dataclass
class AlignConfig:
    temperature: float = 0.01
    batch_size: int = 128
    epochs: int = 3
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValidationError("epochs must be >= 0 and learning_rate positive")


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_logits(reps: torch.Tensor, targets: torch.Tensor, temperature: float) -> torch.Tensor:
    rn = reps.norm(dim=1, keepdim=True)
    tn = targets.norm(dim=1, keepdim=True)
    if (rn == 0).any() or (tn == 0).any():
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return (reps / rn) @ (targets / tn).T / temperature


def info_nce_loss(reps, targets, temperature: float) -> torch.Tensor:
    """Mean in-batch InfoNCE loss; row i's positive is target i."""
    reps = torch.as_tensor(reps)
    targets = torch.as_tensor(targets, dtype=reps.dtype)
    if reps.ndim != 2 or reps.shape != targets.shape:
        raise ValidationError(f"reps {tuple(reps.shape)} and targets {tuple(targets.shape)} must match")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    logits = similarity_logits(reps, targets, temperature)
    # logsumexp subtracts the row max before exponentiating
    loss = (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite InfoNCE loss (batch of {len(reps)}, "
                            f"logit range [{logits.min().item():.3g}, {logits.max().item():.3g}])")
    return loss


@dataclass
class AlignResult:
    encoder: TextEncoder
    initial_loss: float
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    step_log: list[tuple[int, int, float]] = field(default_factory=list)


def _as_items(corpus, url_table: EmbeddingTable) -> tuple[np.ndarray, list[WebpageContent]]:
    if isinstance(corpus, Mapping):
        ids = np.array(sorted(corpus), dtype=np.int64)
        contents = [corpus[i] for i in ids]
    else:
        contents = list(corpus)
        ids = np.arange(len(contents), dtype=np.int64)
        if len(contents) != len(url_table):
            raise ValidationError(f"corpus has {len(contents)} pages but url table has {len(url_table)} rows")
    if len(ids) == 0:
        raise ValidationError("empty corpus")
    if ids.min() < 0 or ids.max() >= len(url_table):
        raise ValidationError("corpus references url ids missing from the url table")
    return ids, contents


def make_batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle distinct ids into batches; a trailing batch of one item is dropped."""
    perm = rng.permutation(ids)
    batches = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def _batch_loss(encoder, seqs, targets, idx, temperature):
    ids, pad = collate([seqs[i] for i in idx], encoder.config)
    reps = encoder.represent(ids, pad)
    return info_nce_loss(reps, targets[idx].to(reps.dtype), temperature)


def _eval_loss(encoder, seqs, targets, batches, temperature) -> float:
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        losses = [_batch_loss(encoder, seqs, targets, b, temperature).item() for b in batches]
    encoder.train(was_training)
    return float(np.mean(losses))


def train_align(encoder: TextEncoder, corpus, url_table: EmbeddingTable, config: AlignConfig | None = None,
                vocab: Vocab | None = None, sequences: list[TokenSequence] | None = None) -> AlignResult:
    """Fine-tune ``encoder`` in place so its pooled output matches each page's URL row.

    ``corpus`` is a list of pages indexed by URL id, or a mapping url id -> page.
    Pass either ``vocab`` (pages are tokenized here) or pre-tokenized ``sequences``
    in the same order as the corpus.
    """
    config = config or AlignConfig()
    url_ids, contents = _as_items(corpus, url_table)
    if url_table.dim != encoder.config.pooler_dim:
        raise ValidationError(f"url table dim {url_table.dim} != pooler dim {encoder.config.pooler_dim}")
    if sequences is None:
        if vocab is None:
            raise ValidationError("pass a vocab or pre-tokenized sequences")
        sequences = [tokenize(c, vocab) for c in contents]
    elif len(sequences) != len(contents):
        raise ValidationError("sequences and corpus differ in length")
    # position in `sequences` for each url id
    seq_of = {int(u): i for i, u in enumerate(url_ids)}
    seqs = {int(u): sequences[seq_of[int(u)]] for u in url_ids}
    targets = torch.from_numpy(np.array(url_table.vectors, dtype=np.float64, copy=True))

    rng = np.random.default_rng([config.seed, 0xA119])
    epoch_batches = [make_batches(url_ids, config.batch_size, rng) for _ in range(max(config.epochs, 1))]
    initial = _eval_loss(encoder, seqs, targets, epoch_batches[0], config.temperature)

    opt = torch.optim.Adam(encoder.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.eps)
    epoch_losses: list[float] = []
    step_log: list[tuple[int, int, float]] = []
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        encoder.train()
        step = 0
        for epoch in range(config.epochs):
            losses = []
            for batch in epoch_batches[epoch]:
                opt.zero_grad()
                loss = _batch_loss(encoder, seqs, targets, batch, config.temperature)
                loss.backward()
                for name, p in encoder.named_parameters():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise TrainingError(f"non-finite gradient for {name} at epoch {epoch}, step {step}")
                opt.step()
                losses.append(loss.item())
                step_log.append((epoch, step, losses[-1]))
                step += 1
            epoch_losses.append(float(np.mean(losses)))
            logger.info("align epoch %d loss %.4f", epoch, epoch_losses[-1])
        encoder.eval()
    final = _eval_loss(encoder, seqs, targets, epoch_batches[0], config.temperature)
    return AlignResult(encoder, initial, final, epoch_losses, step_log)


def retrieval_accuracy(encoder: TextEncoder, corpus, url_table: EmbeddingTable, k: int = 1,
                       vocab: Vocab | None = None, sequences: list[TokenSequence] | None = None) -> float:
    """Fraction of pages whose own URL row is among the ``k`` rows most cosine-similar to f(page)."""
    url_ids, contents = _as_items(corpus, url_table)
    if sequences is None:
        if vocab is None:
            raise ValidationError("pass a vocab or pre-tokenized sequences")
        sequences = [tokenize(c, vocab) for c in contents]
    reps = represent_batch(encoder, sequences, pooling="cls")
    reps /= np.maximum(np.linalg.norm(reps, axis=1, keepdims=True), 1e-12)
    table = url_table.vectors.astype(np.float64)
    table = table / np.maximum(np.linalg.norm(table, axis=1, keepdims=True), 1e-12)
    sims = reps @ table.T
    own = sims[np.arange(len(url_ids)), url_ids]
    better = (sims > own[:, None]).sum(axis=1)
    return float(np.mean(better < k))


def write_step_log(step_log, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in step_log:
            fh.write(f"{epoch},{step},{loss!r}\n")
