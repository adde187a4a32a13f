"""Small BERT-style text encoder with a tanh pooler.

Post-layernorm transformer blocks with GELU feed-forward layers. ``pool_cls``
maps the first ([CLS]) state through a dense layer and tanh; ``pool_mean``
averages the content-token states.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import FormatError, TrainingError, ValidationError
from .tokenizer import MAX_LEN, PAD_ID, Segment, TokenSequence


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    max_positions: int = MAX_LEN
    dropout: float = 0.1
    pooler_dim: int = 128
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValidationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.max_positions < MAX_LEN:
            raise ValidationError(f"max_positions must be >= {MAX_LEN}")
        if self.vocab_size < 1 or self.layers < 0:
            raise ValidationError("vocab_size must be >= 1 and layers >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, pad_mask):
        # pad_mask: (batch, length), True where the position is padding
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(pad_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        weights = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.attn_norm = nn.LayerNorm(cfg.model_dim, eps=cfg.layer_norm_eps)
        self.ffn_in = nn.Linear(cfg.model_dim, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, cfg.model_dim)
        self.ffn_norm = nn.LayerNorm(cfg.model_dim, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        x = self.attn_norm(x + self.dropout(self.attention(x, pad_mask)))
        h = self.ffn_out(nn.functional.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(h))


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.model_dim)
        self.position_embedding = nn.Embedding(config.max_positions, config.model_dim)
        self.embedding_norm = nn.LayerNorm(config.model_dim, eps=config.layer_norm_eps)
        self.embedding_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))
        self.pooler = nn.Linear(config.model_dim, config.pooler_dim)
        gen = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, config.init_std, generator=gen)

    def forward(self, ids, pad_mask=None):
        if pad_mask is None:
            pad_mask = ids == PAD_ID
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        x = self.embedding_dropout(self.embedding_norm(x))
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x

    def pool(self, hidden):
        """Batched CLS pooler: tanh(W e_cls + b) over ``hidden[:, 0]``."""
        return torch.tanh(self.pooler(hidden[:, 0]))

    def represent(self, ids, pad_mask=None):
        return self.pool(self(ids, pad_mask))


def build_encoder(config: EncoderConfig) -> TextEncoder:
    model = TextEncoder(config)
    model.eval()
    return model


# -- batching -----------------------------------------------------------------

def _validate(seq: TokenSequence, config: EncoderConfig) -> None:
    if len(seq) == 0:
        raise ValidationError("empty token sequence")
    if len(seq) > config.max_positions:
        raise ValidationError(f"sequence length {len(seq)} exceeds max_positions {config.max_positions}")
    if seq.ids.min() < 0 or seq.ids.max() >= config.vocab_size:
        raise ValidationError(f"token id outside [0, {config.vocab_size})")


def collate(seqs: Sequence[TokenSequence], config: EncoderConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to the batch's longest sequence; returns (ids, pad_mask)."""
    for s in seqs:
        _validate(s, config)
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
    ids_t = torch.from_numpy(ids)
    return ids_t, ids_t == PAD_ID


def content_mask(seqs: Sequence[TokenSequence], length: int | None = None) -> np.ndarray:
    """Boolean (batch, length) mask of URL/title/description positions."""
    length = length or max(len(s) for s in seqs)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        mask[i, :len(s)] = (s.segments != Segment.SPECIAL) & (s.ids != PAD_ID)
    return mask


# -- operations -----------------------------------------------------------------

def encode(model: TextEncoder, seq: TokenSequence) -> torch.Tensor:
    """Hidden states (length x model_dim) for one sequence, eval mode, no grad."""
    ids, pad = collate([seq], model.config)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        hidden = model(ids, pad)[0]
    model.train(was_training)
    return hidden


def pool_cls(model: TextEncoder, hidden) -> torch.Tensor:
    hidden = torch.as_tensor(hidden)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ValidationError("expected non-empty (length, model_dim) hidden states")
    with torch.no_grad():
        return torch.tanh(model.pooler(hidden[0].to(model.pooler.weight.dtype)))


def pool_mean(hidden, mask) -> torch.Tensor:
    """Mean of the states selected by ``mask`` (content positions; see ``content_mask``).

    Accepts a single sequence ``(length, dim)`` or a batch ``(batch, length, dim)``.
    """
    hidden = torch.as_tensor(hidden)
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    single = hidden.ndim == 2
    if single:
        hidden, mask = hidden[None], mask[None]
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise ValidationError("sequence has no content tokens to pool")
    w = mask.to(hidden.dtype)[..., None]
    pooled = (hidden * w).sum(dim=1) / counts[:, None].to(hidden.dtype)
    return pooled[0] if single else pooled


def represent_batch(model: TextEncoder, seqs: Sequence[TokenSequence], pooling: str = "cls",
                    batch_size: int = 256) -> np.ndarray:
    """Frozen features for many sequences: CLS-pooled (``"cls"``) or content mean (``"mean"``)."""
    return represent_poolings(model, seqs, (pooling,), batch_size)[pooling]


def represent_poolings(model: TextEncoder, seqs: Sequence[TokenSequence], poolings=("cls", "mean"),
                       batch_size: int = 256) -> dict[str, np.ndarray]:
    """Several pooled views from one forward pass per batch."""
    for pooling in poolings:
        if pooling not in ("cls", "mean"):
            raise ValidationError(f"unknown pooling {pooling!r}")
    was_training = model.training
    model.eval()
    out: dict[str, list] = {p: [] for p in poolings}
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            ids, pad = collate(chunk, model.config)
            hidden = model(ids, pad)
            if "cls" in out:
                out["cls"].append(model.pool(hidden))
            if "mean" in out:
                out["mean"].append(pool_mean(hidden, content_mask(chunk, ids.shape[1])))
    model.train(was_training)
    return {p: torch.cat(v).double().numpy() for p, v in out.items()}


def parameter_gradients(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of ``loss_fn(model)`` for every named parameter."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = loss_fn(model)
    if loss.ndim != 0:
        raise ValidationError("loss must be a scalar")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    result = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        result[name] = g
    return result


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"URLENC\x00\x01"
CKPT_VERSION = 1


def save_checkpoint(model: TextEncoder, path: str | os.PathLike) -> None:
    """magic | version | config JSON | count | (name, shape, float32 data)*"""
    buf = io.BytesIO()
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> TextEncoder:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an encoder checkpoint")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = EncoderConfig(**json.loads(bytes(take(cfg_len))))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from None
    model = TextEncoder(config)
    expected = model.state_dict()
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise FormatError(f"{path}: {count} tensors, config implies {len(expected)}")
    state = {}
    for _ in range(count):
        (n_len,) = struct.unpack("<H", take(2))
        name = bytes(take(n_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise FormatError(f"{path}: tensor {name} with shape {shape} does not match config")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    model.load_state_dict(state)
    model.eval()
    return model
