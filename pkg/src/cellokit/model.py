"""Small transformer encoder over gene-token sequences.

The first position is always CLS; its final hidden state, L2-normalized,
is the cell embedding.  A learned table holds one embedding per cell type
(same normalization), a linear head produces masked-gene logits, and a
shared affine map ties the type space to the cell space for the
regression regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    Tensor,
    dropout,
    l2_normalize,
    layer_norm,
    relu,
    softmax,
    take_rows,
)

__all__ = [
    "ModelError",
    "TokenOutOfRange",
    "PositionOutOfRange",
    "UnknownTypeId",
    "ModelConfig",
    "ModelState",
    "init_state",
    "forward",
    "mgp_logits",
    "type_embedding",
    "type_rows",
]

NEG_INF = -1e30


class ModelError(Exception):
    pass


class TokenOutOfRange(ModelError):
    pass


class PositionOutOfRange(ModelError):
    pass


class UnknownTypeId(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 32
    ffn_dim: int = 64
    max_len: int = 64
    dropout: float = 0.02
    temperature: float = 0.1
    seed: int = 0
    normalize_embeddings: bool = True
    tie_mgp_head: bool = False

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    # special ids live at the top of the vocabulary: genes, MASK, CLS, PAD
    @property
    def mask_id(self) -> int:
        return self.vocab_size - 3

    @property
    def cls_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    config: ModelConfig
    type_ids: tuple[str, ...]
    params: dict[str, Tensor]
    type_index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.type_index:
            self.type_index = {t: i for i, t in enumerate(self.type_ids)}

    @property
    def n_types(self) -> int:
        return len(self.type_ids)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _normal(rng, shape, std=0.02):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _linear_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_state(config: ModelConfig, type_ids) -> ModelState:
    """Fresh parameters, deterministic in config.seed and the type ordering."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    d, f, v = config.embed_dim, config.ffn_dim, config.vocab_size
    params: dict[str, Tensor] = {
        "tok_emb": _normal(rng, (v, d)),
        "pos_emb": _normal(rng, (config.max_len, d)),
        "emb_ln_g": _ones((d,)),
        "emb_ln_b": _zeros((d,)),
    }
    for i in range(config.n_layers):
        pre = f"l{i}."
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + name] = _linear_init(rng, d, (d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[pre + name] = _zeros((d,))
        params[pre + "ln1_g"] = _ones((d,))
        params[pre + "ln1_b"] = _zeros((d,))
        params[pre + "w1"] = _linear_init(rng, d, (d, f))
        params[pre + "b1"] = _zeros((f,))
        params[pre + "w2"] = _linear_init(rng, f, (f, d))
        params[pre + "b2"] = _zeros((d,))
        params[pre + "ln2_g"] = _ones((d,))
        params[pre + "ln2_b"] = _zeros((d,))
    params["type_emb"] = _normal(rng, (len(tuple(type_ids)), d))
    params["reg_w"] = _linear_init(rng, d, (d, d))
    params["reg_b"] = _zeros((d,))
    if not config.tie_mgp_head:
        params["mgp_w"] = _linear_init(rng, d, (d, v))
    params["mgp_b"] = _zeros((v,))
    return ModelState(config=config, type_ids=tuple(type_ids), params=params)


def _attention(x: Tensor, params, prefix: str, n_heads: int, attn_bias: np.ndarray,
               rate: float, rng) -> Tensor:
    b, length, d = x.shape
    dk = d // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, n_heads, dk).swapaxes(1, 2)

    q = split_heads(x @ params[prefix + "wq"] + params[prefix + "bq"])
    k = split_heads(x @ params[prefix + "wk"] + params[prefix + "bk"])
    v = split_heads(x @ params[prefix + "wv"] + params[prefix + "bv"])
    scores = (q @ k.T) * (1.0 / math.sqrt(dk)) + Tensor(attn_bias)
    weights = softmax(scores, axis=-1)
    if rng is not None:
        weights = dropout(weights, rate, rng)
    ctx = (weights @ v).swapaxes(1, 2).reshape(b, length, d)
    return ctx @ params[prefix + "wo"] + params[prefix + "bo"]


def forward(state: ModelState, tokens: np.ndarray, train: bool = False,
            dropout_rng: np.random.Generator | None = None):
    """Run the encoder on a (B, L) token batch.

    Returns (per-token states, cell embeddings).  PAD positions are invisible
    to attention, so trailing padding never changes the other positions.
    Eval mode (train=False) is deterministic.
    """
    cfg = state.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (batch, length) array")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenOutOfRange(
            f"token ids must be in [0, {cfg.vocab_size}), got "
            f"[{tokens.min()}, {tokens.max()}]"
        )
    b, length = tokens.shape
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")

    rng = dropout_rng if (train and cfg.dropout > 0.0) else None
    params = state.params

    x = take_rows(params["tok_emb"], tokens) + params["pos_emb"][:length]
    x = layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    if rng is not None:
        x = dropout(x, cfg.dropout, rng)

    pad_key = tokens == cfg.pad_id
    attn_bias = np.where(pad_key[:, None, None, :], NEG_INF, 0.0)

    for i in range(cfg.n_layers):
        pre = f"l{i}."
        attn = _attention(x, params, pre, cfg.n_heads, attn_bias, cfg.dropout, rng)
        if rng is not None:
            attn = dropout(attn, cfg.dropout, rng)
        x = layer_norm(x + attn, params[pre + "ln1_g"], params[pre + "ln1_b"])
        hidden = relu(x @ params[pre + "w1"] + params[pre + "b1"]) @ params[pre + "w2"]
        hidden = hidden + params[pre + "b2"]
        if rng is not None:
            hidden = dropout(hidden, cfg.dropout, rng)
        x = layer_norm(x + hidden, params[pre + "ln2_g"], params[pre + "ln2_b"])

    cls_state = x[:, 0]
    z = l2_normalize(cls_state) if cfg.normalize_embeddings else cls_state
    return x, z


def mgp_logits(state: ModelState, token_states: Tensor, rows: np.ndarray,
               cols: np.ndarray) -> Tensor:
    """Gene-recovery logits at the given (row, col) positions: (K, vocab)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    b, length, _ = token_states.shape
    if rows.size and (
        rows.min() < 0 or rows.max() >= b or cols.min() < 0 or cols.max() >= length
    ):
        raise PositionOutOfRange("selected position outside the batch")
    if rows.size == 0:
        return Tensor(np.empty((0, state.config.vocab_size)))
    picked = token_states[rows, cols]
    if state.config.tie_mgp_head:
        return picked @ state.params["tok_emb"].T + state.params["mgp_b"]
    return picked @ state.params["mgp_w"] + state.params["mgp_b"]


def type_rows(state: ModelState, type_idx: np.ndarray) -> Tensor:
    """Type-table rows for integer ids, normalized like cell embeddings."""
    type_idx = np.asarray(type_idx, dtype=np.int64)
    if type_idx.size and (type_idx.min() < 0 or type_idx.max() >= state.n_types):
        raise UnknownTypeId(f"type index outside [0, {state.n_types})")
    rows = take_rows(state.params["type_emb"], type_idx)
    if state.config.normalize_embeddings:
        rows = l2_normalize(rows)
    return rows


def type_embedding(state: ModelState, type_id: str | int) -> Tensor:
    """Embedding for one cell type, by persisted id or table index."""
    if isinstance(type_id, str):
        if type_id not in state.type_index:
            raise UnknownTypeId(f"unknown cell type {type_id!r}")
        idx = state.type_index[type_id]
    else:
        idx = int(type_id)
    return type_rows(state, np.array([idx]))[0]
