"""Optimization loop: Adam with decoupled weight decay, warmup/decay
schedule, deterministic batching, and the binary checkpoint codec.

Reproducibility contract: identical (seed, config, data) produce identical
checkpoints and loss logs.  All randomness (epoch shuffles, masking,
dropout) is derived from the config seed plus the step index, never from
global state.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import Batch, LossBreakdown, total_loss
from .model import ModelConfig, ModelState, init_state
from .ontology import SimilarityTable
from .tokenizer import GeneVocab, mask_token_matrix

__all__ = [
    "TrainerError",
    "NonFiniteGradient",
    "CorruptCheckpoint",
    "VersionMismatch",
    "TrainConfig",
    "lr_at",
    "AdamState",
    "train_step",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config_text",
]

CHECKPOINT_MAGIC = b"CELLOKIT"
CHECKPOINT_VERSION = 1

LOG_HEADER = "step\tlr\tmgp\tintra\tinter\treg\ttotal"


class TrainerError(Exception):
    pass


class NonFiniteGradient(TrainerError):
    pass


class CorruptCheckpoint(TrainerError):
    pass


class VersionMismatch(TrainerError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    warmup_steps: int = 3_333
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only at the end
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_ratio: float = 0.15
    schedule: str = "linear"  # or "constant" after warmup
    decay_embeddings: bool = True
    intra_unique_types: bool = False
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {"mgp": 1.0, "intra": 1.0, "inter": 1.0, "reg": 1.0}
    )

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear ramp 0 -> lr over warmup, then linear decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    lr = config.learning_rate
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return lr * step / config.warmup_steps
    if config.schedule == "constant":
        return lr
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return lr if step <= config.total_steps else 0.0
    return lr * max(0.0, config.total_steps - step) / span


_EMBEDDING_PARAMS = ("tok_emb", "pos_emb", "type_emb")


class AdamState:
    """First/second moment buffers, one pair per parameter."""

    def __init__(self, params: dict):
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def train_step(
    state: ModelState,
    batch: Batch,
    config: TrainConfig,
    step: int,
    opt: AdamState,
    table: SimilarityTable | None,
    anc: dict[str, frozenset[str]] | None,
    dropout_rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """One forward/backward/update.  Mutates state parameters and opt in place."""
    state.zero_grads()
    total, breakdown = total_loss(
        state,
        batch,
        table,
        anc,
        weights=config.loss_weights,
        train=True,
        dropout_rng=dropout_rng,
        intra_unique_types=config.intra_unique_types,
    )
    total.backward()

    lr = lr_at(config, step)
    opt.step_count += 1
    t = opt.step_count
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for name in sorted(state.params):
        p = state.params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if config.weight_decay > 0.0 and (
            config.decay_embeddings or name not in _EMBEDDING_PARAMS
        ):
            p.data -= lr * config.weight_decay * p.data
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteGradient(f"parameter {name!r} became non-finite")
    return breakdown


def _format_log_line(step: int, lr: float, bd: LossBreakdown, batch_size: int) -> str:
    # relational/coherence sums are logged per cell; total stays the optimized sum
    vals = (
        lr,
        bd.mgp,
        bd.intra / batch_size,
        bd.inter / batch_size,
        bd.reg,
        bd.total,
    )
    return str(step) + "\t" + "\t".join(f"{v:.10g}" for v in vals)


def pretrain(
    tokens: np.ndarray,
    types,
    vocab: GeneVocab,
    model_config: ModelConfig,
    train_config: TrainConfig,
    table: SimilarityTable | None,
    anc: dict[str, frozenset[str]] | None,
    state: ModelState | None = None,
    checkpoint_path: str | None = None,
) -> tuple[ModelState, list[str]]:
    """Run the full pre-training loop over an encoded corpus.

    ``tokens`` is the (N, L) rank-value token matrix; ``types`` the ontology
    node per cell.  Cells are shuffled each epoch and masked per step, both
    seeded.  Returns the trained state and the loss-log lines.
    """
    types = tuple(types)
    n = tokens.shape[0]
    if n == 0:
        raise ValueError("empty corpus")
    if state is None:
        state = init_state(model_config, sorted(set(types)))
    type_idx_all = np.array([state.type_index[t] for t in types], dtype=np.int64)

    opt = AdamState(state.params)
    log_lines = [LOG_HEADER]
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    epoch = 0
    bsz = min(train_config.batch_size, n)
    for step in range(train_config.total_steps):
        if cursor + bsz > order.size:
            shuffle_rng = np.random.default_rng(
                np.random.SeedSequence((train_config.seed, 0, epoch))
            )
            order = shuffle_rng.permutation(n)
            cursor = 0
            epoch += 1
        idx = order[cursor : cursor + bsz]
        cursor += bsz

        mask_rng = np.random.default_rng(
            np.random.SeedSequence((train_config.seed, 1, step))
        )
        masked = mask_token_matrix(tokens[idx], vocab, train_config.mask_ratio, mask_rng)
        batch = Batch(
            tokens=masked.tokens,
            labels=masked.labels,
            selected=masked.selected,
            types=tuple(types[i] for i in idx),
            type_idx=type_idx_all[idx],
        )
        drop_rng = np.random.default_rng(
            np.random.SeedSequence((train_config.seed, 2, step))
        )
        bd = train_step(state, batch, train_config, step, opt, table, anc, drop_rng)
        log_lines.append(_format_log_line(step, lr_at(train_config, step), bd, bsz))

        if (
            checkpoint_path
            and train_config.checkpoint_interval > 0
            and (step + 1) % train_config.checkpoint_interval == 0
        ):
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state, log_lines


# ---- checkpoint codec ----


def save_checkpoint(state: ModelState, path: str) -> None:
    """Write magic/version/header(JSON)/float32 tensors, atomically."""
    names = sorted(state.params)
    header = {
        "config": state.config.to_dict(),
        "type_ids": list(state.type_ids),
        "tensors": [
            {"name": n, "shape": list(state.params[n].data.shape)} for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += CHECKPOINT_VERSION.to_bytes(4, "little")
    blob += len(header_bytes).to_bytes(8, "little")
    blob += header_bytes
    for n in names:
        blob += state.params[n].data.astype("<f4").tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(
    path: str,
    expect_vocab_size: int | None = None,
    expect_type_ids=None,
) -> ModelState:
    """Read a checkpoint back; rejects bad magic/version and contract mismatches.

    Parameters come back as float64 upcasts of the stored float32 values, so
    a save/load round trip is exact at float32 precision.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: missing checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    off += 4
    header_len = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    if off + header_len > len(raw):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from None
    off += header_len

    config = ModelConfig(**header["config"])
    type_ids = tuple(header["type_ids"])
    if expect_vocab_size is not None and config.vocab_size != expect_vocab_size:
        raise VersionMismatch(
            f"{path}: checkpoint vocab size {config.vocab_size} != "
            f"expected {expect_vocab_size}"
        )
    if expect_type_ids is not None and tuple(expect_type_ids) != type_ids:
        raise VersionMismatch(f"{path}: checkpoint type ordering differs")

    from .autodiff import Tensor

    params: dict[str, Tensor] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated tensor {spec['name']!r}")
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f4").reshape(shape)
        params[spec["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
        off += nbytes
    if off != len(raw):
        raise CorruptCheckpoint(f"{path}: {len(raw) - off} trailing bytes")
    return ModelState(config=config, type_ids=type_ids, params=params)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse "key = value" lines; '#' comments and blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
