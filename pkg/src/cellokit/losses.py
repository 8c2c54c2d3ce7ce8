"""The four pre-training objectives and their exact-gradient plumbing.

All losses run on the autodiff tape, so gradients are exact reverse-mode;
finite differences appear only in :func:`grad_check` as an independent
verification oracle.  Softmax denominators are evaluated in log space with
max subtraction, which keeps temperature-scaled logits stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy_mean, logsumexp
from .model import ModelState, forward, mgp_logits, type_rows
from .ontology import SimilarityTable, negative_mask

__all__ = [
    "LossError",
    "LabelOutOfRange",
    "SizeMismatch",
    "NonFiniteLoss",
    "LossBreakdown",
    "Batch",
    "loss_mgp",
    "loss_intra",
    "loss_reg",
    "loss_inter",
    "total_loss",
    "grad_check",
    "DEFAULT_WEIGHTS",
]

NEG_INF = -1e30
DEFAULT_WEIGHTS = {"mgp": 1.0, "intra": 1.0, "inter": 1.0, "reg": 1.0}


class LossError(Exception):
    pass


class LabelOutOfRange(LossError):
    pass


class SizeMismatch(LossError):
    pass


class NonFiniteLoss(LossError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    """Per-component values; total is their plain unweighted sum."""

    mgp: float
    intra: float
    inter: float
    reg: float
    total: float


@dataclass(frozen=True)
class Batch:
    """One training batch: corrupted tokens plus recovery and type targets."""

    tokens: np.ndarray  # (B, L) int64, corrupted
    labels: np.ndarray  # (B, L) int64, original ids at selected positions
    selected: np.ndarray  # (B, L) bool
    types: tuple[str, ...]  # ontology node per cell
    type_idx: np.ndarray  # (B,) int64 into the persisted type ordering

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def loss_mgp(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of recovering the original gene at masked spots."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise SizeMismatch(
            f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels"
        )
    if labels.size == 0:
        return Tensor(0.0)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise LabelOutOfRange(
            f"labels must be in [0, {logits.shape[-1]}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    return cross_entropy_mean(logits, labels)


def loss_intra(
    Z: Tensor,
    H_batch: Tensor,
    tau: float,
    type_idx: np.ndarray | None = None,
    unique_types: bool = False,
) -> Tensor:
    """Pull each cell embedding toward its own type embedding.

    Per cell i the positive is z_i . h_{c_i}; the denominator sums over
    every batch element j (so repeated types repeat terms).  With
    ``unique_types`` the denominator keeps one term per distinct type
    instead; that mode needs ``type_idx``.
    """
    if Z.shape[0] != H_batch.shape[0]:
        raise SizeMismatch(f"{Z.shape[0]} cells vs {H_batch.shape[0]} type rows")
    b = Z.shape[0]
    if b == 0:
        return Tensor(0.0)
    if unique_types:
        if type_idx is None:
            raise ValueError("unique_types mode needs type_idx")
        type_idx = np.asarray(type_idx, dtype=np.int64)
        _, first_pos, inverse = np.unique(
            type_idx, return_index=True, return_inverse=True
        )
        h_unique = H_batch[first_pos]
        logits = (Z @ h_unique.T) * (1.0 / tau)  # (B, U)
        positives = logits[np.arange(b), inverse]
    else:
        logits = (Z @ H_batch.T) * (1.0 / tau)  # (B, B)
        positives = logits[np.arange(b), np.arange(b)]
    return (logsumexp(logits, axis=-1) - positives).sum()


def loss_reg(Z: Tensor, H_batch: Tensor, linear_map: tuple[Tensor, Tensor]) -> Tensor:
    """Squared error of the shared affine map from type space to cell space."""
    if Z.shape[0] != H_batch.shape[0]:
        raise SizeMismatch(f"{Z.shape[0]} cells vs {H_batch.shape[0]} type rows")
    weight, bias = linear_map
    diff = H_batch @ weight + bias - Z
    return (diff * diff).sum()


def loss_inter(
    Z: Tensor,
    batch_types,
    table: SimilarityTable,
    anc: dict[str, frozenset[str]],
    tau: float,
) -> Tensor:
    """Make cell-pair dot products respect ontology similarity levels.

    For every ordered pair (i, j), the cells whose types are strictly less
    similar to c_i than c_j form the negatives (ancestors of c_i excluded).
    Pairs with no negatives contribute exactly zero.
    """
    batch_types = tuple(batch_types)
    b = Z.shape[0]
    if b != len(batch_types):
        raise SizeMismatch(f"{b} embeddings vs {len(batch_types)} types")
    if b < 2:
        return Tensor(0.0)

    keep = negative_mask(list(batch_types), table, anc)  # (B, B, B)
    idx = np.arange(b)
    keep[:, idx, idx] = True  # the positive term s_ij is always in the denominator
    bias = np.where(keep, 0.0, NEG_INF)

    sims = (Z @ Z.T) * (1.0 / tau)  # (B, B)
    expanded = sims.reshape(b, 1, b) + Tensor(bias)  # (B, B, B) over k
    lse = logsumexp(expanded, axis=-1)  # (B, B)
    pair_losses = lse - sims
    off_diag = 1.0 - np.eye(b)
    return (pair_losses * Tensor(off_diag)).sum()


def total_loss(
    state: ModelState,
    batch: Batch,
    table: SimilarityTable | None,
    anc: dict[str, frozenset[str]] | None,
    weights: dict[str, float] | None = None,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    intra_unique_types: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Joint objective: gene recovery + type coherence + relational alignment.

    Components with weight zero are skipped and reported as 0.0.  With the
    default all-ones weights the reported total is exactly the sum of the
    four components.
    """
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        unknown = set(weights) - set(w)
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        w.update(weights)

    token_states, z = forward(state, batch.tokens, train=train, dropout_rng=dropout_rng)
    tau = state.config.temperature

    parts: dict[str, Tensor] = {}
    if w["mgp"] != 0.0:
        rows, cols = np.nonzero(batch.selected)
        logits = mgp_logits(state, token_states, rows, cols)
        parts["mgp"] = loss_mgp(logits, batch.labels[rows, cols])
    needs_types = w["intra"] != 0.0 or w["reg"] != 0.0
    if needs_types:
        h_batch = type_rows(state, batch.type_idx)
    if w["intra"] != 0.0:
        parts["intra"] = loss_intra(
            z, h_batch, tau, batch.type_idx, unique_types=intra_unique_types
        )
    if w["inter"] != 0.0:
        if table is None or anc is None:
            raise ValueError("relational loss needs a similarity table and ancestor sets")
        parts["inter"] = loss_inter(z, batch.types, table, anc, tau)
    if w["reg"] != 0.0:
        parts["reg"] = loss_reg(z, h_batch, (state.params["reg_w"], state.params["reg_b"]))

    total: Tensor | None = None
    for name, part in parts.items():
        term = part if w[name] == 1.0 else part * w[name]
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)

    values = {name: float(parts[name].data) if name in parts else 0.0
              for name in ("mgp", "intra", "inter", "reg")}
    breakdown = LossBreakdown(
        mgp=values["mgp"],
        intra=values["intra"],
        inter=values["inter"],
        reg=values["reg"],
        total=values["mgp"] + values["intra"] + values["inter"] + values["reg"]
        if all(w[k] == 1.0 for k in values)
        else float(total.data),
    )
    return total, breakdown


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_probes: int = 30,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``loss_fn`` must rebuild the loss from ``params`` on every call and be
    deterministic (no dropout).  Probes n_probes randomly chosen parameter
    entries.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NonFiniteLoss(f"loss evaluated to {loss.data}")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    names = sorted(params)
    max_rel = 0.0
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        p = params[name]
        flat = int(rng.integers(p.data.size))
        original = p.data.flat[flat]
        p.data.flat[flat] = original + eps
        f_plus = float(loss_fn().data)
        p.data.flat[flat] = original - eps
        f_minus = float(loss_fn().data)
        p.data.flat[flat] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteLoss("loss became non-finite under perturbation")
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = analytic[name].flat[flat]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
