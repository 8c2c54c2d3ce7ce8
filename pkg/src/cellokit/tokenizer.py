"""Rank-value encoding of expression profiles and masked-gene corruption.

A cell's raw counts are normalized twice (by the cell's total count, then by
a per-gene weighting factor), the surviving genes are sorted by the result,
and the sorted gene ids become the token sequence behind a leading CLS.
Masking picks token positions at random and corrupts them 80/10/10
(mask token / random gene / unchanged), recording the original ids as labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenizerError",
    "EmptyCorpus",
    "GeneVocab",
    "NormalizationFactors",
    "ExpressionProfile",
    "TokenSequence",
    "MaskedBatch",
    "compute_factors",
    "encode_cell",
    "encode_corpus",
    "apply_masking",
    "mask_token_matrix",
]

LABEL_IGNORE = -1
MASK_FRACTION = 0.8
RANDOM_FRACTION = 0.1  # remaining 0.1 keeps the original token


class TokenizerError(Exception):
    pass


class EmptyCorpus(TokenizerError):
    pass


@dataclass(frozen=True)
class GeneVocab:
    """Gene ids get token ids 0..M-1; MASK/CLS/PAD are appended after them."""

    gene_ids: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_genes(cls, gene_ids) -> "GeneVocab":
        genes = tuple(gene_ids)
        if len(set(genes)) != len(genes):
            raise TokenizerError("duplicate gene ids in vocabulary")
        return cls(gene_ids=genes, index={g: i for i, g in enumerate(genes)})

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def mask_id(self) -> int:
        return len(self.gene_ids)

    @property
    def cls_id(self) -> int:
        return len(self.gene_ids) + 1

    @property
    def pad_id(self) -> int:
        return len(self.gene_ids) + 2

    @property
    def size(self) -> int:
        return len(self.gene_ids) + 3

    def __contains__(self, gene: str) -> bool:
        return gene in self.index


@dataclass(frozen=True)
class NormalizationFactors:
    """Per-gene weighting factors; genes never seen nonzero are absent."""

    factors: dict[str, float]

    def get(self, gene: str) -> float:
        # unseen genes weight 1.0: neutral, keeps encoding total
        return self.factors.get(gene, 1.0)


@dataclass(frozen=True)
class ExpressionProfile:
    """Sparse raw counts for one cell plus its labels."""

    cell_id: str
    counts: dict[str, int]
    cell_type: str = ""
    batch_id: str = ""
    donor_id: str = ""
    tissue_id: str = ""

    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token ids: CLS, then genes by rank, then PAD."""

    tokens: np.ndarray
    true_length: int

    def __post_init__(self):
        assert self.tokens.ndim == 1


@dataclass(frozen=True)
class MaskedBatch:
    """Corrupted token arrays with recovery labels at the selected positions."""

    tokens: np.ndarray  # (B, L) int64, corrupted
    labels: np.ndarray  # (B, L) int64, original id where selected else LABEL_IGNORE
    selected: np.ndarray  # (B, L) bool


def compute_factors(corpus) -> NormalizationFactors:
    """Per-gene nonzero median of cell-normalized expression across the corpus.

    Each cell's counts are divided by the cell total first; a gene's factor is
    the median of its nonzero normalized values.  Even-count medians are the
    midpoint of the central pair.
    """
    values: dict[str, list[float]] = {}
    n_cells = 0
    for profile in corpus:
        n_cells += 1
        total = profile.total()
        if total == 0:
            continue
        for gene, count in profile.counts.items():
            if count > 0:
                values.setdefault(gene, []).append(count / total)
    if n_cells == 0:
        raise EmptyCorpus("cannot compute factors from an empty corpus")
    return NormalizationFactors(
        factors={g: float(np.median(v)) for g, v in values.items()}
    )


def encode_cell(
    profile: ExpressionProfile,
    vocab: GeneVocab,
    factors: NormalizationFactors,
    context_length: int,
    unknown_counter: dict | None = None,
) -> TokenSequence:
    """Rank-value encode one cell into a fixed-length token sequence.

    Counts are scaled by 1/total then by 1/factor(gene); zero-count genes are
    dropped, the rest sorted by the scaled value descending (ties broken by
    ascending token id), truncated to fit and padded.  Genes missing from the
    vocabulary are dropped and tallied in ``unknown_counter``.
    """
    if context_length < 2:
        raise ValueError(f"context_length must be >= 2, got {context_length}")
    total = profile.total()
    token_ids: list[int] = []
    scaled: list[float] = []
    for gene, count in profile.counts.items():
        if count <= 0:
            continue
        if gene not in vocab:
            if unknown_counter is not None:
                unknown_counter[gene] = unknown_counter.get(gene, 0) + 1
            continue
        token_ids.append(vocab.index[gene])
        scaled.append((count / total) / factors.get(gene))

    tokens = np.full(context_length, vocab.pad_id, dtype=np.int64)
    tokens[0] = vocab.cls_id
    if not token_ids:
        return TokenSequence(tokens=tokens, true_length=1)

    ids = np.asarray(token_ids, dtype=np.int64)
    vals = np.asarray(scaled, dtype=np.float64)
    order = np.lexsort((ids, -vals))  # value desc, then token id asc
    ranked = ids[order][: context_length - 1]
    tokens[1 : 1 + len(ranked)] = ranked
    return TokenSequence(tokens=tokens, true_length=1 + len(ranked))


def encode_corpus(
    profiles,
    vocab: GeneVocab,
    factors: NormalizationFactors,
    context_length: int,
    unknown_counter: dict | None = None,
) -> np.ndarray:
    """Stack encode_cell over a list of profiles into a (N, L) token matrix."""
    rows = [
        encode_cell(p, vocab, factors, context_length, unknown_counter).tokens
        for p in profiles
    ]
    if not rows:
        return np.empty((0, context_length), dtype=np.int64)
    return np.stack(rows)


def mask_token_matrix(
    tokens: np.ndarray,
    vocab: GeneVocab,
    mask_ratio: float,
    rng: np.random.Generator,
) -> MaskedBatch:
    """Bernoulli-select and corrupt gene positions in a (B, L) token matrix.

    Every non-CLS, non-PAD position is selected independently with
    probability ``mask_ratio``.  Of the selected positions, 80% become the
    mask token, 10% a uniformly random gene id, 10% stay unchanged; all
    selected positions carry their original id as the label.
    """
    if not 0.0 < mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must be in (0, 1], got {mask_ratio}")
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = (tokens != vocab.cls_id) & (tokens != vocab.pad_id)
    selected = maskable & (rng.random(tokens.shape) < mask_ratio)

    labels = np.full(tokens.shape, LABEL_IGNORE, dtype=np.int64)
    labels[selected] = tokens[selected]

    corrupted = tokens.copy()
    action = rng.random(tokens.shape)
    to_mask = selected & (action < MASK_FRACTION)
    to_random = selected & (action >= MASK_FRACTION) & (
        action < MASK_FRACTION + RANDOM_FRACTION
    )
    corrupted[to_mask] = vocab.mask_id
    n_random = int(to_random.sum())
    if n_random:
        corrupted[to_random] = rng.integers(0, vocab.n_genes, size=n_random)
    return MaskedBatch(tokens=corrupted, labels=labels, selected=selected)


def apply_masking(seq: TokenSequence, vocab: GeneVocab, mask_ratio: float, rng_seed: int) -> MaskedBatch:
    """Single-sequence view of :func:`mask_token_matrix`, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    return mask_token_matrix(seq.tokens[None, :], vocab, mask_ratio, rng)
