"""cellokit: ontology-guided representation learning for single-cell data.

A desk-scale numpy library: cell-type ontology similarity via personalized
PageRank, rank-value gene tokenization, a small masked-gene transformer with
type-coherence and relational-alignment objectives, and the clustering /
classification / marker pipelines that evaluate the learned embeddings.
"""

__version__ = "0.1.0"

from . import autodiff, losses, model, ontology, tokenizer  # noqa: F401
