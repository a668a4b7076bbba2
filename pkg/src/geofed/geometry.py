"""Anchor Gram matrices, kernel-alignment similarity, and the consensus kernel.

A node's Gram matrix holds pairwise cosine similarities between its pooled
anchor embeddings; it is the only alignment signal that crosses the wire.
Alignment between two Grams is the normalized trace ratio

    align(X, Y) = tr(X Y^T) / (||X||_F ||Y||_F)

computed on the raw kernels by default; double-centering is available behind
the `center` flag for the classical variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, ProtocolError, ShapeError
from .model import ModelStack, adapt, tokenize
from .numerics import Matrix, Node, Tape
from .model import build_effective_weights, forward_on_tape


@dataclass
class AnchorSet:
    """Public, concept-labelled anchor samples for one modality.

    Index order is part of the protocol: anchor i means the same concept slot
    at every node, even though the underlying draws are unpaired.
    """

    modality: str
    samples: np.ndarray  # B x raw_input_size
    concept_labels: np.ndarray  # B ints

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.concept_labels = np.asarray(self.concept_labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.concept_labels.shape[0]:
            raise ShapeError("AnchorSet: samples and labels disagree")

    @property
    def size(self) -> int:
        return self.samples.shape[0]


@dataclass
class GramMatrix:
    """B x B anchor similarity kernel produced by one node in one round."""

    matrix: Matrix
    node_id: int = 0
    round: int = 0

    def __post_init__(self):
        g = self.matrix.array()
        if g.shape[0] != g.shape[1]:
            raise ShapeError(f"GramMatrix must be square, got {g.shape}")

    @property
    def size(self) -> int:
        return self.matrix.rows

    def validate(self) -> None:
        """Enforce the kernel invariants: symmetry, unit diagonal, bounds, PSD."""
        g = self.matrix.array()
        if np.abs(g - g.T).max() > 1e-10:
            raise ShapeError("GramMatrix: not symmetric within 1e-10")
        if np.abs(np.diag(g) - 1.0).max() > 1e-10:
            raise ShapeError("GramMatrix: diagonal deviates from 1")
        if g.min() < -1.0 - 1e-12 or g.max() > 1.0 + 1e-12:
            raise ShapeError("GramMatrix: entries outside [-1, 1]")
        if np.linalg.eigvalsh(g).min() < -1e-8:
            raise ShapeError("GramMatrix: not positive semidefinite within tolerance")


@dataclass
class ConsensusKernel:
    """Entrywise mean of the round's uploaded Grams; the broadcast target geometry."""

    g_bar: Matrix
    contributing_nodes: int
    round: int = 0

    @property
    def size(self) -> int:
        return self.g_bar.rows


def anchor_tokens(stack: ModelStack, anchors: AnchorSet) -> list[Matrix]:
    """Frozen tokenization of each anchor; cacheable (tokenizers never change)."""
    return [tokenize(stack.stub, x) for x in anchors.samples]


def gram_from_embeddings(embs: np.ndarray, node_id: int = 0, round: int = 0) -> GramMatrix:
    """Cosine kernel of a stack of embeddings (one row per anchor)."""
    embs = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    norms = np.sqrt((embs * embs).sum(axis=1))
    for i, n in enumerate(norms):
        if n < 1e-300:
            raise DegenerateVectorError(f"gram: zero-norm embedding for anchor {i}")
    unit = embs / norms[:, None]
    g = np.clip(unit @ unit.T, -1.0, 1.0)
    return GramMatrix(Matrix.from_array(g), node_id=node_id, round=round)


def compute_gram(stack: ModelStack, anchors: AnchorSet, node_id: int = 0, round: int = 0) -> GramMatrix:
    """Pairwise cosine kernel over the node's pooled anchor embeddings."""
    if anchors.size < 2:
        raise ProtocolError(f"compute_gram: need at least 2 anchors, got {anchors.size}")
    return gram_from_embeddings(stack.embed(anchors.samples), node_id=node_id, round=round)


def gram_node(tape: Tape, stack: ModelStack, tokens: list[Matrix]) -> Node:
    """Differentiable Gram over pre-tokenized anchors.

    Magnitude vectors are detached here so alignment gradients touch only the
    directional part of adapted weights.
    """
    w_adapter = tape.leaf(stack.adapter.w)
    eff = build_effective_weights(tape, stack.params, stack.atts, detach_magnitude=True)
    pooled = []
    for t in tokens:
        toks, _ = forward_on_tape(tape, stack.params, eff, tape.matmul(tape.const(t), w_adapter))
        pooled.append(tape.mean_pool(toks))
    z = tape.concat_rows(pooled)
    row_norms = np.sqrt((z.value * z.value).sum(axis=1))
    for i, n in enumerate(row_norms):
        if n < 1e-300:
            raise DegenerateVectorError(f"gram: zero-norm embedding for anchor {i}")
    unit = tape.normalize_rows(z)
    return tape.matmul(unit, tape.transpose(unit))


def _gram_array(g) -> np.ndarray:
    if isinstance(g, GramMatrix):
        return g.matrix.array()
    if isinstance(g, ConsensusKernel):
        return g.g_bar.array()
    if isinstance(g, Matrix):
        return g.array()
    return np.asarray(g, dtype=np.float64)


def center_kernel(g: np.ndarray) -> np.ndarray:
    """Double-centering H G H with H = I - (1/B) 11^T."""
    b = g.shape[0]
    h = np.eye(b) - np.full((b, b), 1.0 / b)
    return h @ g @ h


def cka(x, y, center: bool = False) -> float:
    """Kernel alignment in [0, 1] for PSD kernels; scale-invariant and symmetric."""
    a, b = _gram_array(x), _gram_array(y)
    if a.shape != b.shape:
        raise ShapeError(f"cka: size mismatch {a.shape} vs {b.shape}")
    if center:
        a, b = center_kernel(a), center_kernel(b)
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cka: zero-norm kernel")
    return float((a * b).sum()) / (na * nb)


def cka_node(tape: Tape, g: Node, g_bar, center: bool = False) -> Node:
    """Tape version of cka with the consensus side held constant."""
    target = _gram_array(g_bar)
    if g.value.shape != target.shape:
        raise ShapeError(f"cka: size mismatch {g.value.shape} vs {target.shape}")
    if center:
        b = target.shape[0]
        h = tape.const(np.eye(b) - np.full((b, b), 1.0 / b))
        g = tape.matmul(tape.matmul(h, g), h)
        target = center_kernel(target)
    nt = float(np.sqrt((target * target).sum()))
    if nt == 0.0:
        raise DegenerateVectorError("cka: zero-norm consensus kernel")
    num = tape.sum(tape.mul(g, tape.const(target)))
    fro = tape.sqrt(tape.sum(tape.mul(g, g)))
    return tape.divide(num, tape.affine(fro, nt))


def geo_loss(local, g_bar, center: bool = False) -> float:
    """Per-node misalignment 1 - align(G_local, consensus); 0 iff proportional."""
    return 1.0 - cka(local, g_bar, center=center)


def geo_loss_node(tape: Tape, g: Node, g_bar, center: bool = False) -> Node:
    return tape.affine(cka_node(tape, g, g_bar, center=center), -1.0, 1.0)


def consensus(grams: list[GramMatrix], round: int = 0) -> ConsensusKernel:
    """Entrywise mean over the round's Grams, summed in node-id order."""
    if not grams:
        raise ProtocolError("consensus: no Gram matrices uploaded")
    ordered = sorted(grams, key=lambda g: g.node_id)
    size = ordered[0].size
    acc = np.zeros((size, size))
    for g in ordered:
        if g.size != size:
            raise ShapeError(f"consensus: mixed Gram sizes {g.size} vs {size}")
        acc = acc + g.matrix.array()
    return ConsensusKernel(Matrix.from_array(acc / len(ordered)), contributing_nodes=len(ordered), round=round)


def federation_geo_penalty(grams: list[GramMatrix], g_bar: ConsensusKernel, center: bool = False) -> float:
    """Server-side diagnostic: sum of per-node misalignment. Never backpropagated."""
    ordered = sorted(grams, key=lambda g: g.node_id)
    return float(sum(geo_loss(g, g_bar, center=center) for g in ordered))


def cross_modal_retrieval(emb_a: np.ndarray, emb_b: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Top-1 nearest-anchor retrieval from modality A's anchors into B's.

    Returns (index accuracy, concept accuracy): whether the best match is the
    same anchor slot, and whether it at least shares the concept label.
    """
    na = emb_a / np.linalg.norm(emb_a, axis=1, keepdims=True)
    nb = emb_b / np.linalg.norm(emb_b, axis=1, keepdims=True)
    pred = np.argmax(na @ nb.T, axis=1)
    idx = np.arange(emb_a.shape[0])
    labels = np.asarray(labels)
    return float((pred == idx).mean()), float((labels[pred] == labels[idx]).mean())
