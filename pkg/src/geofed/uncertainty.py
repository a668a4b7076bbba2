"""Per-sample anchor-proximity uncertainty and precision weights.

A sample's uncertainty is half of one minus its best cosine match against the
round's anchor embeddings: 0 on an anchor, 0.5 orthogonal to all of them, 1
only when anti-aligned with every anchor. Node weights are proportional to
mean inverse uncertainty (clamped below before inversion), normalized to sum
to one across the federation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, ProtocolError

DEFAULT_U_MIN = 1e-3
WEIGHT_MODES = ("mean_inv_u", "sum_inv_u")


@dataclass
class UncertaintySummary:
    """What a node reports about its local data's proximity to the anchors."""

    node_id: int
    mean_u: float
    mean_inv_u: float
    n_samples: int
    clamped_fraction: float

    def __post_init__(self):
        if not (0.0 <= self.mean_u <= 1.0):
            raise ProtocolError(f"mean_u={self.mean_u} outside [0, 1]")
        if self.mean_inv_u < 1.0 - 1e-12:
            raise ProtocolError(f"mean_inv_u={self.mean_inv_u} below 1")
        if self.n_samples < 1:
            raise ProtocolError("summary over empty dataset")


@dataclass
class NodeWeights:
    weights: dict[int, float]
    normalizer: float

    def __getitem__(self, node_id: int) -> float:
        return self.weights[node_id]


def _max_anchor_cosine(z: np.ndarray, anchor_embeddings: np.ndarray) -> float:
    zn = float(np.sqrt(z @ z))
    if zn == 0.0:
        raise DegenerateVectorError("lap_u: zero-norm sample embedding")
    an = np.sqrt((anchor_embeddings * anchor_embeddings).sum(axis=1))
    if (an == 0.0).any():
        raise DegenerateVectorError("lap_u: zero-norm anchor embedding")
    return float(np.max((anchor_embeddings @ z) / (an * zn)))


def lap_u(z: np.ndarray, anchor_embeddings: np.ndarray) -> float:
    """Latent anchor-proximity uncertainty of one embedding, in [0, 1]."""
    anchor_embeddings = np.atleast_2d(np.asarray(anchor_embeddings, dtype=np.float64))
    if anchor_embeddings.shape[0] == 0:
        raise ProtocolError("lap_u: empty anchor set")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    u = 0.5 * (1.0 - _max_anchor_cosine(z, anchor_embeddings))
    return min(1.0, max(0.0, u))


def node_summary(
    embeddings: np.ndarray,
    anchor_embeddings: np.ndarray,
    u_min: float = DEFAULT_U_MIN,
    node_id: int = 0,
) -> UncertaintySummary:
    """Aggregate per-sample uncertainties, clamping below u_min before inversion."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[0] < 1:
        raise ProtocolError("node_summary: empty dataset")
    us = np.array([lap_u(z, anchor_embeddings) for z in embeddings])
    clamped = us < u_min
    inv = 1.0 / np.maximum(us, u_min)
    return UncertaintySummary(
        node_id=node_id,
        mean_u=float(us.mean()),
        mean_inv_u=float(inv.mean()),
        n_samples=embeddings.shape[0],
        clamped_fraction=float(clamped.mean()),
    )


def precision_weights(summaries: list[UncertaintySummary], mode: str = "mean_inv_u") -> NodeWeights:
    """Normalized node weights proportional to inverse uncertainty.

    mean_inv_u weighs each node by its average confidence; sum_inv_u keeps the
    literal per-sample sum, which additionally scales with dataset size.
    """
    if not summaries:
        raise ProtocolError("precision_weights: no summaries")
    if mode not in WEIGHT_MODES:
        raise ProtocolError(f"unknown weight mode {mode!r}")
    ordered = sorted(summaries, key=lambda s: s.node_id)
    scores = [s.mean_inv_u if mode == "mean_inv_u" else s.mean_inv_u * s.n_samples for s in ordered]
    normalizer = float(sum(scores))
    return NodeWeights(
        weights={s.node_id: score / normalizer for s, score in zip(ordered, scores)},
        normalizer=normalizer,
    )


def uniform_weights(node_ids: list[int]) -> NodeWeights:
    if not node_ids:
        raise ProtocolError("uniform_weights: no nodes")
    k = len(node_ids)
    return NodeWeights(weights={nid: 1.0 / k for nid in sorted(node_ids)}, normalizer=float(k))
