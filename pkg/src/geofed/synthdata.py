"""Deterministic generation of unpaired multimodal datasets.

All modalities express the same latent concept space. Each modality owns a
fixed nonlinear map (random matrix -> tanh -> random matrix) from latents to
raw sample vectors, shared by every node and anchor of that modality; nodes
then draw their own latents, so no sample is paired across nodes. Corruption
modes produce the failure cases precision weighting is supposed to catch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import AnchorSet
from .model import ModalitySpec
from .rng import Rng

CORRUPTION_KINDS = ("none", "label_noise", "embedding_shift", "pure_noise")


@dataclass(frozen=True)
class Corruption:
    kind: str = "none"
    rho: float = 0.0  # label flip probability (label_noise)
    shift: float = 0.0  # latent offset norm (embedding_shift)

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError(f"label_noise rho={self.rho} outside [0, 1]")


@dataclass
class ConceptSpace:
    """Shared semantic space: unit-norm concept means, pairwise separated."""

    n_concepts: int
    latent_dim: int
    concept_means: np.ndarray
    seed: int
    sigma: float = 0.3

    def separation(self) -> float:
        m = self.concept_means
        dists = np.sqrt(((m[:, None, :] - m[None, :, :]) ** 2).sum(-1))
        return float(dists[~np.eye(self.n_concepts, dtype=bool)].min())


def gen_concepts(n_concepts: int, latent_dim: int, seed: int, sigma: float = 0.3) -> ConceptSpace:
    """Draw unit-norm concept means, redrawing until min pairwise distance > 2*sigma."""
    if n_concepts < 2:
        raise ConfigError(f"need at least 2 concepts, got {n_concepts}")
    rng = Rng(seed, "concepts")
    for _ in range(100):
        means = rng.normal(n_concepts, latent_dim)
        means = means / np.sqrt((means * means).sum(axis=1, keepdims=True))
        space = ConceptSpace(n_concepts, latent_dim, means, seed, sigma)
        if space.separation() > 2.0 * sigma:
            return space
    raise ConfigError(
        f"could not separate {n_concepts} concepts in {latent_dim} dims by {2 * sigma:.2f} after 100 redraws"
    )


class ModalityMap:
    """Fixed nonlinear latent -> raw map, a pure function of (space seed, modality)."""

    def __init__(self, space: ConceptSpace, spec: ModalitySpec):
        rng = Rng(space.seed, f"modality_map/{spec.name}")
        hidden = 4 * space.latent_dim
        self.m1 = rng.normal(space.latent_dim, hidden) / np.sqrt(space.latent_dim)
        self.m2 = rng.normal(hidden, spec.raw_input_size) / np.sqrt(hidden)

    def apply(self, latents: np.ndarray) -> np.ndarray:
        return np.tanh(np.atleast_2d(latents) @ self.m1) @ self.m2


@dataclass
class NodeDataset:
    node_id: int
    modality: ModalitySpec
    samples: np.ndarray  # N x raw_input_size
    labels: np.ndarray  # N concept ids
    corruption: Corruption = field(default_factory=Corruption)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def gen_node_dataset(
    space: ConceptSpace,
    modality: ModalitySpec,
    n_samples: int,
    corruption: Corruption,
    seed: int,
    node_id: int = 0,
) -> NodeDataset:
    """Draw one node's private dataset from the shared concept space."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = Rng(seed, f"node_data/{node_id}")

    if corruption.kind == "pure_noise":
        # Raw-space noise: samples carry no concept structure at all, and
        # labels are drawn independently of them.
        samples = rng.normal(n_samples, modality.raw_input_size)
        labels = np.asarray(rng.child("noise_labels").integers(0, space.n_concepts, size=n_samples))
        return NodeDataset(node_id, modality, samples, labels.astype(np.int64), corruption)

    labels = np.asarray(rng.integers(0, space.n_concepts, size=n_samples))
    latents = space.concept_means[labels] + space.sigma * rng.normal(n_samples, space.latent_dim)
    if corruption.kind == "embedding_shift":
        direction = rng.child("shift").normal(space.latent_dim)
        direction = direction / np.sqrt(direction @ direction)
        latents = latents + corruption.shift * direction
    samples = ModalityMap(space, modality).apply(latents)

    if corruption.kind == "label_noise":
        crng = rng.child("label_noise")
        flip = crng.uniform(n_samples) < corruption.rho
        offsets = np.asarray(crng.integers(1, space.n_concepts, size=n_samples))
        labels = np.where(flip, (labels + offsets) % space.n_concepts, labels)

    return NodeDataset(node_id, modality, samples, labels.astype(np.int64), corruption)


@dataclass(frozen=True)
class AnchorSetSpec:
    """How the public anchor set is built per modality."""

    anchors_per_concept: int = 2
    coverage: frozenset[str] | None = None  # None: every requested modality has real anchors
    synthetic: frozenset[str] = frozenset()  # modalities served by shifted synthetic anchors
    synthetic_offset: float = 0.5

    def anchors_total(self, n_concepts: int) -> int:
        return self.anchors_per_concept * n_concepts


def gen_anchor_set(
    space: ConceptSpace,
    spec: AnchorSetSpec,
    modalities: list[ModalitySpec],
    seed: int,
) -> dict[str, AnchorSet]:
    """Public anchors per modality, concept-major order, unpaired across modalities.

    Synthetic-flagged modalities get anchors drawn around a shifted concept
    mean (fixed offset of the configured norm), modelling generated stand-ins
    for a modality missing from the public set.
    """
    out: dict[str, AnchorSet] = {}
    for mod in modalities:
        covered = spec.coverage is None or mod.name in spec.coverage
        synthetic = mod.name in spec.synthetic
        if not covered and not synthetic:
            raise ConfigError(f"anchor set does not cover modality {mod.name!r} and no synthetic flag is set")
        rng = Rng(seed, f"anchors/{mod.name}")
        mapper = ModalityMap(space, mod)
        offset = np.zeros(space.latent_dim)
        if synthetic:
            direction = rng.child("synthetic_offset").normal(space.latent_dim)
            offset = spec.synthetic_offset * direction / np.sqrt(direction @ direction)
        latents, labels = [], []
        for c in range(space.n_concepts):
            for _ in range(spec.anchors_per_concept):
                latents.append(space.concept_means[c] + offset + space.sigma * rng.normal(space.latent_dim))
                labels.append(c)
        out[mod.name] = AnchorSet(mod.name, mapper.apply(np.stack(latents)), np.array(labels))
    return out
