"""Shared transformer, frozen per-modality tokenizer stubs, local adapters,
and low-rank weight attachments.

The transformer is deliberately small (pre-norm blocks, softmax attention,
tanh MLP, mean pooling, no positional encoding) so that shape and alignment
behaviour is observable in seconds. Tokenizers are frozen random projections
standing in for pre-trained encoders; adapters are the only modality-specific
trainable map into the shared width.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateDirectionError, NumericOverflowError, ShapeError
from .numerics import Matrix, Node, Param, Tape, column_norms
from .rng import Rng

ATTENTION_WEIGHTS = ("wq", "wk", "wv", "wo")
DORA_NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class ModalitySpec:
    """Static description of one modality's raw and token geometry."""

    name: str
    token_dim: int
    seq_len: int
    raw_dim: int

    def __post_init__(self):
        if self.token_dim < 1 or self.seq_len < 1 or self.raw_dim < 1:
            raise ConfigError(f"modality {self.name}: dims must be >= 1")

    @property
    def raw_input_size(self) -> int:
        return self.raw_dim * self.seq_len


DEFAULT_MODALITIES = {
    "image": ModalitySpec("image", token_dim=24, seq_len=8, raw_dim=32),
    "text": ModalitySpec("text", token_dim=16, seq_len=8, raw_dim=24),
    "genetics": ModalitySpec("genetics", token_dim=12, seq_len=8, raw_dim=16),
    "tabular": ModalitySpec("tabular", token_dim=8, seq_len=8, raw_dim=12),
}


class TokenizerStub:
    """Frozen random projection from raw slices to tokens.

    The projection is a pure function of (seed, modality), so every node of a
    modality tokenizes identically across rounds and machines.
    """

    def __init__(self, spec: ModalitySpec, rng: Rng):
        self.spec = spec
        self.proj = Matrix.from_array(rng.normal(spec.raw_dim, spec.token_dim) / math.sqrt(spec.raw_dim))


def tokenize(stub: TokenizerStub, x: np.ndarray) -> Matrix:
    """Slice a raw sample into seq_len tokens and project each one."""
    spec = stub.spec
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != spec.raw_input_size:
        raise ShapeError(f"tokenize: sample length {x.size} != {spec.raw_dim}*{spec.seq_len} for {spec.name}")
    return Matrix.from_array(x.reshape(spec.seq_len, spec.raw_dim) @ stub.proj.array())


class Adapter:
    """Trainable linear map token_dim -> d_model; local to a node, never shared."""

    def __init__(self, spec: ModalitySpec, d_model: int, rng: Rng):
        self.spec = spec
        self.w = Param(
            "adapter",
            Matrix.from_array(rng.normal(spec.token_dim, d_model) / math.sqrt(spec.token_dim)),
            trainable=True,
        )


def adapt(adapter: Adapter, tokens: Matrix) -> Matrix:
    if tokens.cols != adapter.w.value.rows:
        raise ShapeError(f"adapt: token dim {tokens.cols} != adapter input {adapter.w.value.rows}")
    return Matrix.from_array(tokens.array() @ adapter.w.value.array())


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    mlp_hidden: int = 64
    n_classes: int = 8
    rank: int = 4
    lora_targets: tuple[str, ...] = ("wq", "wv")

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (1 <= self.rank < self.d_model):
            raise ConfigError(f"rank={self.rank} must satisfy 1 <= rank < d_model={self.d_model}")
        bad = set(self.lora_targets) - set(ATTENTION_WEIGHTS)
        if bad:
            raise ConfigError(f"unknown adaptation targets {sorted(bad)}")
        if not self.lora_targets:
            raise ConfigError("at least one adaptation target is required")
        for name, v in (("n_blocks", self.n_blocks), ("mlp_hidden", self.mlp_hidden), ("n_classes", self.n_classes)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1")


class TransformerParams:
    """All shared-model weights, each a Param.

    With trainable=False (the low-rank modes) the base weights are frozen and
    only attachments, adapters and the classifier head carry gradients; with
    trainable=True (dense federated averaging) everything trains.
    """

    def __init__(self, cfg: TransformerConfig, rng: Rng, trainable: bool = False):
        self.cfg = cfg
        d, h = cfg.d_model, cfg.mlp_hidden
        sq = math.sqrt(d)
        self.blocks: list[dict[str, Param]] = []
        for i in range(cfg.n_blocks):
            bstream = rng.child(f"block{i}")
            blk: dict[str, Param] = {}
            for wname in ATTENTION_WEIGHTS:
                blk[wname] = Param(
                    f"block{i}.{wname}",
                    Matrix.from_array(bstream.child(wname).normal(d, d) / sq),
                    trainable,
                )
            blk["ln1_g"] = Param(f"block{i}.ln1_g", Matrix.from_array(np.ones((1, d))), trainable)
            blk["ln1_b"] = Param(f"block{i}.ln1_b", Matrix.zeros(1, d), trainable)
            blk["ln2_g"] = Param(f"block{i}.ln2_g", Matrix.from_array(np.ones((1, d))), trainable)
            blk["ln2_b"] = Param(f"block{i}.ln2_b", Matrix.zeros(1, d), trainable)
            blk["w1"] = Param(f"block{i}.w1", Matrix.from_array(bstream.child("w1").normal(d, h) / sq), trainable)
            blk["b1"] = Param(f"block{i}.b1", Matrix.zeros(1, h), trainable)
            blk["w2"] = Param(
                f"block{i}.w2", Matrix.from_array(bstream.child("w2").normal(h, d) / math.sqrt(h)), trainable
            )
            blk["b2"] = Param(f"block{i}.b2", Matrix.zeros(1, d), trainable)
            self.blocks.append(blk)
        # The head is federated alongside the low-rank blocks and always trains.
        self.head = Param("head", Matrix.from_array(rng.child("head").normal(d, cfg.n_classes) / sq), trainable=True)

    def named_params(self):
        for blk in self.blocks:
            for key in ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                yield blk[key].name, blk[key]
        yield "head", self.head

    def block_weight(self, target: str) -> Param:
        """Look up e.g. 'block0.wq'."""
        blockname, wname = target.split(".")
        return self.blocks[int(blockname.removeprefix("block"))][wname]

    def snapshot(self) -> dict[str, bytes]:
        return {name: p.value.array().tobytes() for name, p in self.named_params()}


@dataclass
class LoraAttachment:
    """Low-rank update attached to one shared weight.

    a_fixed is drawn once from the shared seed and frozen everywhere, so the
    per-node b blocks live in a common basis and average meaningfully. In
    dora mode, m holds per-column magnitudes and the normalized composite is
    the direction.
    """

    target: str
    a_fixed: Matrix
    b: Param
    mode: str
    m: Param | None = None


def make_attachments(
    cfg: TransformerConfig, params: TransformerParams, rng: Rng, mode: str
) -> dict[str, LoraAttachment]:
    """One attachment per (block, target); rng must be the shared global stream."""
    if mode not in ("lora", "dora"):
        raise ConfigError(f"attachment mode must be lora or dora, got {mode!r}")
    atts: dict[str, LoraAttachment] = {}
    d, r = cfg.d_model, cfg.rank
    for i in range(cfg.n_blocks):
        for wname in cfg.lora_targets:
            target = f"block{i}.{wname}"
            a = Matrix.from_array(rng.child(f"basis/{target}").normal(r, d) / math.sqrt(d))
            b = Param(f"{target}.b", Matrix.zeros(d, r), trainable=True)
            m = None
            if mode == "dora":
                theta = params.block_weight(target).value
                m = Param(f"{target}.m", Matrix.from_array(column_norms(theta).reshape(1, d)), trainable=True)
            atts[target] = LoraAttachment(target, a, b, mode, m)
    return atts


def basis_fingerprint(atts: dict[str, LoraAttachment]) -> int:
    """64-bit digest of all frozen basis matrices; aggregation refuses mixed bases."""
    h = hashlib.sha256()
    for target in sorted(atts):
        h.update(target.encode("utf-8"))
        h.update(atts[target].a_fixed.array().tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def effective_weight(theta_w: Matrix, att: LoraAttachment) -> Matrix:
    """Compose the weight a node actually runs with.

    lora: theta + b a. dora: column magnitudes m applied to the column-normalized
    composite; columns whose norm falls below 1e-8 raise rather than clamp.
    """
    if att.b.value.cols != att.a_fixed.rows:
        raise ShapeError(f"effective_weight: b {att.b.value.shape} vs a {att.a_fixed.shape}")
    w = theta_w.array() + att.b.value.array() @ att.a_fixed.array()
    if w.shape != theta_w.shape:
        raise ShapeError(f"effective_weight: update shape {w.shape} != target {theta_w.shape}")
    if att.mode == "lora":
        if not att.b.value.array().any():
            return theta_w  # exact identity, no arithmetic applied
        return Matrix.from_array(w)
    cn = np.sqrt((w * w).sum(axis=0, keepdims=True))
    if (cn < DORA_NORM_FLOOR).any():
        j = int(np.argmin(cn))
        raise DegenerateDirectionError(f"effective_weight[{att.target}]: column {j} norm {cn[0, j]:.3e} < 1e-8")
    return Matrix.from_array(att.m.value.array() * (w / cn))


def effective_weight_node(tape: Tape, theta_w: Param, att: LoraAttachment, detach_magnitude: bool = False) -> Node:
    """Tape version of effective_weight.

    detach_magnitude feeds m as a constant so no gradient reaches it; the
    alignment loss uses this to act on the direction only.
    """
    w = tape.add(tape.leaf(theta_w), tape.matmul(tape.leaf(att.b), tape.const(att.a_fixed)))
    if att.mode == "lora":
        return w
    cn = tape.column_norms(w)
    if (cn.value < DORA_NORM_FLOOR).any():
        j = int(np.argmin(cn.value))
        raise DegenerateDirectionError(f"effective_weight[{att.target}]: column {j} norm {cn.value[0, j]:.3e} < 1e-8")
    direction = tape.div_cols(w, cn)
    m_node = tape.const(att.m.value) if detach_magnitude else tape.leaf(att.m)
    return tape.mul_cols(direction, m_node)


def build_effective_weights(
    tape: Tape,
    params: TransformerParams,
    atts: dict[str, LoraAttachment],
    detach_magnitude: bool = False,
) -> dict[str, Node]:
    return {
        target: effective_weight_node(tape, params.block_weight(target), att, detach_magnitude)
        for target, att in atts.items()
    }


def forward_on_tape(
    tape: Tape,
    params: TransformerParams,
    weights: dict[str, Node],
    z: Node,
) -> tuple[Node, Node]:
    """Run the block stack on adapted tokens; returns (tokens_out, logits).

    `weights` maps adapted target names to their effective-weight nodes;
    untargeted weights come straight from the frozen (or dense-trainable)
    params. Non-finite intermediates abort with the offending block index.
    """
    cfg = params.cfg
    dh = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(dh)
    x = z
    for i, blk in enumerate(params.blocks):
        xn = tape.layer_norm(x, tape.leaf(blk["ln1_g"]), tape.leaf(blk["ln1_b"]))
        proj = {}
        for wname in ATTENTION_WEIGHTS[:3]:
            w = weights.get(f"block{i}.{wname}") or tape.leaf(blk[wname])
            proj[wname] = tape.matmul(xn, w)
        heads = []
        for h in range(cfg.n_heads):
            qh = tape.slice_cols(proj["wq"], h * dh, (h + 1) * dh)
            kh = tape.slice_cols(proj["wk"], h * dh, (h + 1) * dh)
            vh = tape.slice_cols(proj["wv"], h * dh, (h + 1) * dh)
            att = tape.softmax_rows(tape.affine(tape.matmul(qh, tape.transpose(kh)), scale))
            heads.append(tape.matmul(att, vh))
        wo = weights.get(f"block{i}.wo") or tape.leaf(blk["wo"])
        x = tape.add(x, tape.matmul(tape.concat_cols(heads), wo))
        xn2 = tape.layer_norm(x, tape.leaf(blk["ln2_g"]), tape.leaf(blk["ln2_b"]))
        hidden = tape.tanh(tape.add_row(tape.matmul(xn2, tape.leaf(blk["w1"])), tape.leaf(blk["b1"])))
        x = tape.add(x, tape.add_row(tape.matmul(hidden, tape.leaf(blk["w2"])), tape.leaf(blk["b2"])))
        if not np.isfinite(x.value).all():
            raise NumericOverflowError(f"forward: non-finite activations after block {i}")
    logits = tape.matmul(tape.mean_pool(x), tape.leaf(params.head))
    return x, logits


def forward(
    params: TransformerParams,
    atts: dict[str, LoraAttachment],
    z: Matrix,
    detach_magnitude: bool = False,
) -> tuple[Matrix, np.ndarray]:
    """Eager forward pass; returns (tokens_out, logits vector)."""
    tape = Tape(record=False)
    weights = build_effective_weights(tape, params, atts, detach_magnitude)
    tokens, logits = forward_on_tape(tape, params, weights, tape.const(z))
    return Matrix.from_array(tokens.value), logits.value.reshape(-1).copy()


def pooled_embedding(
    params: TransformerParams,
    atts: dict[str, LoraAttachment],
    stub: TokenizerStub,
    adapter: Adapter,
    x: np.ndarray,
) -> np.ndarray:
    """tokenize -> adapt -> forward -> mean pool; the anchor/sample embedding."""
    tokens_out, _ = forward(params, atts, adapt(adapter, tokenize(stub, x)))
    return tokens_out.array().mean(axis=0)


def cross_entropy_node(tape: Tape, logits: Node, label: int) -> Node:
    """Softmax cross-entropy of a 1xC logits row against an integer label."""
    n_classes = logits.shape[1]
    if not (0 <= label < n_classes):
        raise ShapeError(f"label {label} outside [0, {n_classes})")
    onehot = np.zeros((1, n_classes))
    onehot[0, label] = 1.0
    return tape.sub(tape.logsumexp_rows(logits), tape.sum(tape.mul(logits, tape.const(onehot))))


def embed_batch(
    params: TransformerParams,
    atts: dict[str, LoraAttachment],
    stub: TokenizerStub,
    adapter: Adapter,
    xs: np.ndarray,
) -> np.ndarray:
    """Pooled embeddings for a stack of raw samples, one row per sample."""
    return np.stack([pooled_embedding(params, atts, stub, adapter, x) for x in xs])


@dataclass
class ModelStack:
    """One node's complete inference pipeline: tokenizer, adapter, shared model."""

    params: TransformerParams
    atts: dict[str, LoraAttachment] = field(default_factory=dict)
    stub: TokenizerStub | None = None
    adapter: Adapter | None = None

    def pooled(self, x: np.ndarray) -> np.ndarray:
        return pooled_embedding(self.params, self.atts, self.stub, self.adapter, x)

    def embed(self, xs: np.ndarray) -> np.ndarray:
        return embed_batch(self.params, self.atts, self.stub, self.adapter, xs)

    def pooled_tokens(self, tokens: Matrix) -> np.ndarray:
        """Pooled embedding from already-tokenized input (tokenizers are frozen)."""
        tokens_out, _ = forward(self.params, self.atts, adapt(self.adapter, tokens))
        return tokens_out.array().mean(axis=0)

    def embed_tokens(self, tokens: list[Matrix]) -> np.ndarray:
        return np.stack([self.pooled_tokens(t) for t in tokens])

    def logits_tokens(self, tokens: Matrix) -> np.ndarray:
        _, logits = forward(self.params, self.atts, adapt(self.adapter, tokens))
        return logits
