"""The federation round protocol.

Each round: the server broadcasts the shared low-rank state and the previous
round's consensus kernel; every node runs local SGD on task loss plus the
weighted alignment term, then uploads its update blocks, a fresh anchor Gram,
and an uncertainty summary; the server averages kernels into a new consensus,
derives node weights (uniform or precision), and aggregates.

Round 0 runs task-only (no consensus exists yet). All uplinks and downlinks
pass through the wire codec so the byte ledger reflects real serialized
sizes, and the server only ever sees parsed messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, ProtocolError, TrainingError
from .geometry import (
    AnchorSet,
    ConsensusKernel,
    GramMatrix,
    anchor_tokens,
    cka,
    consensus,
    cross_modal_retrieval,
    federation_geo_penalty,
    geo_loss_node,
    gram_from_embeddings,
    gram_node,
)
from .model import (
    Adapter,
    ModelStack,
    TokenizerStub,
    TransformerParams,
    basis_fingerprint,
    build_effective_weights,
    cross_entropy_node,
    forward_on_tape,
    make_attachments,
    tokenize,
)
from .numerics import Matrix, Param, Tape, column_norms
from .rng import Rng
from .synthdata import AnchorSetSpec, Corruption, gen_anchor_set, gen_concepts, gen_node_dataset
from .tensorio import tensor_entry_size
from .uncertainty import NodeWeights, UncertaintySummary, node_summary, precision_weights, uniform_weights
from .wire import (
    NodeUpdateMessage,
    ServerBroadcast,
    gram_bytes,
    message_size,
    pack_broadcast,
    pack_message,
    unpack_broadcast,
    unpack_message,
)

_METHOD_KIND = {"geolora": "lora", "geodora": "dora", "fedavg_full": "dense"}


def build_shared_params(cfg: ExperimentConfig):
    """The shared model exactly as every participant reconstructs it from the seed."""
    tcfg = cfg.transformer_config()
    shared = Rng(cfg.seed, "shared")
    trainable = cfg.aggregation.method == "fedavg_full"
    params = TransformerParams(tcfg, shared.child("theta"), trainable=trainable)
    if cfg.aggregation.method == "fedavg_full":
        atts = {}
    else:
        mode = "dora" if cfg.aggregation.method == "geodora" else "lora"
        atts = make_attachments(tcfg, params, shared.child("basis"), mode)
    return params, atts


# ---------------------------------------------------------------------------
# Communication accounting.
# ---------------------------------------------------------------------------


@dataclass
class CommLedger:
    """Exact byte counts: totals are sums of real serialized message lengths."""

    full_model_bytes: int
    uplink: dict[int, list[int]] = field(default_factory=dict)
    downlink: dict[int, list[int]] = field(default_factory=dict)

    def record(self, node_id: int, up: int, down: int) -> None:
        self.uplink.setdefault(node_id, []).append(up)
        self.downlink.setdefault(node_id, []).append(down)

    @property
    def uplink_total(self) -> int:
        return sum(sum(v) for v in self.uplink.values())

    @property
    def downlink_total(self) -> int:
        return sum(sum(v) for v in self.downlink.values())

    def to_dict(self) -> dict:
        return {
            "uplink_total": self.uplink_total,
            "downlink_total": self.downlink_total,
            "full_model_bytes": self.full_model_bytes,
            "uplink_per_node": {str(k): sum(v) for k, v in sorted(self.uplink.items())},
            "downlink_per_node": {str(k): sum(v) for k, v in sorted(self.downlink.items())},
        }


def lora_update_shapes(cfg: ExperimentConfig) -> dict[str, tuple[int, ...]]:
    """Tensor layout of a low-rank uplink, mirroring the node's message builder."""
    tcfg = cfg.transformer_config()
    dora = cfg.aggregation.method == "geodora"
    targets = sorted(f"block{i}.{t}" for i in range(tcfg.n_blocks) for t in tcfg.lora_targets)
    shapes: dict[str, tuple[int, ...]] = {}
    for target in targets:
        shapes[f"update.{target}.b"] = (tcfg.d_model, tcfg.rank)
        if dora:
            shapes[f"update.{target}.m"] = (1, tcfg.d_model)
    shapes["update.head.delta"] = (tcfg.d_model, tcfg.n_classes)
    return shapes


def dense_update_shapes(cfg: ExperimentConfig) -> dict[str, tuple[int, ...]]:
    """Tensor layout of a full dense uplink (classic federated averaging)."""
    tcfg = cfg.transformer_config()
    d, h = tcfg.d_model, tcfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(tcfg.n_blocks):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"theta.block{i}.{w}"] = (d, d)
        for w in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "b2"):
            shapes[f"theta.block{i}.{w}"] = (1, d)
        shapes[f"theta.block{i}.w1"] = (d, h)
        shapes[f"theta.block{i}.b1"] = (1, h)
        shapes[f"theta.block{i}.w2"] = (h, d)
    shapes["update.head.delta"] = (d, tcfg.n_classes)
    return shapes


def expected_uplink_bytes(cfg: ExperimentConfig) -> int:
    """Analytic size of one uplink message for this config's aggregation method."""
    b = cfg.data.anchors_per_concept * cfg.data.n_concepts
    shapes = dense_update_shapes(cfg) if cfg.aggregation.method == "fedavg_full" else lora_update_shapes(cfg)
    return message_size(shapes, b)


def dense_uplink_bytes(cfg: ExperimentConfig) -> int:
    b = cfg.data.anchors_per_concept * cfg.data.n_concepts
    return message_size(dense_update_shapes(cfg), b)


@dataclass
class CommSavingsReport:
    d_model: int
    rank: int
    mode: str
    dora: bool
    per_matrix_dense_bytes: int
    per_matrix_update_bytes: int
    per_matrix_fraction: float
    per_matrix_savings: float
    message_uplink_bytes: int | None = None
    message_dense_bytes: int | None = None
    message_fraction: float | None = None
    message_savings: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def comm_savings(d_model: int, rank: int, mode: str = "b_only", dora: bool = False) -> float:
    """Analytic uplink savings per adapted matrix: 1 - update_bytes/dense_bytes.

    b_only sends only the projection-back block (the shared basis is frozen);
    a_and_b charges for both factors, which stops paying off as rank grows and
    is reported honestly (savings can go negative).
    """
    return comm_savings_report(d_model, rank, mode=mode, dora=dora).per_matrix_savings


def comm_savings_report(
    d_model: int,
    rank: int,
    mode: str = "b_only",
    dora: bool = False,
    cfg: ExperimentConfig | None = None,
) -> CommSavingsReport:
    if not (1 <= rank <= d_model):
        raise ConfigError(f"comm_savings: need 1 <= rank <= d_model, got rank={rank}, d_model={d_model}")
    if mode not in ("b_only", "a_and_b"):
        raise ConfigError(f"comm_savings: unknown mode {mode!r}")
    dense = 8 * d_model * d_model
    update = 8 * d_model * rank
    if mode == "a_and_b":
        update += 8 * rank * d_model
    if dora:
        update += 8 * d_model
    report = CommSavingsReport(
        d_model=d_model,
        rank=rank,
        mode=mode,
        dora=dora,
        per_matrix_dense_bytes=dense,
        per_matrix_update_bytes=update,
        per_matrix_fraction=update / dense,
        per_matrix_savings=1.0 - update / dense,
    )
    if cfg is not None:
        up = expected_uplink_bytes(cfg)
        full = dense_uplink_bytes(cfg)
        report.message_uplink_bytes = up
        report.message_dense_bytes = full
        report.message_fraction = up / full
        report.message_savings = 1.0 - up / full
    return report


# ---------------------------------------------------------------------------
# Node.
# ---------------------------------------------------------------------------


class FederationNode:
    """One silo: private unimodal data, local adapter, shared-model replica."""

    def __init__(self, index: int, cfg: ExperimentConfig, space, anchors: AnchorSet):
        node_cfg = cfg.nodes[index]
        self.node_id = index
        self.cfg = cfg
        self.spec = cfg.modality_spec(node_cfg.modality)
        self.kind = _METHOD_KIND[cfg.aggregation.method]
        self.params, self.atts = build_shared_params(cfg)
        self.basis_fp = basis_fingerprint(self.atts) if self.atts else 0
        stub = TokenizerStub(self.spec, Rng(cfg.seed, f"tokenizer/{self.spec.name}"))
        node_seed = node_cfg.seed if node_cfg.seed is not None else cfg.seed
        nrng = Rng(node_seed, f"node{index}")
        self.adapter = Adapter(self.spec, cfg.model.d_model, nrng.child("adapter"))
        self.stack = ModelStack(self.params, self.atts, stub, self.adapter)
        corruption = Corruption(node_cfg.corruption.kind, node_cfg.corruption.rho, node_cfg.corruption.shift)
        self.dataset = gen_node_dataset(space, self.spec, node_cfg.n_samples, corruption, node_seed, node_id=index)
        n_eval = min(int(round(cfg.data.eval_fraction * self.dataset.size)), self.dataset.size - 1)
        self.train_idx = np.arange(self.dataset.size - n_eval)
        self.eval_idx = np.arange(self.dataset.size - n_eval, self.dataset.size)
        self.tokens = [tokenize(stub, x) for x in self.dataset.samples]  # frozen, cache once
        self.anchors = anchors
        self.anchor_toks = anchor_tokens(self.stack, anchors)
        self.batch_rng = nrng.child("batches")
        self.lap_rng = nrng.child("lap")

    def trainable_params(self) -> list[Param]:
        """Fixed update order: adapter, low-rank blocks, dense weights, head."""
        ps: list[Param] = [self.adapter.w]
        for target in sorted(self.atts):
            att = self.atts[target]
            ps.append(att.b)
            if att.m is not None:
                ps.append(att.m)
        if self.kind == "dense":
            ps.extend(p for name, p in self.params.named_params() if name != "head")
        ps.append(self.params.head)
        return ps

    def adopt(self, bcast: ServerBroadcast) -> None:
        """Overwrite shared state from a broadcast; adapter stays local."""
        for target in sorted(self.atts):
            att = self.atts[target]
            att.b.assign(Matrix.from_array(bcast.tensors[f"update.{target}.b"]))
            if att.m is not None:
                att.m.assign(Matrix.from_array(bcast.tensors[f"update.{target}.m"]))
        if self.kind == "dense":
            for name, p in self.params.named_params():
                if name != "head":
                    p.assign(Matrix.from_array(bcast.tensors[f"theta.{name}"]))
        self.params.head.assign(Matrix.from_array(bcast.tensors["head"]))

    def embed_tokens(self, tokens) -> np.ndarray:
        return self.stack.embed_tokens(tokens)

    def update_tensors(self, head_start: np.ndarray) -> dict[str, np.ndarray]:
        """The tensors this node is willing to put on the wire. No adapter, ever."""
        tensors: dict[str, np.ndarray] = {}
        for target in sorted(self.atts):
            att = self.atts[target]
            tensors[f"update.{target}.b"] = att.b.value.array().copy()
            if att.m is not None:
                tensors[f"update.{target}.m"] = att.m.value.array().copy()
        if self.kind == "dense":
            for name, p in self.params.named_params():
                if name != "head":
                    tensors[f"theta.{name}"] = p.value.array().copy()
        tensors["update.head.delta"] = self.params.head.value.array() - head_start
        return tensors

    def eval_accuracy(self) -> float:
        correct = 0
        for i in self.eval_idx:
            logits = self.stack.logits_tokens(self.tokens[i])
            correct += int(np.argmax(logits) == self.dataset.labels[i])
        return correct / len(self.eval_idx)


@dataclass
class NodeDiagnostics:
    """Simulation-side observability; never serialized onto the wire."""

    node_id: int
    task_loss: float
    geo_loss: float | None
    cka_to_consensus: float | None
    anchor_embeddings: np.ndarray
    gram: GramMatrix
    summary: UncertaintySummary


@dataclass
class LocalRoundResult:
    wire_bytes: bytes
    diagnostics: NodeDiagnostics


def local_round(node: FederationNode, round_idx: int, bcast: ServerBroadcast, cfg: ExperimentConfig) -> LocalRoundResult:
    """Adopt broadcast state, run local SGD, emit the serialized update."""
    node.adopt(bcast)
    head_start = node.params.head.value.array().copy()
    g_bar = bcast.consensus
    lam = cfg.alignment_weight if g_bar is not None else 0.0
    trainables = node.trainable_params()
    n_train = len(node.train_idx)
    task_losses = []
    for step in range(cfg.local_steps):
        for p in trainables:
            p.zero_grad()
        tape = Tape()
        eff = build_effective_weights(tape, node.params, node.atts, detach_magnitude=False)
        w_adapter = tape.leaf(node.adapter.w)
        batch = node.batch_rng.integers(0, n_train, size=cfg.batch_size)
        losses = []
        for b in batch:
            i = int(node.train_idx[b])
            z = tape.matmul(tape.const(node.tokens[i]), w_adapter)
            _, logits = forward_on_tape(tape, node.params, eff, z)
            losses.append(cross_entropy_node(tape, logits, int(node.dataset.labels[i])))
        task = tape.affine(tape.add_n(losses), 1.0 / len(losses))
        total = task
        if lam > 0.0:
            g = gram_node(tape, node.stack, node.anchor_toks)
            geo = geo_loss_node(tape, g, g_bar, center=cfg.center_kernels)
            total = tape.add(task, tape.affine(geo, lam))
        if not np.isfinite(total.value).all():
            raise TrainingError(f"node {node.node_id}: non-finite loss at round {round_idx}, step {step}")
        tape.backward(total)
        for p in trainables:
            p.sgd_update(cfg.learning_rate)
        task_losses.append(task.item())

    anchor_embs = node.embed_tokens(node.anchor_toks)
    gram = gram_from_embeddings(anchor_embs, node_id=node.node_id, round=round_idx)
    sub = node.lap_rng.subsample(node.dataset.size, cfg.lap_subsample)
    sample_embs = node.embed_tokens([node.tokens[i] for i in sub])
    summary = node_summary(sample_embs, anchor_embs, u_min=cfg.u_min, node_id=node.node_id)
    msg = NodeUpdateMessage(
        node_id=node.node_id,
        round=round_idx,
        kind=node.kind,
        basis_fingerprint=node.basis_fp,
        tensors=node.update_tensors(head_start),
        gram=gram,
        uncertainty=summary,
    )
    data = pack_message(msg)
    cka_metric = geo_metric = None
    if g_bar is not None:
        cka_metric = cka(gram, g_bar, center=cfg.center_kernels)
        geo_metric = 1.0 - cka_metric
    diag = NodeDiagnostics(
        node_id=node.node_id,
        task_loss=float(np.mean(task_losses)),
        geo_loss=geo_metric,
        cka_to_consensus=cka_metric,
        anchor_embeddings=anchor_embs,
        gram=gram,
        summary=summary,
    )
    return LocalRoundResult(data, diag)


# ---------------------------------------------------------------------------
# Server.
# ---------------------------------------------------------------------------


class ServerState:
    """Frozen base weights plus the aggregated shared state.

    theta_fixed and the frozen basis never change after construction; the
    server stores aggregated blocks and broadcasts deltas, materializing a
    dense model only on explicit export.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.kind = _METHOD_KIND[cfg.aggregation.method]
        self.params, self.atts = build_shared_params(cfg)
        self.basis_fp = basis_fingerprint(self.atts) if self.atts else 0
        tcfg = cfg.transformer_config()
        self.b_agg = {t: np.zeros((tcfg.d_model, tcfg.rank)) for t in sorted(self.atts)}
        self.m_agg = {}
        if self.kind == "dora":
            for t in sorted(self.atts):
                theta = self.params.block_weight(t).value
                self.m_agg[t] = column_norms(theta).reshape(1, -1)
        self.head = self.params.head.value.array().copy()
        self.dense = {}
        if self.kind == "dense":
            self.dense = {name: p.value.array().copy() for name, p in self.params.named_params() if name != "head"}
        self.consensus_kernel: ConsensusKernel | None = None
        self.round = 0
        self.ledger = CommLedger(full_model_bytes=dense_uplink_bytes(cfg))

    def broadcast(self, round_idx: int) -> ServerBroadcast:
        tensors: dict[str, np.ndarray] = {}
        for t in sorted(self.atts):
            tensors[f"update.{t}.b"] = self.b_agg[t]
            if self.kind == "dora":
                tensors[f"update.{t}.m"] = self.m_agg[t]
        if self.kind == "dense":
            for name, value in self.dense.items():
                tensors[f"theta.{name}"] = value
        tensors["head"] = self.head
        return ServerBroadcast(round=round_idx, kind=self.kind, tensors=tensors, consensus=self.consensus_kernel)

    def aggregate(self, updates: list[NodeUpdateMessage], weights: NodeWeights) -> None:
        if self.kind == "lora":
            aggregate_geolora(self, updates, weights)
        elif self.kind == "dora":
            aggregate_geodora(self, updates, weights)
        else:
            aggregate_fedavg_full(self, updates, weights)

    def materialize(self) -> dict[str, Matrix]:
        """Explicit export: the dense effective model the federation defines."""
        out: dict[str, Matrix] = {}
        for name, p in self.params.named_params():
            if name == "head":
                continue
            out[name] = Matrix.from_array(self.dense[name]) if self.kind == "dense" else p.value
        for t in sorted(self.atts):
            att = self.atts[t]
            w = self.params.block_weight(t).value.array() + self.b_agg[t] @ att.a_fixed.array()
            if self.kind == "dora":
                cn = np.sqrt((w * w).sum(axis=0, keepdims=True))
                w = self.m_agg[t] * (w / cn)
            out[t] = Matrix.from_array(w)
        out["head"] = Matrix.from_array(self.head)
        return out


def _check_updates(server: ServerState, updates: list[NodeUpdateMessage], weights: NodeWeights):
    if not updates:
        raise ProtocolError("aggregate: no updates")
    ordered = sorted(updates, key=lambda u: u.node_id)
    for u in ordered:
        if u.basis_fingerprint != server.basis_fp:
            raise ProtocolError(
                f"aggregate: node {u.node_id} basis fingerprint {u.basis_fingerprint:#x} "
                f"!= server {server.basis_fp:#x} (updates would mix incompatible subspaces)"
            )
        if u.node_id not in weights.weights:
            raise ProtocolError(f"aggregate: no weight for node {u.node_id}")
    return ordered


def _weighted_sum(ordered, weights, key) -> np.ndarray:
    acc = None
    for u in ordered:
        term = weights[u.node_id] * u.tensors[key]
        acc = term if acc is None else acc + term
    return acc


def aggregate_geolora(server: ServerState, updates: list[NodeUpdateMessage], weights: NodeWeights) -> ServerState:
    """Average projection-back blocks in the shared frozen basis; fold head deltas."""
    ordered = _check_updates(server, updates, weights)
    for t in sorted(server.atts):
        server.b_agg[t] = _weighted_sum(ordered, weights, f"update.{t}.b")
    server.head = server.head + _weighted_sum(ordered, weights, "update.head.delta")
    return server


def aggregate_geodora(server: ServerState, updates: list[NodeUpdateMessage], weights: NodeWeights) -> ServerState:
    """Average blocks and magnitude vectors; direction is normalized on use."""
    ordered = _check_updates(server, updates, weights)
    for t in sorted(server.atts):
        server.b_agg[t] = _weighted_sum(ordered, weights, f"update.{t}.b")
        server.m_agg[t] = _weighted_sum(ordered, weights, f"update.{t}.m")
    server.head = server.head + _weighted_sum(ordered, weights, "update.head.delta")
    return server


def aggregate_fedavg_full(server: ServerState, updates: list[NodeUpdateMessage], weights: NodeWeights) -> ServerState:
    """Classic dense averaging of the full parameter set."""
    ordered = _check_updates(server, updates, weights)
    for name in server.dense:
        server.dense[name] = _weighted_sum(ordered, weights, f"theta.{name}")
    server.head = server.head + _weighted_sum(ordered, weights, "update.head.delta")
    return server


# ---------------------------------------------------------------------------
# Orchestration.
# ---------------------------------------------------------------------------


@dataclass
class RoundNodeMetrics:
    round: int
    node: int
    task_loss: float
    geo_loss: float | None
    cka_to_consensus: float | None
    p_k: float
    uplink_bytes: int


@dataclass
class RoundServerMetrics:
    round: int
    cross_modal_cka: float | None
    retrieval_top1: float | None
    retrieval_concept: float | None
    federation_geo_penalty: float
    downlink_bytes_per_node: int


@dataclass
class FinalEval:
    accuracy_per_node: dict[int, float]
    accuracy_mean: float
    cross_modal_cka: float | None
    retrieval_top1: float | None
    retrieval_concept: float | None
    weights: dict[int, float]
    mean_u_per_node: dict[int, float]


@dataclass
class ExperimentRecord:
    config: ExperimentConfig
    node_metrics: list[RoundNodeMetrics]
    server_metrics: list[RoundServerMetrics]
    final: FinalEval
    ledger: CommLedger
    initial_cross_modal_cka: float | None
    server: "ServerState | None" = None


def _cross_modal_stats(nodes: list[FederationNode], embeddings: dict[int, np.ndarray]):
    """Mean alignment and retrieval over all cross-modality node pairs."""
    pairs = [
        (a.node_id, b.node_id)
        for i, a in enumerate(nodes)
        for b in nodes[i + 1 :]
        if a.spec.name != b.spec.name
    ]
    if not pairs:
        return None, None, None
    grams = {n.node_id: gram_from_embeddings(embeddings[n.node_id], node_id=n.node_id) for n in nodes}
    labels = nodes[0].anchors.concept_labels
    ckas, idx_accs, con_accs = [], [], []
    for a, b in pairs:
        ckas.append(cka(grams[a], grams[b]))
        fwd = cross_modal_retrieval(embeddings[a], embeddings[b], labels)
        rev = cross_modal_retrieval(embeddings[b], embeddings[a], labels)
        idx_accs.append(0.5 * (fwd[0] + rev[0]))
        con_accs.append(0.5 * (fwd[1] + rev[1]))
    return float(np.mean(ckas)), float(np.mean(idx_accs)), float(np.mean(con_accs))


def _round_weights(cfg: ExperimentConfig, summaries: list[UncertaintySummary]) -> NodeWeights:
    if cfg.aggregation.weighting == "precision":
        return precision_weights(summaries, mode=cfg.weight_mode)
    return uniform_weights([s.node_id for s in summaries])


def run_federation(cfg: ExperimentConfig) -> ExperimentRecord:
    """Execute the full protocol; deterministic in (config, seeds)."""
    if cfg.comm_audit:
        raise ConfigError("comm_audit configs are analytic-only and never train")
    space = gen_concepts(cfg.data.n_concepts, cfg.data.latent_dim, cfg.seed, cfg.data.sigma)
    used = cfg.used_modalities()
    synthetic = frozenset(m for m in cfg.data.synthetic_anchor_modalities if m in used)
    anchor_spec = AnchorSetSpec(
        anchors_per_concept=cfg.data.anchors_per_concept,
        coverage=frozenset(used) - synthetic,
        synthetic=synthetic,
        synthetic_offset=cfg.data.synthetic_anchor_offset,
    )
    anchorsets = gen_anchor_set(space, anchor_spec, [cfg.modality_spec(m) for m in used], cfg.seed)
    nodes = [FederationNode(i, cfg, space, anchorsets[cfg.nodes[i].modality]) for i in range(cfg.k)]
    server = ServerState(cfg)

    init_embs = {n.node_id: n.embed_tokens(n.anchor_toks) for n in nodes}
    initial_cka, _, _ = _cross_modal_stats(nodes, init_embs)

    node_metrics: list[RoundNodeMetrics] = []
    server_metrics: list[RoundServerMetrics] = []
    weights = uniform_weights([n.node_id for n in nodes])

    for r in range(cfg.rounds):
        bcast_bytes = pack_broadcast(server.broadcast(r))
        bcast = unpack_broadcast(bcast_bytes)
        results = [local_round(node, r, bcast, cfg) for node in nodes]
        msgs = [unpack_message(res.wire_bytes) for res in results]
        for res, msg in zip(results, msgs):
            server.ledger.record(msg.node_id, len(res.wire_bytes), len(bcast_bytes))
        kern = consensus([m.gram for m in msgs], round=r)
        server.consensus_kernel = kern
        weights = _round_weights(cfg, [m.uncertainty for m in msgs])
        server.aggregate(msgs, weights)
        server.round = r + 1
        for res, msg in zip(results, msgs):
            d = res.diagnostics
            node_metrics.append(
                RoundNodeMetrics(
                    round=r,
                    node=d.node_id,
                    task_loss=d.task_loss,
                    geo_loss=d.geo_loss,
                    cka_to_consensus=d.cka_to_consensus,
                    p_k=weights[d.node_id],
                    uplink_bytes=msg.payload_bytes,
                )
            )
        embs = {res.diagnostics.node_id: res.diagnostics.anchor_embeddings for res in results}
        cm_cka, ret_idx, ret_con = _cross_modal_stats(nodes, embs)
        server_metrics.append(
            RoundServerMetrics(
                round=r,
                cross_modal_cka=cm_cka,
                retrieval_top1=ret_idx,
                retrieval_concept=ret_con,
                federation_geo_penalty=federation_geo_penalty([m.gram for m in msgs], kern, center=cfg.center_kernels),
                downlink_bytes_per_node=len(bcast_bytes),
            )
        )

    # Final evaluation under the aggregated global model (local adapters kept).
    final_bcast = unpack_broadcast(pack_broadcast(server.broadcast(cfg.rounds)))
    for node in nodes:
        node.adopt(final_bcast)
    final_embs = {n.node_id: n.embed_tokens(n.anchor_toks) for n in nodes}
    cm_cka, ret_idx, ret_con = _cross_modal_stats(nodes, final_embs)
    accuracy = {n.node_id: n.eval_accuracy() for n in nodes}
    mean_u = {n.node_id: 0.0 for n in nodes}
    for n in nodes:
        sub = n.lap_rng.subsample(n.dataset.size, cfg.lap_subsample)
        embs_n = n.embed_tokens([n.tokens[i] for i in sub])
        mean_u[n.node_id] = node_summary(embs_n, final_embs[n.node_id], cfg.u_min, n.node_id).mean_u
    final = FinalEval(
        accuracy_per_node=accuracy,
        accuracy_mean=float(np.mean(list(accuracy.values()))),
        cross_modal_cka=cm_cka,
        retrieval_top1=ret_idx,
        retrieval_concept=ret_con,
        weights=dict(weights.weights),
        mean_u_per_node=mean_u,
    )
    return ExperimentRecord(
        config=cfg,
        node_metrics=node_metrics,
        server_metrics=server_metrics,
        final=final,
        ledger=server.ledger,
        initial_cross_modal_cka=initial_cka,
        server=server,
    )
