"""Full model (MLP -> K fairness-aware layers -> softmax) and training loop.

Each epoch re-encodes the features through the MLP, draws fresh group
samples for the fairness correction, runs the tape forward, and applies one
Adam update to all learnable parameters (MLP weights/biases and, for the
attention backbone, the score vector). The returned parameters are the
best-validation snapshot: highest accuracy, ties broken by lower
demographic-parity gap.

The loss is the masked cross entropy averaged over labeled nodes; the
``sum`` reduction is also available and the choice is recorded in run
manifests.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from fairmp import autodiff as ad
from fairmp import kernels, metrics
from fairmp.errors import DataError
from fairmp.graph import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, AttributedGraph,
                          NormalizedOperator, partition_by_sensitive)
from fairmp.propagation import (GATParams, PropagationConfig,
                                PropagationContext, attention_coefficients,
                                propagate_k)

LOSS_VARIANTS = ("gmmd", "mmd_reg_baseline", "vanilla")
ABLATIONS = ("none", "no_smooth", "no_fair", "no_both", "no_sample")

# cap on the per-epoch similarity trace: groups larger than this are
# deterministically subsampled so the trace stays O(cap^2) per epoch
SIM_TRACE_CAP = 1000


@dataclass
class ModelParams:
    """MLP weights/biases (hidden width 16) plus the optional attention
    vector. The final linear layer maps to the class count."""

    weights: list
    biases: list
    gat_b: np.ndarray | None = None
    classes: int = 2

    def as_dict(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        if self.gat_b is not None:
            out["gat_b"] = self.gat_b
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def init_params(num_features: int, classes: int = 2, m_layers: int = 2,
                hidden: int = 16, rng: np.random.Generator | None = None,
                backbone: str = "gcn") -> ModelParams:
    """Uniform Glorot initialization; biases start at zero."""
    if m_layers < 1:
        raise DataError("the MLP needs at least one layer")
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = [num_features] + [hidden] * (m_layers - 1) + [classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    gat_b = rng.uniform(-0.5, 0.5, size=2 * classes) if backbone == "gat" else None
    return ModelParams(weights, biases, gat_b, classes)


@dataclass(frozen=True)
class TrainConfig:
    prop: PropagationConfig = field(default_factory=PropagationConfig)
    lr: float = 0.003
    weight_decay: float = 1e-5
    epochs: int = 200
    seed: int = 0
    m_layers: int = 2
    hidden: int = 16
    loss_variant: str = "gmmd"
    ablation: str = "none"

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if not self.lr > 0:
            raise DataError("learning rate must be positive")
        if self.weight_decay < 0:
            raise DataError("weight decay must be >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise DataError(f"unknown loss variant: {self.loss_variant!r}")
        if self.ablation not in ABLATIONS:
            raise DataError(f"unknown ablation: {self.ablation!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val: metrics.EvalReport
    test: metrics.EvalReport
    sim: float


def resolve_ablation(cfg: TrainConfig) -> PropagationConfig:
    """Effective propagation for the configured ablation/loss variant."""
    prop = cfg.prop
    if cfg.loss_variant in ("vanilla", "mmd_reg_baseline"):
        prop = replace(prop, variant="vanilla")
    if cfg.ablation == "no_smooth":
        prop = replace(prop, smooth_identity=True)
    elif cfg.ablation == "no_fair":
        prop = replace(prop, lambda_f=0.0)
    elif cfg.ablation == "no_both":
        prop = replace(prop, k=0)
    elif cfg.ablation == "no_sample":
        prop = replace(prop, sample_size=0)
    return prop


def cross_entropy_masked(probs: np.ndarray, labels: np.ndarray,
                         mask: np.ndarray, reduction: str = "mean") -> float:
    """Plain (non-tape) masked negative log likelihood; probabilities are
    clamped at 1e-12 before the log."""
    if reduction not in ("mean", "sum"):
        raise DataError(f"unknown reduction: {reduction!r}")
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        raise DataError("loss mask selects no nodes")
    picked = np.asarray(probs, dtype=np.float64)[idx,
                                                 np.asarray(labels)[idx]]
    total = -np.log(np.maximum(picked, 1e-12)).sum()
    return float(total / idx.size) if reduction == "mean" else float(total)


def _mlp_nodes(tape: ad.Tape, params: ModelParams):
    nodes = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        nodes[f"w{i}"] = tape.leaf(w, name=f"w{i}")
        nodes[f"b{i}"] = tape.leaf(b, name=f"b{i}")
    if params.gat_b is not None:
        nodes["gat_b"] = tape.leaf(params.gat_b, name="gat_b")
    return nodes


def _mlp_forward(tape: ad.Tape, x: ad.Node, nodes: dict,
                 n_layers: int) -> ad.Node:
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, nodes[f"w{i}"]), nodes[f"b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def forward_model(ctx: PropagationContext, params: ModelParams,
                  prop: PropagationConfig, tape: ad.Tape | None = None,
                  sample: tuple | None = None):
    """Tape forward pass. Returns (probs, f_last, f_prev, param_nodes, tape).

    ``sample`` is a pair of index arrays (one per group) enabling the
    sampled fairness correction; None applies the full coupling.
    """
    tape = tape if tape is not None else ad.Tape()
    nodes = _mlp_nodes(tape, params)
    x = tape.constant(ctx.graph.features, name="x")
    x_in = _mlp_forward(tape, x, nodes, len(params.weights))
    att = nodes.get("gat_b")
    f_k, f_prev = propagate_k(ctx, prop, x_in, att, sample)
    probs = ad.row_softmax(f_k)
    return probs, f_k, f_prev, nodes, tape


def plain_layers(graph: AttributedGraph, params: ModelParams,
                 prop: PropagationConfig) -> list:
    """Non-tape whole-graph forward; returns [F(0), ..., F(K)] pre-softmax.

    Uses the blocked coupling product, so it stays usable on graphs where
    a dense N x N coupling would not fit in memory.
    """
    ctx = PropagationContext.build(graph, prop)
    h = graph.features
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = np.maximum(h, 0.0)
    x_in = h
    seq = [x_in]
    f = x_in
    g = prop.gamma
    for _ in range(prop.k):
        if prop.smooth_identity:
            agg = f
        elif prop.backbone == "gcn":
            agg = ctx.operator.apply(f)
        elif prop.backbone == "gin":
            agg = ctx.gin_operator.apply(f)
        else:
            coeff = attention_coefficients(
                f, GATParams(params.gat_b), ctx.attention_structure)
            indptr, cols, _ = ctx.attention_structure
            agg = NormalizedOperator(graph.num_nodes, indptr, cols,
                                     np.ascontiguousarray(coeff)).apply(f)
        nxt = (1.0 - g) * agg + g * x_in
        if prop.variant != "vanilla" and prop.lambda_f:
            term = kernels.coupling_matvec(f, ctx.group1, ctx.part.n0,
                                           ctx.part.n1, prop.alpha,
                                           prop.coupling_variant)
            nxt = nxt + (4.0 * g * prop.lambda_f * prop.alpha) * term
        f = nxt
        seq.append(f)
    return seq


def plain_forward(graph: AttributedGraph, params: ModelParams,
                  prop: PropagationConfig) -> np.ndarray:
    """Non-tape whole-graph forward returning the pre-softmax F(K)."""
    return plain_layers(graph, params, prop)[-1]


def _softmax_rows(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(graph: AttributedGraph, params: ModelParams,
            prop: PropagationConfig) -> np.ndarray:
    """Deterministic whole-graph predicted probabilities (full coupling)."""
    return _softmax_rows(plain_forward(graph, params, prop))


def mmd_reg_baseline_loss(graph: AttributedGraph, params: ModelParams,
                          cfg: TrainConfig) -> float:
    """Cross entropy plus lambda_f times the group discrepancy of the
    final representation, under vanilla propagation."""
    prop = replace(cfg.prop, variant="vanilla")
    part = partition_by_sensitive(graph)
    f_k = plain_forward(graph, params, prop)
    ce = cross_entropy_masked(_softmax_rows(f_k), graph.labels,
                              graph.split_mask(SPLIT_TRAIN))
    penalty = kernels.mmd(f_k, part, kernels.KernelConfig(cfg.prop.alpha))
    return ce + cfg.prop.lambda_f * penalty


def _draw_sample(part, n_s: int, seed: int, epoch: int):
    rng = np.random.default_rng([seed, 1, epoch])
    s0 = np.sort(rng.choice(part.idx0, size=n_s, replace=False))
    s1 = np.sort(rng.choice(part.idx1, size=n_s, replace=False))
    return s0, s1


def _sim_partition(part, seed: int):
    """Groups for the per-epoch similarity trace, capped for tractability."""
    if part.n0 <= SIM_TRACE_CAP and part.n1 <= SIM_TRACE_CAP:
        return part
    rng = np.random.default_rng([seed, 2])
    from fairmp.graph import GroupPartition
    idx0 = (np.sort(rng.choice(part.idx0, SIM_TRACE_CAP, replace=False))
            if part.n0 > SIM_TRACE_CAP else part.idx0)
    idx1 = (np.sort(rng.choice(part.idx1, SIM_TRACE_CAP, replace=False))
            if part.n1 > SIM_TRACE_CAP else part.idx1)
    return GroupPartition(idx0, idx1)


def save_params(params: ModelParams, prop: PropagationConfig,
                path) -> None:
    """Serialize parameters plus the propagation settings they were
    trained with."""
    import json

    payload = {f"w{i}": w for i, w in enumerate(params.weights)}
    payload.update({f"b{i}": b for i, b in enumerate(params.biases)})
    if params.gat_b is not None:
        payload["gat_b"] = params.gat_b
    prop_dict = {
        "variant": prop.variant, "backbone": prop.backbone, "k": prop.k,
        "lambda_s": prop.lambda_s, "lambda_f": prop.lambda_f,
        "alpha": prop.alpha, "kernel_grad": prop.kernel_grad,
        "gin_epsilon": prop.gin_epsilon, "sample_size": prop.sample_size,
        "smooth_identity": prop.smooth_identity,
    }
    payload["meta"] = np.frombuffer(
        json.dumps({"n_layers": len(params.weights),
                    "classes": params.classes,
                    "prop": prop_dict}).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_params(path):
    """Inverse of :func:`save_params`; returns (params, prop_config)."""
    import json

    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"].tobytes()).decode())
        weights = [blob[f"w{i}"] for i in range(meta["n_layers"])]
        biases = [blob[f"b{i}"] for i in range(meta["n_layers"])]
        gat_b = blob["gat_b"] if "gat_b" in blob.files else None
    params = ModelParams(weights, biases, gat_b, meta["classes"])
    return params, PropagationConfig(**meta["prop"])


def train(graph: AttributedGraph, cfg: TrainConfig):
    """Run the training loop; returns (best_params, records).

    Deterministic given (graph, cfg): parameter init, per-epoch sampling,
    and all arithmetic derive from cfg.seed.
    """
    prop = resolve_ablation(cfg)
    ctx = PropagationContext.build(graph, prop)
    part = ctx.part
    n_s = prop.sample_size
    sampling = n_s > 0 and prop.variant != "vanilla" and prop.lambda_f > 0
    if sampling and n_s > min(part.n0, part.n1):
        raise DataError("sample size exceeds the smaller sensitive group")
    if not graph.split_mask(SPLIT_TRAIN).any():
        raise DataError("no training nodes in the split")

    params = init_params(graph.num_features, 2, cfg.m_layers, cfg.hidden,
                         np.random.default_rng([cfg.seed, 0]), prop.backbone)
    state = ad.AdamState()
    kcfg = kernels.KernelConfig(prop.alpha)
    sim_part = _sim_partition(part, cfg.seed)
    y = graph.labels
    s = graph.sensitive
    train_mask = graph.split_mask(SPLIT_TRAIN)
    val_mask = graph.split_mask(SPLIT_VAL)
    test_mask = graph.split_mask(SPLIT_TEST)
    if not val_mask.any():
        val_mask = train_mask
    if not test_mask.any():
        test_mask = val_mask

    records: list[EpochRecord] = []
    best = None  # maximized (val accuracy, -val dp)
    best_params = params.copy()
    for epoch in range(cfg.epochs):
        sample = _draw_sample(part, n_s, cfg.seed, epoch) if sampling else None
        probs, f_k, f_prev, nodes, tape = forward_model(
            ctx, params, prop, sample=sample)
        loss = ad.masked_nll(probs, y, train_mask, "mean")
        if cfg.loss_variant == "mmd_reg_baseline":
            pen = ad.mmd_penalty(f_k, part, kcfg)
            loss = ad.add(loss, ad.scale(pen, cfg.prop.lambda_f))
        ad.backward(tape, loss)
        grads = {name: ad.grad_or_zero(node) for name, node in nodes.items()}
        ad.adam_step(params.as_dict(), grads, state, cfg.lr,
                     cfg.weight_decay)

        val = metrics.evaluate(probs.value, y, s, val_mask, lenient=True)
        test = metrics.evaluate(probs.value, y, s, test_mask, lenient=True)
        sim = kernels.inter_group_similarity(f_prev.value, sim_part, kcfg)
        records.append(EpochRecord(epoch, float(loss.value), val, test, sim))
        dp_key = -val.delta_dp if np.isfinite(val.delta_dp) else -np.inf
        key = (val.accuracy, dp_key)
        if best is None or key > best:
            best = key
            best_params = params.copy()
    return best_params, records
