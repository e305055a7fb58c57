"""Shared heavyweight checks used by both unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from fairmp import autodiff as ad
from fairmp.model import forward_model, init_params
from fairmp.propagation import PropagationContext
from oracles import rel_err


def model_loss_and_grads(graph, params, prop, sample=None):
    """Tape forward + backward; returns (loss value, grads by name)."""
    ctx = PropagationContext.build(graph, prop)
    probs, _fk, _fp, nodes, tape = forward_model(ctx, params, prop,
                                                 sample=sample)
    loss = ad.masked_nll(probs, graph.labels,
                         np.ones(graph.num_nodes, dtype=bool), "mean")
    ad.backward(tape, loss)
    grads = {name: ad.grad_or_zero(node) for name, node in nodes.items()}
    return float(loss.value), grads


def model_loss_value(graph, params, prop, sample=None) -> float:
    ctx = PropagationContext.build(graph, prop)
    probs, _fk, _fp, _nodes, _tape = forward_model(ctx, params, prop,
                                                   sample=sample)
    idx = np.arange(graph.num_nodes)
    picked = probs.value[idx, graph.labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def frozen_coupling_loss(graph, params, prop, frozen, sample=None) -> float:
    """Loss with the coupling matrices pinned to ``frozen`` (one dense
    matrix per layer, over the sampled index set when sampling): the
    finite-difference oracle for kernel_grad='detached'."""
    from fairmp.graph import NormalizedOperator
    from fairmp.propagation import GATParams, attention_coefficients

    ctx = PropagationContext.build(graph, prop)
    h = graph.features
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = np.maximum(h, 0.0)
    x_in = h
    f = x_in
    g = prop.gamma
    idx = None if sample is None else np.concatenate(sample)
    for k in range(prop.k):
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
        if prop.lambda_f and prop.variant != "vanilla":
            scale = 4.0 * g * prop.lambda_f * prop.alpha
            if idx is None:
                nxt = nxt + scale * (frozen[k] @ f)
            else:
                nxt[idx] += scale * (frozen[k] @ f[idx])
        f = nxt
    z = f - f.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    picked = probs[np.arange(graph.num_nodes), graph.labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def capture_couplings(graph, params, prop, sample=None):
    """Dense coupling matrices of a base forward pass, one per layer
    (implemented for the k = 2 case used everywhere in the suite)."""
    from fairmp import kernels

    if prop.k != 2:
        raise ValueError("coupling capture implemented for k = 2")
    ctx = PropagationContext.build(graph, prop)
    _probs, _fk, f_prev, _nodes, _tape = forward_model(ctx, params, prop,
                                                       sample=sample)
    h = graph.features
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = np.maximum(h, 0.0)
    kcfg = kernels.KernelConfig(prop.alpha)
    frozen = []
    for base in (h, f_prev.value):  # inputs to the two coupling builds
        if sample is None:
            builder = (kernels.build_coupling_full
                       if prop.coupling_variant == kernels.VARIANT_FULL
                       else kernels.build_coupling_simplified)
            frozen.append(builder(base, ctx.part, kcfg).values)
        else:
            frozen.append(kernels.build_coupling_sampled(
                base, sample[0], sample[1], kcfg,
                prop.coupling_variant).values)
    return frozen


def end_to_end_gradcheck(graph, prop, m_layers=2, seed=7, step=1e-6,
                         tol=1e-4, sample=None):
    """Compare analytic gradients of the full training loss against central
    finite differences for every parameter array.

    For kernel_grad='full' the oracle re-runs the whole forward; for
    'detached' the coupling matrices are frozen at the base point first,
    matching what that mode differentiates. Returns the worst relative
    error observed."""
    params = init_params(graph.num_features, 2, m_layers, 16,
                         np.random.default_rng(seed), prop.backbone)
    _, grads = model_loss_and_grads(graph, params, prop, sample)
    if prop.kernel_grad == "detached" and prop.lambda_f:
        frozen = capture_couplings(graph, params, prop, sample)

        def loss_fn():
            return frozen_coupling_loss(graph, params, prop, frozen, sample)
    else:
        def loss_fn():
            return model_loss_value(graph, params, prop, sample)
    worst = 0.0
    arrays = params.as_dict()
    for name, arr in arrays.items():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_fn()
            arr[idx] = orig - step
            down = loss_fn()
            arr[idx] = orig
            fd[idx] = (up - down) / (2 * step)
            it.iternext()
        err = rel_err(grads[name], fd)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch for {name}: {err:.2e}"
    return worst
