"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import numpy as np

from .core import PRESETS, QuantParams, soft_quantize, soft_quantize_backward
from .nn import Conv2d, Flatten, Linear, MaxPool2d, Network, Quantizer, ReLU, softmax_cross_entropy

H = 1e-4
ABS_FLOOR = 1e-8


def rel_error(analytic, numeric, floor: float = ABS_FLOOR) -> float:
    """Largest elementwise relative error; differences below ``floor`` count as zero."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - f)
    scale = np.maximum(np.abs(a), np.abs(f))
    err = np.where(diff <= floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(err.max()) if err.size else 0.0


def _central(fn, x0, h=H):
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.empty(x0.size)
    flat = x0.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return out.reshape(x0.shape)


def random_operator_case(rng):
    """A random (x, upstream, levels, params) configuration away from pathological scales."""
    levels = PRESETS[rng.choice(["binary", "ternary", "3bit±2", "3bit±4", "act1bit", "act2bit"])]
    x = rng.uniform(-3, 3, size=int(rng.integers(1, 9)))
    upstream = rng.normal(size=x.shape)
    gaps = rng.uniform(0.2, 1.5, size=levels.n)
    biases = np.cumsum(gaps) - gaps.sum() / 2 + rng.uniform(-0.3, 0.3)
    params = QuantParams(
        alpha=float(rng.uniform(0.2, 3.0)),
        beta=float(rng.uniform(0.3, 2.0)),
        biases=biases,
        temperature=float(rng.uniform(0.5, 20.0)),
    )
    return x, upstream, levels, params


def operator_case_errors(x, upstream, levels, params) -> dict:
    g = soft_quantize_backward(x, upstream, levels, params)

    def loss(xx=x, **kw):
        return float(np.sum(upstream * soft_quantize(xx, levels, params.replace(**kw))))

    num_x = _central(lambda v: loss(v), x)
    num_a = _central(lambda v: loss(alpha=float(v[0])), [params.alpha])[0]
    num_b = _central(lambda v: loss(beta=float(v[0])), [params.beta])[0]
    num_bias = _central(lambda v: loss(biases=v), params.biases)
    return {
        "d_input": rel_error(g.d_input, num_x),
        "d_alpha": rel_error(g.d_alpha, num_a),
        "d_beta": rel_error(g.d_beta, num_b),
        "d_biases": rel_error(g.d_biases, num_bias),
    }


def operator_gradcheck(trials: int = 1000, seed: int = 0) -> dict:
    """Max relative error per gradient block over ``trials`` random configurations."""
    rng = np.random.default_rng(seed)
    worst = {"d_input": 0.0, "d_alpha": 0.0, "d_beta": 0.0, "d_biases": 0.0}
    for _ in range(trials):
        for k, v in operator_case_errors(*random_operator_case(rng)).items():
            worst[k] = max(worst[k], v)
    return worst


def _loss_of(network, x, labels):
    logits, _ = network.forward(x, "soft")
    return softmax_cross_entropy(logits, labels)[0]


def network_gradients(network, x, labels, h=H):
    """Analytic and numeric gradients of the mean cross-entropy, keyed by name."""
    logits, tape = network.forward(x, "soft")
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = network.backward(tape, dlogits)
    pairs = {}
    for key, p in network.named_parameters().items():
        def f(v, p=p):
            saved = p.copy()
            p[...] = v
            try:
                return _loss_of(network, x, labels)
            finally:
                p[...] = saved
        pairs[key] = (grads.params[key], _central(f, p.copy(), h))
    for q in network.quantizers():
        g = grads.quantizers[q.name]
        for field_ in ("alpha", "beta", "biases"):
            base = q.params

            def f(v, q=q, base=base, field_=field_):
                q.params = base.replace(**{field_: v if field_ == "biases" else float(v[0])})
                try:
                    return _loss_of(network, x, labels)
                finally:
                    q.params = base
            start = base.biases.copy() if field_ == "biases" else np.array([getattr(base, field_)])
            pairs[f"{q.name}/{field_}"] = (np.atleast_1d(g[field_]), _central(f, start, h))
    return pairs


def mlp_case(seed: int = 0, temperature: float = 10.0):
    """2-layer MLP 8 -> 4 -> 2, batch 3, ternary weight quantizers on both layers."""
    rng = np.random.default_rng(seed)
    fc1, fc2 = Linear("fc1", 8, 4, rng), Linear("fc2", 4, 2, rng)
    fc1.bias[:] = rng.normal(0, 0.1, 4)
    fc2.bias[:] = rng.normal(0, 0.1, 2)
    net = Network([fc1, ReLU("relu1"), fc2], (8,))
    for layer in (fc1, fc2):
        w = layer.weight
        beta = 1.25 / np.abs(w).max()
        params = QuantParams(1 / beta, beta, [-0.3, 0.3], temperature)
        net.attach_weight_quantizer(layer.name, Quantizer("ternary", params, f"{layer.name}.wq"))
    x = rng.normal(size=(3, 8))
    labels = rng.integers(0, 2, size=3)
    return net, x, labels


def conv_case(seed: int = 0, temperature: float = 5.0):
    """Conv -> ReLU[act quant] -> pool -> flatten -> linear, exercising every layer kind."""
    rng = np.random.default_rng(seed)
    conv = Conv2d("conv1", 2, 3, 3, 1, 1, rng)
    fc = Linear("fc1", 3 * 2 * 2, 3, rng)
    net = Network([conv, ReLU("relu1"), MaxPool2d("pool1", 2), Flatten("flat"), fc], (2, 4, 4))
    wb = 1.25 / np.abs(conv.weight).max()
    net.attach_weight_quantizer("conv1", Quantizer("3bit±2", QuantParams(1 / wb, wb, [-1.5, -0.5, 0.5, 1.5],
                                                                          temperature), "conv1.wq"))
    net.attach_activation_quantizer("pool1", Quantizer("act2bit", QuantParams(0.5, 1.5, [0.5, 1.5, 2.5],
                                                                               temperature), "pool1.aq"))
    x = rng.normal(size=(2, 2, 4, 4))
    labels = rng.integers(0, 3, size=2)
    return net, x, labels


def network_gradcheck(seed: int = 0, case: str = "mlp") -> dict:
    """Max relative error per parameter tensor / quantizer scalar for an end-to-end net."""
    net, x, labels = (mlp_case if case == "mlp" else conv_case)(seed)
    return {k: rel_error(a, n) for k, (a, n) in network_gradients(net, x, labels).items()}
