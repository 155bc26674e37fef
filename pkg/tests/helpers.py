"""Shared oracles for the test suite: finite differences and a naive convolution."""

import numpy as np

def numeric_grad(f, x, step=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def naive_conv(x, w, b, padding):
    """Direct six-loop cross-correlation, stride 1."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, f, ho, wo))
    for s in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = float(b[o])
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[s, ci, i + di, j + dj] * w[o, ci, di, dj]
                    out[s, o, i, j] = acc
    return out


def away_from_zero(x, gap=1e-2):
    """Push entries off the ReLU kink so finite differences stay on one side."""
    return np.where(x >= 0, np.maximum(x, gap), np.minimum(x, -gap))


def distinct_windows(x, gap=1e-2):
    """Spread values so no 2x2 pooling window holds two entries within ``gap``."""
    flat = x.reshape(-1)
    order = np.argsort(flat, kind="stable")
    spread = np.empty_like(flat)
    spread[order] = np.arange(flat.size) * gap
    return (spread - spread.mean()).reshape(x.shape)


def layer_grad_errors(layer, x, step=1e-5, rng=None):
    """Norm-relative errors of a layer's input and parameter gradients.

    The scalar probed is ``sum(forward(x) * r)`` for a fixed random ``r``, so
    ``backward(r)`` must equal its gradient.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in layer.params.items():
        layer.params[name] = p.astype(np.float64)
    out = layer.forward(x)
    r = rng.standard_normal(out.shape)
    dx = layer.backward(r)
    analytic = {"x": dx.copy()}
    analytic.update({n: g.copy() for n, g in layer.grads.items()})

    def probe():
        return float((layer.forward(x) * r).sum())

    errors = {"x": rel_error(analytic["x"], numeric_grad(probe, x, step))}
    for name, p in layer.params.items():
        errors[name] = rel_error(analytic[name], numeric_grad(probe, p, step))
    return errors


def random_layer_case(kind, rng):
    """A (layer, input, step) triple for gradient checking with random dims."""
    from antidote.attention import PruneMask
    from antidote.layers import Conv2d, Dense, DynamicPrune, GlobalAvgPool, MaxPool2x2, ReLU

    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    x = rng.normal(0, 0.1, (n, c, h, w))
    step = 1e-5
    if kind == "conv":
        k = int(rng.choice([1, 3]))
        layer = Conv2d(c, int(rng.integers(1, 4)), k, rng=rng)
        layer.params["bias"] = rng.normal(0, 0.1, layer.params["bias"].shape)
    elif kind == "relu":
        layer, x = ReLU(), away_from_zero(x)
    elif kind == "maxpool":
        layer, x = MaxPool2x2(), distinct_windows(x)
    elif kind == "gap":
        layer = GlobalAvgPool()
    elif kind == "dense":
        layer = Dense(c * h * w, int(rng.integers(1, 6)), rng=rng)
        layer.params["bias"] = rng.normal(0, 0.1, layer.params["bias"].shape)
    elif kind == "dynprune":
        layer = DynamicPrune()
        layer.fixed_mask = PruneMask(rng.random((n, c)) < 0.6, rng.random((n, h, w)) < 0.6)
        step = 1e-3
    else:
        raise ValueError(kind)
    return layer, x, step


def softmax_xent_grad_error(rng):
    from antidote.layers import SoftmaxCrossEntropy

    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 11))
    logits = rng.normal(0, 0.1, (n, k))
    labels = rng.integers(0, k, n)
    loss = SoftmaxCrossEntropy()
    loss.forward(logits, labels)
    analytic = loss.backward()
    numeric = numeric_grad(lambda: loss.forward(logits, labels), logits, 1e-5)
    return rel_error(analytic, numeric)


def model_grad_errors(seed, n=2, size=8, params=3):
    """End-to-end check on a small VGG-style model in float64.

    Checks the input gradient and ``params`` randomly chosen parameter tensors.
    """
    from antidote.model import build_model, vgg_spec

    rng = np.random.default_rng(seed)
    spec = vgg_spec("grad-toy", [[3, 3], [4]], (2, size, size), 3)
    model = build_model(spec, seed=seed)
    model.layers[0].need_dx = True
    for layer in model.layers:
        for name, p in layer.params.items():
            layer.params[name] = p.astype(np.float64)
            if name == "bias":
                layer.params[name] = rng.normal(0, 0.1, p.shape)
    x = rng.normal(0, 1.0, (n, 2, size, size))
    y = rng.integers(0, 3, n)

    def loss():
        return model.loss.forward(model.forward(x), y)

    loss()
    dx = model.backward(model.loss.backward())
    named = [(f"{nm}.{pn}", layer, pn) for nm, layer in zip(model.names, model.layers)
             for pn in sorted(layer.params)]
    picks = rng.choice(len(named), size=min(params, len(named)), replace=False)
    errors = {"x": rel_error(dx, numeric_grad(loss, x, 1e-5))}
    grads = {named[i][0]: named[i][1].grads[named[i][2]].copy() for i in picks}
    for i in picks:
        label, layer, pn = named[i]
        errors[label] = rel_error(grads[label], numeric_grad(loss, layer.params[pn], 1e-5))
    return errors
