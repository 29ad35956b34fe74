"""Shared oracles and gradient-check machinery for the test suite."""

import numpy as np

from binreplay import bitpack
from binreplay.bitpack import BinConvSpec, pack
from binreplay.graph import BitwidthConfig, Graph, backward, forward

FLOAT_CFG = BitwidthConfig.floating()


def naive_conv2d_pm1(x, w, stride, padding):
    """Nested-loop +-1 convolution oracle; padded positions count as -1."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                constant_values=-1)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout), dtype=np.int64)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                for o in range(cout):
                    out[b, i, j, o] = int(np.sum(patch * w[:, :, :, o]))
    return out


def naive_binary_conv_grads(x_pm1, w_pm1, g, stride, padding):
    """Loop oracle for binary-conv gradients (weight grad and input grad)."""
    n, h, wd, cin = x_pm1.shape
    kh, kw, _, cout = w_pm1.shape
    p = padding
    xp = np.pad(x_pm1, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-1.0)
    oh, ow = g.shape[1], g.shape[2]
    gw = np.zeros_like(w_pm1, dtype=np.float64)
    gx_p = np.zeros_like(xp, dtype=np.float64)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                for o in range(cout):
                    gw[:, :, :, o] += patch * g[b, i, j, o]
                    gx_p[b, i * stride : i * stride + kh, j * stride : j * stride + kw, :] += (
                        w_pm1[:, :, :, o] * g[b, i, j, o]
                    )
    gx = gx_p[:, p : p + h, p : p + wd, :] if p else gx_p
    return gw, gx


def graph_loss(g, x, direction):
    """Scalar probe loss sum(output * direction) in float mode."""
    out, _ = forward(g, x, FLOAT_CFG, mode="infer")
    return float(np.sum(out * direction))


def analytic_grads(g, x, direction):
    """(input_grad, {node: param grads}) from the engine's backward pass."""
    out, cache = forward(g, x, FLOAT_CFG, mode="train")
    pgrads, agrads = backward(g, cache, direction, FLOAT_CFG, return_act_grads=True)
    return agrads.get(-1), pgrads


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def rel_error(analytic, numeric):
    denom = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def make_layer_case(kind, rng):
    """Random single-layer graph for kind, plus an input avoiding the
    non-smooth points of prelu/binarize so finite differences are valid."""
    if kind in ("dense", "softmax_ce_head"):
        fin, fout, batch = (int(v) for v in rng.integers(2, 7, size=3))
        g = Graph((fin,))
        g.add(kind, trainable=True,
              params={"w": rng.normal(size=(fin, fout)), "b": rng.normal(size=fout)})
        x = rng.normal(size=(batch, fin))
    elif kind == "conv2d":
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        h = int(rng.integers(4, 7))
        spec = BinConvSpec(3, 3, 1, 1, cin, cout)
        g = Graph((h, h, cin))
        g.add(kind, trainable=True, spec=spec,
              params={"w": rng.normal(size=(3, 3, cin, cout)), "b": rng.normal(size=cout)})
        x = rng.normal(size=(2, h, h, cin))
    elif kind == "batchnorm":
        c = int(rng.integers(2, 6))
        g = Graph((4, 4, c))
        g.add(kind, trainable=True, params={
            "gamma": rng.normal(size=c), "beta": rng.normal(size=c),
            "running_mean": rng.normal(size=c), "running_var": rng.uniform(0.5, 2.0, size=c),
        })
        x = rng.normal(size=(2, 4, 4, c))
    elif kind == "prelu":
        c = int(rng.integers(2, 6))
        g = Graph((c,))
        g.add(kind, trainable=True, params={"alpha": rng.uniform(0.1, 0.5, size=c)})
        x = rng.normal(size=(3, c))
        x[np.abs(x) < 0.05] = 0.1  # stay clear of the kink
    elif kind == "global_avg_pool":
        c = int(rng.integers(2, 6))
        g = Graph((3, 5, c))
        g.add(kind)
        x = rng.normal(size=(2, 3, 5, c))
    elif kind == "add":
        c = int(rng.integers(2, 6))
        g = Graph((c,))
        n0 = g.add("prelu", trainable=True, params={"alpha": rng.uniform(0.1, 0.5, size=c)})
        g.add("add", inputs=(n0, -1))
        x = rng.normal(size=(3, c))
        x[np.abs(x) < 0.05] = 0.1
    elif kind == "concat":
        c = int(rng.integers(2, 6))
        g = Graph((c,))
        n0 = g.add("prelu", trainable=True, params={"alpha": rng.uniform(0.1, 0.5, size=c)})
        g.add("concat", inputs=(n0, -1))
        x = rng.normal(size=(3, c))
        x[np.abs(x) < 0.05] = 0.1
    else:
        raise ValueError(f"no finite-difference case for kind {kind!r}")
    shapes = infer_output_shape(g, x)
    direction = rng.normal(size=shapes)
    return g, x, direction


def infer_output_shape(g, x):
    out, _ = forward(g, x, FLOAT_CFG, mode="infer")
    return out.shape


def check_layer_gradients(kind, rng):
    """Max relative error of engine gradients vs central differences."""
    g, x, direction = make_layer_case(kind, rng)
    gin, pgrads = analytic_grads(g, x, direction)
    worst = rel_error(gin, numeric_grad(lambda v: graph_loss(g, v, direction), x))
    for idx, grads in pgrads.items():
        node = g.nodes[idx]
        for pname, ag in grads.items():
            base = node.params[pname]

            def f(v, idx=idx, pname=pname, base=base):
                node = g.nodes[idx]
                saved = node.params[pname]
                node.params[pname] = v
                try:
                    return graph_loss(g, x, direction)
                finally:
                    node.params[pname] = saved

            worst = max(worst, rel_error(ag, numeric_grad(f, base)))
    return worst


def random_binary_conv_case(rng):
    n = int(rng.integers(1, 3))
    h = int(rng.integers(4, 8))
    cin, cout = (int(v) for v in rng.integers(1, 5, size=2))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    spec = BinConvSpec(3, 3, stride, padding, cin, cout)
    x = rng.choice([-1.0, 1.0], size=(n, h, h, cin))
    latent = rng.uniform(-1, 1, size=(3, 3, cin, cout))
    g = Graph((h, h, cin))
    nid = g.add("binary_conv2d", trainable=True, spec=spec, params={"latent": latent})
    g.nodes[nid].weight_bits = bitpack.binarize(latent)
    return g, x, spec, latent
