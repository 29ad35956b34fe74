"""Layer graph with quantized forward and backward passes.

Forward precision is controlled by q_f (binary layers are always 1-bit),
backward precision by q_b, split between binary layers (q_b_bin) and
everything else (q_b_nonbin).  A bitwidth of None means float arithmetic.

Gradients are quantized to the owning layer's backward bitwidth immediately
after they are computed, with a dynamic per-tensor symmetric scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bitpack
from .bitpack import BinConvSpec, BitTensor
from .quant import QuantParams, calibrate_range, dequantize, quant_params, quantize, qmatmul

FORWARD_BITS = (8, 16, 32)
BACKWARD_NONBIN_BITS = (8, 16, 32)
BACKWARD_BIN_BITS = (1, 4, 8, 16, 32)

LAYER_KINDS = (
    "dense",
    "conv2d",
    "binary_dense",
    "binary_conv2d",
    "binarize",
    "batchnorm",
    "add",
    "concat",
    "prelu",
    "global_avg_pool",
    "softmax_ce_head",
)
BINARY_KINDS = ("binary_dense", "binary_conv2d")
# layers whose outputs get snapped to a calibrated q_f grid in quantized mode
SNAP_KINDS = ("dense", "conv2d", "softmax_ce_head", "batchnorm", "add", "concat", "prelu", "global_avg_pool")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BitwidthConfig:
    """Bitwidths for forward and backward computation; None selects float."""

    q_f: int | None = 8
    q_b_nonbin: int | None = 16
    q_b_bin: int | None = 4

    def __post_init__(self):
        if self.q_f is not None and self.q_f not in FORWARD_BITS:
            raise GraphError(f"q_f must be in {FORWARD_BITS} or float, got {self.q_f}")
        if self.q_b_nonbin is not None and self.q_b_nonbin not in BACKWARD_NONBIN_BITS:
            raise GraphError(f"q_b_nonbin must be in {BACKWARD_NONBIN_BITS} or float, got {self.q_b_nonbin}")
        if self.q_b_bin is not None and self.q_b_bin not in BACKWARD_BIN_BITS:
            raise GraphError(f"q_b_bin must be in {BACKWARD_BIN_BITS} or float, got {self.q_b_bin}")

    @classmethod
    def floating(cls) -> "BitwidthConfig":
        return cls(q_f=None, q_b_nonbin=None, q_b_bin=None)

    @staticmethod
    def parse_bits(s: str) -> int | None:
        if s == "float":
            return None
        return int(s)

    @classmethod
    def from_strings(cls, q_f: str, q_b_nonbin: str, q_b_bin: str) -> "BitwidthConfig":
        return cls(
            q_f=cls.parse_bits(q_f),
            q_b_nonbin=cls.parse_bits(q_b_nonbin),
            q_b_bin=cls.parse_bits(q_b_bin),
        )


@dataclass
class LayerNode:
    kind: str
    name: str
    inputs: list[int]  # producer node ids; -1 refers to the graph input
    trainable: bool = False
    params: dict = field(default_factory=dict)  # name -> float ndarray
    attrs: dict = field(default_factory=dict)  # conv spec, eps, clip threshold ...
    out_qparams: QuantParams | None = None
    weight_bits: BitTensor | None = None  # effective weights of binary layers
    param_scales: dict = field(default_factory=dict)  # fixed-point grid per parameter

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")


class Graph:
    """Ordered DAG of layers; node inputs always reference earlier nodes."""

    def __init__(self, input_shape: tuple[int, ...]):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.nodes: list[LayerNode] = []
        self.replay_level: int | None = None
        self.input_qparams: QuantParams | None = None

    def add(self, kind: str, inputs=None, name: str | None = None, trainable: bool = False, **attrs) -> int:
        idx = len(self.nodes)
        if inputs is None:  # chain onto the previous node by default
            inputs = [idx - 1]
        inputs = [inputs] if isinstance(inputs, int) else list(inputs)
        for i in inputs:
            if not -1 <= i < idx:
                raise GraphError(f"node {idx}: input id {i} is not an earlier node")
        params = attrs.pop("params", {})
        node = LayerNode(kind=kind, name=name or f"{kind}_{idx}", inputs=inputs,
                         trainable=trainable, params=params, attrs=attrs)
        self.nodes.append(node)
        return idx

    @property
    def output_id(self) -> int:
        if not self.nodes:
            raise GraphError("empty graph")
        return len(self.nodes) - 1


# ---------------------------------------------------------------------------
# quantization helpers


def fake_quant(x: np.ndarray, bits: int | None) -> np.ndarray:
    """Quantize-dequantize with a dynamic symmetric per-tensor scale."""
    if bits is None:
        return x
    m = float(np.max(np.abs(x), initial=0.0))
    if m == 0.0:
        return x
    scale = 2.0 * m / (2**bits - 1)
    q = np.clip(np.rint(x / scale), -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    return q * scale


def snap_to_fixed_grid(x: np.ndarray, scale: float, bits: int, symmetric: bool = False) -> np.ndarray:
    hi = 2 ** (bits - 1) - 1
    lo = -hi if symmetric else -(2 ** (bits - 1))
    q = np.clip(np.rint(x / scale), lo, hi)
    return q * scale


def f32_precision(x: np.ndarray) -> np.ndarray:
    """Round to float32 precision; parameters persist as f32 in checkpoints."""
    return x.astype(np.float32).astype(np.float64)


def param_grid_scale(p: np.ndarray, bits: int) -> float:
    """Fixed grid for a trainable parameter, with 2x headroom for growth."""
    m = max(2.0 * float(np.max(np.abs(p), initial=0.0)), 1e-3)
    return 2.0 * m / (2**bits - 1)


def latent_grid_scale(bits: int) -> float:
    """Grid for binary-layer latent weights, which live in [-1, 1]."""
    return 2.0 / (2**bits - 1)


def _snap_activation(y: np.ndarray, p: QuantParams | None, bits: int | None) -> np.ndarray:
    if bits is None:
        return y
    if p is None:
        lo, hi = calibrate_range([y])
        p = quant_params(lo, hi, bits, signed=False)
    return dequantize(quantize(y, p))


def _node_in_qparams(graph: Graph, node: LayerNode, x: np.ndarray, bits: int) -> QuantParams:
    src = node.inputs[0]
    p = graph.input_qparams if src == -1 else graph.nodes[src].out_qparams
    if p is not None and p.bits == bits:
        return p
    lo, hi = calibrate_range([x])
    return quant_params(lo, hi, bits, signed=False)


def _int_gemm(xq, wq):
    """Integer gemm on QuantizedTensors with 64-bit accumulation.

    Used when operand bitwidths exceed what 32-bit accumulators can take;
    for 8-bit operands qmatmul (32-bit accumulator contract) is used instead.
    """
    acc = (xq.data - xq.params.zero_point) @ (wq.data - wq.params.zero_point)
    return acc * (xq.params.scale * wq.params.scale)


def _quantized_gemm(x2d: np.ndarray, in_params: QuantParams, w2d: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = calibrate_range([w2d])
    wp = quant_params(lo, hi, bits, signed=True)
    xq = quantize(x2d, in_params)
    wq = quantize(w2d, wp)
    if bits == 8:
        return dequantize(qmatmul(xq, wq))
    return _int_gemm(xq, wq)


# ---------------------------------------------------------------------------
# im2col / col2im for float convolutions


def _float_patches(x: np.ndarray, spec: BinConvSpec) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, oh, ow, spec.kernel_h, spec.kernel_w, c), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            cols[:, :, :, i, j, :] = x[:, i : i + oh * s : s, j : j + ow * s : s, :]
    return cols.reshape(n * oh * ow, spec.kernel_h * spec.kernel_w * c)


def _col2im(gcols: np.ndarray, spec: BinConvSpec, n: int, h: int, w: int) -> np.ndarray:
    oh, ow = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    c = spec.in_channels
    g6 = gcols.reshape(n, oh, ow, spec.kernel_h, spec.kernel_w, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out[:, i : i + oh * s : s, j : j + ow * s : s, :] += g6[:, :, :, i, j, :]
    return out[:, p : p + h, p : p + w, :]


# ---------------------------------------------------------------------------
# standalone ops


def ste_backward(g_out: np.ndarray, cached_input: np.ndarray, clip_threshold: float = 1.0) -> np.ndarray:
    """Straight-through gradient of sign: identity inside the clip region."""
    if g_out.shape != cached_input.shape:
        raise GraphError(f"shape mismatch: {g_out.shape} vs {cached_input.shape}")
    return g_out * (np.abs(cached_input) <= clip_threshold)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Inference-style normalization with frozen statistics."""
    if x.shape[-1] != gamma.shape[0]:
        raise GraphError(f"channel mismatch: input {x.shape[-1]} vs gamma {gamma.shape[0]}")
    inv_std = 1.0 / np.sqrt(running_var + eps)
    x_hat = (x - running_mean) * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std)


def batchnorm_backward(g, gamma, cache):
    x_hat, inv_std = cache
    axes = tuple(range(g.ndim - 1))
    g_gamma = np.sum(g * x_hat, axis=axes)
    g_beta = np.sum(g, axis=axes)
    g_in = g * gamma * inv_std
    return g_in, g_gamma, g_beta


def softmax_ce(logits: np.ndarray, one_hot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    one_hot = np.atleast_2d(one_hot)
    if logits.shape != one_hot.shape:
        raise GraphError(f"shape mismatch: logits {logits.shape} vs labels {one_hot.shape}")
    rows = one_hot.sum(axis=1)
    if not (np.all(rows == 1) and np.all(np.isin(one_hot, (0, 1)))):
        raise GraphError("labels must be one-hot")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    loss = float(-np.sum(one_hot * (z - np.log(ez.sum(axis=1, keepdims=True)))) / b)
    grad = (p - one_hot) / b
    return loss, grad


# ---------------------------------------------------------------------------
# forward


def _forward_node(graph, idx, node, ins, config, want_cache):
    bits = config.q_f
    kind = node.kind
    x = ins[0] if ins else None
    cache = None

    if kind in ("dense", "softmax_ce_head"):
        w, b = node.params["w"], node.params["b"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise GraphError(f"node {idx} ({node.name}): input shape {x.shape} vs weight {w.shape}")
        if bits is None:
            y = x @ w + b
        else:
            in_p = _node_in_qparams(graph, node, x, bits)
            y = _quantized_gemm(x, in_p, w, bits) + b
        cache = x
    elif kind == "conv2d":
        spec: BinConvSpec = node.attrs["spec"]
        w, b = node.params["w"], node.params["b"]
        if x.ndim != 4 or x.shape[3] != spec.in_channels:
            raise GraphError(f"node {idx} ({node.name}): input shape {x.shape} vs spec {spec}")
        n, h, wd, _ = x.shape
        oh, ow = spec.out_hw(h, wd)
        patches = _float_patches(x, spec)
        wmat = w.reshape(-1, spec.out_channels)
        if bits is None:
            y = patches @ wmat
        else:
            in_p = _node_in_qparams(graph, node, x, bits)
            y = _quantized_gemm(patches, in_p, wmat, bits)
        y = y.reshape(n, oh, ow, spec.out_channels) + b
        cache = x
    elif kind == "binary_dense":
        xb = bitpack.binarize(x) if not isinstance(x, BitTensor) else x
        y = bitpack.bin_matmul(xb, node.weight_bits).astype(np.float64)
        cache = xb
    elif kind == "binary_conv2d":
        spec = node.attrs["spec"]
        xb = bitpack.binarize(x) if not isinstance(x, BitTensor) else x
        if len(xb.shape) != 4 or xb.shape[3] != spec.in_channels:
            raise GraphError(f"node {idx} ({node.name}): input shape {xb.shape} vs spec {spec}")
        y = bitpack.bin_conv2d(xb, node.weight_bits, spec).astype(np.float64)
        cache = xb
    elif kind == "binarize":
        y = np.where(x >= 0, 1.0, -1.0)
        cache = x
    elif kind == "batchnorm":
        y, bn_cache = batchnorm_forward(
            x, node.params["gamma"], node.params["beta"],
            node.params["running_mean"], node.params["running_var"],
            node.attrs.get("eps", 1e-5),
        )
        cache = bn_cache
    elif kind == "add":
        a, b2 = ins
        if a.shape != b2.shape:
            raise GraphError(f"node {idx} ({node.name}): add shapes {a.shape} vs {b2.shape}")
        y = a + b2
    elif kind == "concat":
        widths = [t.shape[-1] for t in ins]
        y = np.concatenate(ins, axis=-1)
        cache = widths
    elif kind == "prelu":
        alpha = node.params["alpha"]
        if x.shape[-1] != alpha.shape[0]:
            raise GraphError(f"node {idx} ({node.name}): channel mismatch {x.shape[-1]} vs {alpha.shape[0]}")
        y = np.where(x >= 0, x, alpha * x)
        cache = x
    elif kind == "global_avg_pool":
        if x.ndim != 4:
            raise GraphError(f"node {idx} ({node.name}): expects NHWC input, got shape {x.shape}")
        y = x.mean(axis=(1, 2))
        cache = x.shape
    else:  # pragma: no cover
        raise GraphError(f"node {idx}: unhandled kind {kind}")

    # binary outputs are exact integers / signs; everything else is snapped
    # to the layer's forward grid in quantized mode
    if kind in SNAP_KINDS:
        y = _snap_activation(y, node.out_qparams, bits)
    return y, (cache if want_cache else None)


def forward(graph: Graph, x, config: BitwidthConfig, mode: str = "infer",
            from_level: int | None = None, stop_level: int | None = None, collect=None):
    """Run the graph; returns (output, cache).

    In train mode the cache holds per-node inputs needed by backward, for
    nodes above from_level only.  from_level feeds x in as the output of
    that node (used to resume from stored latent activations).
    """
    if mode not in ("train", "infer"):
        raise GraphError(f"mode must be train or infer, got {mode!r}")
    acts: dict[int, np.ndarray] = {}
    start = 0
    if from_level is None:
        if isinstance(x, BitTensor):
            x = x.unpack().astype(np.float64)
        x = np.asarray(x, dtype=np.float64)
        if config.q_f is not None and graph.input_qparams is not None:
            x = dequantize(quantize(x, graph.input_qparams))
        acts[-1] = x
    else:
        if isinstance(x, BitTensor):
            x = x.unpack().astype(np.float64)
        acts[from_level] = np.asarray(x, dtype=np.float64)
        start = from_level + 1
    cache: dict[int, object] = {}
    want_cache = mode == "train"
    for idx in range(start, len(graph.nodes)):
        node = graph.nodes[idx]
        ins = [acts[i] for i in node.inputs]
        y, c = _forward_node(graph, idx, node, ins, config, want_cache)
        acts[idx] = y
        if want_cache and c is not None:
            cache[idx] = c
        if collect is not None:
            collect[idx] = y
        if stop_level is not None and idx == stop_level:
            return acts[stop_level], cache
    return acts[graph.output_id], cache


# ---------------------------------------------------------------------------
# backward


def _node_backward_bits(node: LayerNode, config: BitwidthConfig) -> int | None:
    if node.kind in BINARY_KINDS or node.kind == "binarize":
        if config.q_b_bin == 1:
            # binary weights frozen at 1 bit; any propagated gradient keeps
            # the non-binary backward precision
            return config.q_b_nonbin
        return config.q_b_bin
    return config.q_b_nonbin


def _backward_node(graph, idx, node, g, cache_entry, config, need_input_grad):
    """Returns (input grads aligned with node.inputs, param grads)."""
    kind = node.kind
    pgrads = {}
    gins = [None] * len(node.inputs)

    if kind in ("dense", "softmax_ce_head"):
        x = cache_entry
        w = node.params["w"]
        if node.trainable:
            pgrads["w"] = x.T @ g
            pgrads["b"] = g.sum(axis=0)
        if need_input_grad[0]:
            gins[0] = g @ w.T
    elif kind == "conv2d":
        spec = node.attrs["spec"]
        x = cache_entry
        n, h, wd, _ = x.shape
        gmat = g.reshape(-1, spec.out_channels)
        if node.trainable:
            patches = _float_patches(x, spec)
            pgrads["w"] = (patches.T @ gmat).reshape(node.params["w"].shape)
            pgrads["b"] = gmat.sum(axis=0)
        if need_input_grad[0]:
            wmat = node.params["w"].reshape(-1, spec.out_channels)
            gins[0] = _col2im(gmat @ wmat.T, spec, n, h, wd)
    elif kind == "binary_dense":
        xb: BitTensor = cache_entry
        wpm = node.weight_bits.unpack().astype(np.float64)
        if node.trainable and config.q_b_bin != 1:
            pgrads["latent"] = xb.unpack().astype(np.float64).T @ g
        if need_input_grad[0]:
            gins[0] = g @ wpm.T
    elif kind == "binary_conv2d":
        spec = node.attrs["spec"]
        xb = cache_entry
        n, h, wd, _ = xb.shape
        gmat = g.reshape(-1, spec.out_channels)
        if node.trainable and config.q_b_bin != 1:
            # padded positions contribute -1, matching the forward kernel
            xpm = xb.unpack().astype(np.float64)
            oh, ow = spec.out_hw(h, wd)
            patches = _padded_pm1_patches(xpm, spec)
            pgrads["latent"] = (patches.T @ gmat).reshape(
                spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels
            )
        if need_input_grad[0]:
            wmat = node.weight_bits.unpack().astype(np.float64).reshape(-1, spec.out_channels)
            gins[0] = _col2im(gmat @ wmat.T, spec, n, h, wd)
    elif kind == "binarize":
        if need_input_grad[0]:
            gins[0] = ste_backward(g, cache_entry, node.attrs.get("clip", 1.0))
    elif kind == "batchnorm":
        g_in, g_gamma, g_beta = batchnorm_backward(g, node.params["gamma"], cache_entry)
        if node.trainable:
            pgrads["gamma"] = g_gamma
            pgrads["beta"] = g_beta
        if need_input_grad[0]:
            gins[0] = g_in
    elif kind == "add":
        for slot in range(2):
            if need_input_grad[slot]:
                gins[slot] = g
    elif kind == "concat":
        widths = cache_entry
        offs = np.cumsum([0] + widths)
        for slot in range(len(widths)):
            if need_input_grad[slot]:
                gins[slot] = g[..., offs[slot] : offs[slot + 1]]
    elif kind == "prelu":
        x = cache_entry
        alpha = node.params["alpha"]
        if node.trainable:
            axes = tuple(range(g.ndim - 1))
            pgrads["alpha"] = np.sum(g * x * (x < 0), axis=axes)
        if need_input_grad[0]:
            gins[0] = g * np.where(x >= 0, 1.0, alpha)
    elif kind == "global_avg_pool":
        n, h, wd, c = cache_entry
        if need_input_grad[0]:
            gins[0] = np.broadcast_to(g[:, None, None, :] / (h * wd), (n, h, wd, c)).copy()
    else:  # pragma: no cover
        raise GraphError(f"node {idx}: unhandled kind {kind}")
    return gins, pgrads


def _padded_pm1_patches(xpm: np.ndarray, spec: BinConvSpec) -> np.ndarray:
    n, h, w, c = xpm.shape
    oh, ow = spec.out_hw(h, w)
    p, s = spec.padding, spec.stride
    if p:
        xpm = np.pad(xpm, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-1.0)
    cols = np.empty((n, oh, ow, spec.kernel_h, spec.kernel_w, c))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            cols[:, :, :, i, j, :] = xpm[:, i : i + oh * s : s, j : j + ow * s : s, :]
    return cols.reshape(n * oh * ow, spec.kernel_h * spec.kernel_w * c)


def backward(graph: Graph, cache: dict, grad_at_head: np.ndarray, config: BitwidthConfig,
             from_level: int | None = None, return_act_grads: bool = False):
    """Backpropagate from the output node down to (but excluding) from_level.

    Returns {node_id: {param_name: grad}} for trainable layers.  Every
    gradient tensor is quantized to the owning layer's backward bitwidth
    right after it is produced.
    """
    floor = from_level if from_level is not None else -1
    out_id = graph.output_id
    grads: dict[int, np.ndarray] = {
        out_id: fake_quant(np.asarray(grad_at_head, dtype=np.float64), config.q_b_nonbin)
    }
    param_grads: dict[int, dict] = {}
    for idx in range(out_id, floor, -1):
        node = graph.nodes[idx]
        g = grads.pop(idx, None)
        if g is None:
            continue
        needs_cache = node.kind not in ("add",)
        entry = cache.get(idx)
        if needs_cache and entry is None:
            raise GraphError(f"node {idx} ({node.name}): missing cache entry for backward")
        need = [(i > floor and i != -1) or return_act_grads for i in node.inputs]
        gins, pgrads = _backward_node(graph, idx, node, g, entry, config, need)
        bits = _node_backward_bits(node, config)
        if pgrads:
            param_grads[idx] = {k: fake_quant(v, bits) for k, v in pgrads.items()}
        for slot, src in enumerate(node.inputs):
            if gins[slot] is None:
                continue
            gq = fake_quant(gins[slot], bits)
            if src in grads:
                grads[src] = grads[src] + gq
            else:
                grads[src] = gq
    if return_act_grads:
        return param_grads, grads
    return param_grads


# ---------------------------------------------------------------------------
# parameter update


def sgd_step(graph: Graph, param_grads: dict, learning_rate: float, config: BitwidthConfig) -> None:
    """Plain SGD on trainable layers.

    Non-binary parameters live on a fixed per-tensor fixed-point grid when
    q_b_nonbin is quantized.  Binary layers update their latent weights on
    the q_b_bin grid over [-1, 1] and re-binarize; with q_b_bin = 1 the
    binary weights are frozen and the update is a no-op.
    """
    for idx, grads in param_grads.items():
        node = graph.nodes[idx]
        if not node.trainable:
            continue
        if node.kind in BINARY_KINDS:
            if config.q_b_bin == 1 or "latent" not in node.params:
                continue
            latent = np.clip(node.params["latent"] - learning_rate * grads["latent"], -1.0, 1.0)
            if config.q_b_bin is not None:
                latent = snap_to_fixed_grid(
                    latent, latent_grid_scale(config.q_b_bin), config.q_b_bin, symmetric=True
                )
            node.params["latent"] = f32_precision(latent)
            node.weight_bits = bitpack.binarize(node.params["latent"])
            continue
        for pname, g in grads.items():
            p = node.params[pname] - learning_rate * g
            if config.q_b_nonbin is not None:
                if pname not in node.param_scales:
                    node.param_scales[pname] = param_grid_scale(node.params[pname], config.q_b_nonbin)
                p = snap_to_fixed_grid(p, node.param_scales[pname], config.q_b_nonbin)
            node.params[pname] = f32_precision(p)


# ---------------------------------------------------------------------------
# shape inference and MAC accounting


def infer_shapes(graph: Graph) -> dict[int, tuple[int, ...]]:
    """Per-sample output shape of every node (no batch axis)."""
    shapes: dict[int, tuple[int, ...]] = {-1: graph.input_shape}
    for idx, node in enumerate(graph.nodes):
        ins = [shapes[i] for i in node.inputs]
        kind = node.kind
        if kind in ("dense", "softmax_ce_head", "binary_dense"):
            w_in, w_out = _dense_dims(node)
            if ins[0] != (w_in,):
                raise GraphError(f"node {idx} ({node.name}): input shape {ins[0]} vs ({w_in},)")
            shapes[idx] = (w_out,)
        elif kind in ("conv2d", "binary_conv2d"):
            spec = node.attrs["spec"]
            h, w, c = ins[0]
            if c != spec.in_channels:
                raise GraphError(f"node {idx} ({node.name}): channels {c} vs spec {spec.in_channels}")
            oh, ow = spec.out_hw(h, w)
            shapes[idx] = (oh, ow, spec.out_channels)
        elif kind == "global_avg_pool":
            shapes[idx] = (ins[0][-1],)
        elif kind == "concat":
            shapes[idx] = ins[0][:-1] + (sum(s[-1] for s in ins),)
        elif kind == "add":
            if ins[0] != ins[1]:
                raise GraphError(f"node {idx} ({node.name}): add shapes {ins[0]} vs {ins[1]}")
            shapes[idx] = ins[0]
        else:  # binarize, batchnorm, prelu are shape-preserving
            shapes[idx] = ins[0]
    return shapes


def _dense_dims(node: LayerNode) -> tuple[int, int]:
    if node.kind == "binary_dense":
        if "latent" in node.params:
            return node.params["latent"].shape
        return node.weight_bits.shape
    return node.params["w"].shape


def _node_macs(node: LayerNode, in_shape: tuple[int, ...]) -> int:
    kind = node.kind
    if kind in ("dense", "softmax_ce_head", "binary_dense"):
        w_in, w_out = _dense_dims(node)
        return w_in * w_out
    if kind in ("conv2d", "binary_conv2d"):
        spec = node.attrs["spec"]
        oh, ow = spec.out_hw(in_shape[0], in_shape[1])
        return oh * ow * spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels
    return 0


def mac_count(graph: Graph, mode: str = "forward", above_level: int | None = None) -> int:
    """Per-sample MAC count for one training-step pass.

    Forward counts one MAC per multiply-accumulate in dense/conv layers above
    above_level (all layers when None).  Backward counts the gradient
    propagation product plus the weight-gradient product for trainable layers,
    i.e. twice the layer's forward MACs; frozen layers contribute zero.
    """
    if mode not in ("forward", "backward"):
        raise GraphError(f"mode must be forward or backward, got {mode!r}")
    shapes = infer_shapes(graph)
    floor = above_level if above_level is not None else -1
    total = 0
    for idx in range(floor + 1, len(graph.nodes)):
        node = graph.nodes[idx]
        macs = _node_macs(node, shapes[node.inputs[0]])
        if mode == "forward":
            total += macs
        elif node.trainable:
            total += 2 * macs
    return total
