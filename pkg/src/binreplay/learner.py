"""Continual-learning orchestration: frozen backbone, latent replay, CWR* head.

Protocol: experience 0 plays the offline-pretraining role (full-graph float
training, activation-range calibration, replay-memory pre-population); later
experiences train only the layers above the replay level, on minibatches that
join B_N new latents with B_R replayed 1-bit latents.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import bitpack, cwr, graph as G, replay
from .bitpack import BinConvSpec
from .graph import BitwidthConfig, Graph, forward, backward, sgd_step, mac_count, softmax_ce
from .quant import calibrate_range, quant_params
from .replay import LatentSample, ReplayMemory


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Experience:
    inputs: np.ndarray
    labels: np.ndarray
    index: int
    classes_introduced: tuple[int, ...]


@dataclass
class ContinualConfig:
    num_experiences: int = 5
    epochs: int = 5
    b_n: int = 16
    b_r: int = 64
    learning_rate: float = 0.3
    pretrain_learning_rate: float = 0.2
    pretrain_epochs: int = 8
    pretrain_batch: int = 32
    quota: int = 80
    seed: int = 0
    bitwidth: BitwidthConfig = field(default_factory=BitwidthConfig)
    train_graph_layers: bool = True  # False: head-only baseline
    channels: int = 32


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    frozen_hash_before: str | None = None
    frozen_hash_after: str | None = None
    test_set_hash: str | None = None

    CSV_COLUMNS = ("experience", "test_accuracy", "mean_train_loss",
                   "fwd_macs", "bwd_macs", "replay_bits")

    def add(self, **kw):
        self.rows.append(kw)

    def to_csv(self) -> str:
        # wall-clock lives in timings_csv: metrics bytes must be
        # reproducible for identical config + seed
        lines = [",".join(self.CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_csv_cell(r[c]) for c in self.CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def timings_csv(self) -> str:
        lines = ["experience,elapsed_ms"]
        for r in self.rows:
            lines.append(f"{r['experience']},{r['elapsed_ms']:.1f}")
        return "\n".join(lines) + "\n"

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]["test_accuracy"]


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# reference model


def build_reference_model(input_shape=(12, 12, 1), channels: int = 32, seed: int = 0) -> Graph:
    """Small VGG-style binary net: one real input conv, three binary conv
    blocks with a residual add, PReLU, global average pooling.

    The replay level sits after the second block's binarize, so stored
    latents are natively 1-bit.
    """
    h, w, cin = input_shape
    rng = np.random.default_rng(seed)
    g = Graph(input_shape)

    def he(shape, fan_in):
        return G.f32_precision(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def latent_init(shape):
        return G.f32_precision(rng.uniform(-0.9, 0.9, size=shape))

    def bn_params(c):
        return {
            "gamma": np.ones(c), "beta": np.zeros(c),
            "running_mean": np.zeros(c), "running_var": np.ones(c),
        }

    c = channels
    spec_in = BinConvSpec(3, 3, 1, 1, cin, c)
    spec_bin = BinConvSpec(3, 3, 1, 1, c, c)
    g.add("conv2d", name="stem_conv", spec=spec_in,
          params={"w": he((3, 3, cin, c), 9 * cin), "b": np.zeros(c)})
    g.add("binarize", name="stem_sign")
    n2 = g.add("binary_conv2d", name="block1_conv", spec=spec_bin,
               params={"latent": latent_init((3, 3, c, c))})
    g.nodes[n2].weight_bits = bitpack.binarize(g.nodes[n2].params["latent"])
    g.add("batchnorm", name="block1_bn", params=bn_params(c))
    g.add("binarize", name="block1_sign")
    n5 = g.add("binary_conv2d", name="block2_conv", spec=spec_bin,
               params={"latent": latent_init((3, 3, c, c))})
    g.nodes[n5].weight_bits = bitpack.binarize(g.nodes[n5].params["latent"])
    g.add("batchnorm", name="block2_bn", params=bn_params(c))
    lvl = g.add("binarize", name="block2_sign")
    n8 = g.add("binary_conv2d", name="block3_conv", spec=spec_bin,
               params={"latent": latent_init((3, 3, c, c))})
    g.nodes[n8].weight_bits = bitpack.binarize(g.nodes[n8].params["latent"])
    n9 = g.add("batchnorm", name="block3_bn", params=bn_params(c))
    g.add("add", inputs=(n9, lvl), name="residual_add")
    g.add("prelu", name="head_act", params={"alpha": np.full(c, 0.25)})
    g.add("global_avg_pool", name="features")
    g.replay_level = lvl
    return g


def initialize_bn_stats(g: Graph, xs: np.ndarray) -> None:
    """Set each batchnorm's frozen running statistics from a float pass."""
    fcfg = BitwidthConfig.floating()
    for idx, node in enumerate(g.nodes):
        if node.kind != "batchnorm":
            continue
        acts: dict = {}
        forward(g, xs, fcfg, mode="infer", stop_level=node.inputs[0], collect=acts)
        x = acts[node.inputs[0]]
        axes = tuple(range(x.ndim - 1))
        node.params["running_mean"] = G.f32_precision(x.mean(axis=axes))
        node.params["running_var"] = G.f32_precision(np.maximum(x.var(axis=axes), 1e-3))


def calibrate_activations(g: Graph, xs: np.ndarray, q_f: int | None) -> None:
    """Fix per-node activation ranges at q_f bits from float-mode statistics."""
    if q_f is None:
        return
    fcfg = BitwidthConfig.floating()
    acts: dict = {}
    forward(g, xs, fcfg, mode="infer", collect=acts)
    lo, hi = calibrate_range([xs])
    g.input_qparams = quant_params(lo, hi, q_f, signed=False)
    for idx, node in enumerate(g.nodes):
        if node.kind in G.SNAP_KINDS:
            lo, hi = calibrate_range([acts[idx]])
            node.out_qparams = quant_params(lo, hi, q_f, signed=False)


def freeze_backbone(g: Graph, cfg: ContinualConfig) -> None:
    """Freeze layers at or below the replay level; pin on-device grids above it."""
    bw = cfg.bitwidth
    for idx, node in enumerate(g.nodes):
        has_params = bool(node.params) or node.weight_bits is not None
        node.trainable = (
            cfg.train_graph_layers and has_params and idx > g.replay_level
            and node.kind != "binarize"
        )
        if not node.trainable:
            continue
        if node.kind in G.BINARY_KINDS:
            if bw.q_b_bin == 1:
                # frozen binary weights: the latent copy is dropped entirely
                node.params.pop("latent", None)
            elif bw.q_b_bin is not None and "latent" in node.params:
                latent = G.snap_to_fixed_grid(
                    node.params["latent"], G.latent_grid_scale(bw.q_b_bin), bw.q_b_bin,
                    symmetric=True,
                )
                node.params["latent"] = G.f32_precision(latent)
                node.weight_bits = bitpack.binarize(node.params["latent"])
        elif bw.q_b_nonbin is not None:
            for pname in ("gamma", "beta", "w", "b", "alpha"):
                if pname in node.params:
                    scale = G.param_grid_scale(node.params[pname], bw.q_b_nonbin)
                    node.param_scales[pname] = scale
                    node.params[pname] = G.f32_precision(
                        G.snap_to_fixed_grid(node.params[pname], scale, bw.q_b_nonbin)
                    )


def frozen_region_hash(g: Graph) -> str:
    """SHA-256 over every parameter byte of the frozen region."""
    h = hashlib.sha256()
    lvl = g.replay_level if g.replay_level is not None else -1
    for idx in range(lvl + 1):
        node = g.nodes[idx]
        for pname in sorted(node.params):
            h.update(pname.encode())
            h.update(np.ascontiguousarray(node.params[pname]).tobytes())
        if node.weight_bits is not None:
            h.update(np.ascontiguousarray(node.weight_bits.words).tobytes())
        if node.out_qparams is not None:
            h.update(repr(node.out_qparams).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training phases


def _compute_features(g: Graph, xs, cfg_bw, from_level=None, mode="infer"):
    return forward(g, xs, cfg_bw, mode=mode, from_level=from_level)


def _latents_for(g: Graph, xs: np.ndarray, bw: BitwidthConfig, batch: int = 128) -> np.ndarray:
    """Run the frozen region; replay-level outputs are +-1 by construction."""
    outs = []
    for i in range(0, len(xs), batch):
        lat, _ = forward(g, xs[i : i + batch], bw, mode="infer", stop_level=g.replay_level)
        outs.append(lat)
    return np.concatenate(outs, axis=0)


def pretrain_first_experience(g: Graph, head: cwr.CWRHead, exp0: Experience,
                              cfg: ContinualConfig, rng: np.random.Generator):
    """Full-graph float training on experience 0, then on-device setup:
    range calibration, backbone freeze, replay-memory pre-population."""
    if len(exp0.inputs) == 0:
        raise ProtocolError("experience 0 is empty")
    fcfg = BitwidthConfig.floating()
    stats_x = exp0.inputs[: min(len(exp0.inputs), 256)]
    initialize_bn_stats(g, stats_x)
    for node in g.nodes:
        node.trainable = bool(node.params) or node.weight_bits is not None

    cwr.begin_experience(head, exp0.classes_introduced)
    cwr.record_training(head, exp0.labels)
    onehot_all = np.eye(head.max_classes)
    losses = []
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(exp0.inputs))
        for i in range(0, len(order), cfg.pretrain_batch):
            idx = order[i : i + cfg.pretrain_batch]
            feats, cache = forward(g, exp0.inputs[idx], fcfg, mode="train")
            logits = cwr.train_logits(head, feats)
            loss, g_logits = softmax_ce(logits, onehot_all[exp0.labels[idx]])
            losses.append(loss)
            g_feat = cwr.apply_head_gradient(head, feats, g_logits, cfg.pretrain_learning_rate)
            pgrads = backward(g, cache, g_feat, fcfg)
            sgd_step(g, pgrads, cfg.pretrain_learning_rate, fcfg)
    cwr.consolidate(head)

    calibrate_activations(g, stats_x, cfg.bitwidth.q_f)
    freeze_backbone(g, cfg)

    mem = ReplayMemory(quota=cfg.quota, max_classes=head.max_classes)
    lat = _latents_for(g, exp0.inputs, cfg.bitwidth)
    samples = [LatentSample(activation=bitpack.binarize(lat[i]), label=int(exp0.labels[i]))
               for i in range(len(lat))]
    replay.update_after_experience(mem, samples, rng)
    return mem, float(np.mean(losses))


def _replay_draw_size(n_new: int, cfg: ContinualConfig) -> int:
    if n_new == cfg.b_n:
        return cfg.b_r
    # partial final batch: keep the B_N:B_R ratio, rounding down
    return (n_new * cfg.b_r) // cfg.b_n


def run_experience(g: Graph, head: cwr.CWRHead, mem: ReplayMemory, exp: Experience,
                   cfg: ContinualConfig, rng: np.random.Generator) -> float:
    """One on-device experience; returns the mean training loss."""
    bw = cfg.bitwidth
    lvl = g.replay_level
    classes_present = set(int(c) for c in exp.classes_introduced)
    if cfg.b_r > 0:
        classes_present |= set(mem.classes)
    cwr.begin_experience(head, classes_present)
    cwr.record_training(head, exp.labels)
    if cfg.b_r > 0:
        # replayed classes train too; their share of the experience is the
        # memory contents interleaved into every epoch
        cwr.record_training(head, [s.label for c in mem.classes for s in mem.per_class[c]])

    lat_new = _latents_for(g, exp.inputs, bw)
    onehot_all = np.eye(head.max_classes)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(exp.inputs))
        for i in range(0, len(order), cfg.b_n):
            idx = order[i : i + cfg.b_n]
            xs = lat_new[idx]
            ys = exp.labels[idx]
            if cfg.b_r > 0 and mem.total > 0:
                k = _replay_draw_size(len(idx), cfg)
                if k > 0:
                    drawn = replay.sample_minibatch(mem, k, rng)
                    xs = np.concatenate(
                        [xs] + [s.activation.unpack()[None].astype(np.float64) for s in drawn]
                    )
                    ys = np.concatenate([ys, [s.label for s in drawn]])
            mode = "train" if cfg.train_graph_layers else "infer"
            feats, cache = forward(g, xs, bw, mode=mode, from_level=lvl)
            logits = cwr.train_logits(head, feats)
            loss, g_logits = softmax_ce(logits, onehot_all[ys])
            losses.append(loss)
            g_feat = cwr.apply_head_gradient(head, feats, g_logits, cfg.learning_rate)
            if cfg.train_graph_layers:
                pgrads = backward(g, cache, g_feat, bw, from_level=lvl)
                sgd_step(g, pgrads, cfg.learning_rate, bw)
    cwr.consolidate(head)

    samples = [LatentSample(activation=bitpack.binarize(lat_new[i]), label=int(exp.labels[i]))
               for i in range(len(lat_new))]
    replay.update_after_experience(mem, samples, rng)
    return float(np.mean(losses))


def evaluate(g: Graph, head: cwr.CWRHead, xs: np.ndarray, ys: np.ndarray,
             bw: BitwidthConfig, batch: int = 256) -> float:
    """Top-1 accuracy with consolidated weights; argmax breaks ties low."""
    correct = 0
    for i in range(0, len(xs), batch):
        feats, _ = forward(g, xs[i : i + batch], bw, mode="infer")
        pred = np.argmax(cwr.predict(head, feats), axis=1)
        correct += int(np.sum(pred == ys[i : i + batch]))
    return correct / len(xs)


def per_class_accuracy(g: Graph, head: cwr.CWRHead, xs, ys, bw: BitwidthConfig) -> dict[int, float]:
    out = {}
    for cls in np.unique(ys):
        m = ys == cls
        out[int(cls)] = evaluate(g, head, xs[m], ys[m], bw)
    return out


# ---------------------------------------------------------------------------
# full protocol


def build_nc_experiences(train_x, train_y, num_experiences: int, seed: int) -> list[Experience]:
    """New-Classes stream: classes partitioned across experiences, shuffled
    deterministically by seed."""
    classes = np.unique(train_y)
    if len(classes) < num_experiences:
        raise ProtocolError(f"{len(classes)} classes cannot fill {num_experiences} experiences")
    rng = np.random.default_rng(seed)
    shuffled = classes[rng.permutation(len(classes))]
    groups = [sorted(int(c) for c in part) for part in np.array_split(shuffled, num_experiences)]
    exps = []
    for k, group in enumerate(groups):
        mask = np.isin(train_y, group)
        exps.append(Experience(
            inputs=train_x[mask], labels=train_y[mask], index=k,
            classes_introduced=tuple(group),
        ))
    return exps


def run_protocol(cfg: ContinualConfig, train_x, train_y, test_x, test_y,
                 num_classes: int, g: Graph | None = None) -> tuple[MetricsLog, Graph, cwr.CWRHead, ReplayMemory]:
    rng = np.random.default_rng(cfg.seed)
    if g is None:
        g = build_reference_model(train_x.shape[1:], channels=cfg.channels, seed=cfg.seed)
    shapes = G.infer_shapes(g)
    head = cwr.init(shapes[g.output_id][0], num_classes)
    exps = build_nc_experiences(train_x, train_y, cfg.num_experiences, cfg.seed)

    log = MetricsLog()
    log.test_set_hash = hashlib.sha256(
        np.ascontiguousarray(test_x).tobytes() + np.ascontiguousarray(test_y).tobytes()
    ).hexdigest()

    t0 = time.perf_counter()
    mem, loss0 = pretrain_first_experience(g, head, exps[0], cfg, rng)
    acc = evaluate(g, head, test_x, test_y, cfg.bitwidth)
    fwd = mac_count(g, "forward", above_level=g.replay_level)
    bwd = mac_count(g, "backward", above_level=g.replay_level)
    log.add(experience=0, test_accuracy=acc, mean_train_loss=loss0,
            fwd_macs=fwd, bwd_macs=bwd,
            replay_bits=replay.memory_footprint_bits(mem).payload_bits,
            elapsed_ms=(time.perf_counter() - t0) * 1000.0)
    log.frozen_hash_before = frozen_region_hash(g)

    for exp in exps[1:]:
        t0 = time.perf_counter()
        loss = run_experience(g, head, mem, exp, cfg, rng)
        acc = evaluate(g, head, test_x, test_y, cfg.bitwidth)
        log.add(experience=exp.index, test_accuracy=acc, mean_train_loss=loss,
                fwd_macs=fwd, bwd_macs=bwd,
                replay_bits=replay.memory_footprint_bits(mem).payload_bits,
                elapsed_ms=(time.perf_counter() - t0) * 1000.0)
    log.frozen_hash_after = frozen_region_hash(g)
    return log, g, head, mem
