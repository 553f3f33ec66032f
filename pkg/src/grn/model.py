"""Gradual relation network: grouped encoder, prototypes and relation head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import layers as L
from .layers import ConvSpec, DimensionError

CHECKPOINT_FORMAT = "grn-checkpoint"
CHECKPOINT_VERSION = 1


class ProtocolError(ValueError):
    """Support/query sets that violate the episode contract."""


@dataclass(frozen=True)
class GrnConfig:
    n_groups: int = 9
    channels_per_group: int = 4
    temporal_kernel: int = 65
    temporal_stride3: int = 10
    spatial_kernel: tuple[int, int] = (5, 5)
    depth_multiplier: int = 2
    relation_conv_kernel: int = 10
    relation_channels_per_group: int = 32
    pool_window: int = 2
    pool_stride: int = 2
    fc_hidden: int = 8
    n_classes: int = 3
    relation_bn: bool = True
    n_times: int = 750

    def __post_init__(self):
        object.__setattr__(self, "spatial_kernel", tuple(self.spatial_kernel))
        if self.rel_t2 < 1:
            raise DimensionError(f"config leaves no time samples after the relation head: {self}")

    # derived sizes, named after the tensors they describe
    @property
    def n_filters(self) -> int:
        return self.n_groups * self.channels_per_group

    @property
    def n_spatial(self) -> int:
        return self.n_filters * self.depth_multiplier

    @property
    def group_channels(self) -> int:
        return self.channels_per_group * self.depth_multiplier

    @property
    def t1(self) -> int:
        return self.n_times - self.temporal_kernel + 1

    @property
    def t3(self) -> int:
        return (self.t1 - self.temporal_kernel) // self.temporal_stride3 + 1

    @property
    def rel_channels(self) -> int:
        return self.n_groups * self.relation_channels_per_group

    @property
    def rel_t1(self) -> int:
        return self.t3 - self.relation_conv_kernel + 1

    @property
    def rel_pooled(self) -> int:
        return (self.rel_t1 - self.pool_window) // self.pool_stride + 1

    @property
    def rel_t2(self) -> int:
        return self.rel_pooled - self.relation_conv_kernel + 1

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        return (self.n_groups, self.group_channels, self.t3)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (*self.spatial_kernel, self.n_times)

    def specs(self) -> dict[str, ConvSpec]:
        tk, rk = self.temporal_kernel, self.relation_conv_kernel
        gh, gw = self.spatial_kernel
        return {
            "enc1": ConvSpec(1, self.n_filters, (1, 1, tk)),
            "enc2": ConvSpec.depthwise(self.n_filters, (gh, gw, 1), multiplier=self.depth_multiplier),
            "enc3": ConvSpec.depthwise(self.n_spatial, (1, 1, tk), stride=(1, 1, self.temporal_stride3)),
            # grouped conv over the interleaved (query, prototype) groups
            "rel1": ConvSpec(2 * self.n_spatial, self.rel_channels, (1, 1, rk), groups=self.n_groups),
            # one half of rel1: the same grouped conv seen from a single embedding
            "rel1_half": ConvSpec(self.n_spatial, self.rel_channels, (1, 1, rk), groups=self.n_groups),
            "rel2": ConvSpec(self.rel_channels, self.rel_channels, (1, 1, rk)),
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spatial_kernel"] = list(self.spatial_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GrnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GrnConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: GrnConfig) -> dict[str, tuple[int, ...]]:
    s = config.specs()
    rc = config.rel_channels
    shapes = {
        "enc1.w": s["enc1"].weight_shape,
        "bn1.gamma": (config.n_filters,),
        "bn1.beta": (config.n_filters,),
        "enc2.w": s["enc2"].weight_shape,
        "bn2.gamma": (config.n_spatial,),
        "bn2.beta": (config.n_spatial,),
        "enc3.w": s["enc3"].weight_shape,
        "bn3.gamma": (config.n_spatial,),
        "bn3.beta": (config.n_spatial,),
        "rel1.w": s["rel1"].weight_shape,
        "rel2.w": s["rel2"].weight_shape,
        "fc1.w": (config.fc_hidden, rc),
        "fc1.b": (config.fc_hidden,),
        "fc2.w": (1, config.fc_hidden),
        "fc2.b": (1,),
    }
    if config.relation_bn:
        shapes.update({"rbn1.gamma": (rc,), "rbn1.beta": (rc,), "rbn2.gamma": (rc,), "rbn2.beta": (rc,)})
    else:
        shapes.update({"rel1.b": (rc,), "rel2.b": (rc,)})
    return shapes


def bn_layers(config: GrnConfig) -> dict[str, int]:
    out = {"bn1": config.n_filters, "bn2": config.n_spatial, "bn3": config.n_spatial}
    if config.relation_bn:
        out.update(rbn1=config.rel_channels, rbn2=config.rel_channels)
    return out


def init_params(config: GrnConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".b")):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


class Prediction(NamedTuple):
    classes: np.ndarray  # (Nq,)
    probs: np.ndarray  # (Nq, K) softmax of the relation scores
    scores: np.ndarray  # (Nq, K) relation scores in (0, 1)


def interleave_groups(a, b):
    """Concatenate two embeddings group by group along the channel axis.

    ``(..., G, C, T)`` x2 -> ``(..., G, 2C, T)`` where output group ``g`` is
    ``a[g]`` followed by ``b[g]``.
    """
    a = np.asarray(a, dtype=L.DTYPE)
    b = np.asarray(b, dtype=L.DTYPE)
    if a.shape != b.shape:
        raise DimensionError(f"interleave: shapes differ {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-2)


def _flat5(e):
    """(N, G, C, T) embedding -> (N, G*C, 1, 1, T) feature map."""
    n, g, c, t = e.shape
    return e.reshape(n, g * c, 1, 1, t)


def _pair_sum_matrix(index, n):
    m = np.zeros((n, len(index)))
    m[index, np.arange(len(index))] = 1.0
    return m


class GRN:
    """Encoder ``f`` plus relation module ``g`` with explicit backward passes.

    ``params`` maps names to float64 arrays (what the optimizer updates);
    ``bn`` holds running statistics, mutated only by train-mode forwards.
    """

    def __init__(self, config: GrnConfig | None = None, params=None, bn=None, seed: int = 0):
        self.config = config or GrnConfig()
        self.specs = self.config.specs()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise KeyError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != {shape}")
        self.bn = bn if bn is not None else {k: L.BatchNormState.fresh(c) for k, c in bn_layers(self.config).items()}
        self.bn_momentum = L.BN_MOMENTUM

    def copy(self) -> "GRN":
        return GRN(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: s.copy() for k, s in self.bn.items()},
        )

    def _bias(self, name, channels):
        return self.params.get(name, np.zeros(channels))

    # -- encoder ---------------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=L.DTYPE)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise DimensionError(f"encoder input must be (N, {self.config.input_shape}), got {x.shape}")
        return x

    def encode_forward(self, x, mode="train"):
        """(N, H, W, T) trials -> (N, G, C, T3) embeddings and a backward cache."""
        cfg, p, s = self.config, self.params, self.specs
        x = self._check_input(x)[:, None]
        cache = {"x": x}
        h = x
        for i, name in enumerate(("enc1", "enc2", "enc3"), start=1):
            spec = s[name]
            z = L.conv_forward(h, spec, p[f"{name}.w"], np.zeros(spec.out_channels))
            h, cache[f"bn{i}"] = L.bn_elu_forward(
                z, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn[f"bn{i}"], mode, self.bn_momentum
            )
            cache[f"a{i}"] = h
        n = x.shape[0]
        return h.reshape(n, *cfg.embedding_shape), cache

    def encode_backward(self, d_emb, cache):
        p, s = self.params, self.specs
        grads = {}
        d = d_emb.reshape(cache["a3"].shape)
        inputs = {1: cache["x"], 2: cache["a1"], 3: cache["a2"]}
        for i, name in ((3, "enc3"), (2, "enc2"), (1, "enc1")):
            d, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = L.bn_elu_backward(d, cache[f"bn{i}"])
            d, grads[f"{name}.w"], _ = L.conv_backward(d, inputs[i], s[name], p[f"{name}.w"], need_input_grad=i > 1)
        return grads

    def encode(self, x, mode="eval", batch_size=16):
        """Embeddings without a cache; eval mode is processed in batches."""
        x = self._check_input(x)
        if mode == "train":
            return self.encode_forward(x, "train")[0]
        parts = [self.encode_forward(x[i : i + batch_size], "eval")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, *self.config.embedding_shape))

    def layer1_features(self, x):
        """Eval-mode output of the first temporal conv block, (N, F, H, W, T1)."""
        x = self._check_input(x)[:, None]
        z = L.conv_forward(x, self.specs["enc1"], self.params["enc1.w"], np.zeros(self.config.n_filters))
        out, _ = L.bn_elu_forward(z, self.params["bn1.gamma"], self.params["bn1.beta"], self.bn["bn1"], "eval")
        return out

    def shape_trace(self, x):
        """Shapes of every intermediate for one trial scored against itself."""
        cfg, p, s = self.config, self.params, self.specs
        x = self._check_input(x)[:1]
        trace = {"input": x.shape[1:]}
        h = x[:, None]
        for i, name in enumerate(("enc1", "enc2", "enc3"), start=1):
            h = L.conv_forward(h, s[name], p[f"{name}.w"], np.zeros(s[name].out_channels))
            trace[name] = h.shape[1:]
        emb = h.reshape(1, *cfg.embedding_shape)
        trace["embedding"] = emb.shape[1:]
        paired = interleave_groups(emb, emb)
        trace["interleaved"] = paired.shape[1:]
        a = self.relation_stage1_literal(emb, emb)
        trace["rel1"] = (a.shape[1], a.shape[-1])
        pooled = L.avg_pool_time(a.reshape(1, cfg.rel_channels, -1), cfg.pool_window, cfg.pool_stride)
        trace["pool"] = pooled.shape[1:]
        b = L.conv_forward(pooled.reshape(1, cfg.rel_channels, 1, 1, -1), s["rel2"], p["rel2.w"],
                           self._bias("rel2.b", cfg.rel_channels))
        trace["rel2"] = (b.shape[1], b.shape[-1])
        gap = L.global_avg_pool(b.reshape(1, cfg.rel_channels, -1), channel_axis=1)
        trace["gap"] = gap.shape[1:]
        h1 = L.dense(gap, p["fc1.w"], p["fc1.b"])
        trace["fc1"] = h1.shape[1:]
        trace["score"] = L.dense(h1, p["fc2.w"], p["fc2.b"]).shape[1:]
        return {k: tuple(int(v) for v in shape) for k, shape in trace.items()}

    # -- relation module -------------------------------------------------------

    def _check_embeddings(self, e, what):
        e = np.asarray(e, dtype=L.DTYPE)
        if e.ndim == 3:
            e = e[None]
        if e.shape[1:] != self.config.embedding_shape:
            raise DimensionError(f"{what}: embedding shape {e.shape[1:]} != {self.config.embedding_shape}")
        return e

    def relation_stage1_literal(self, eq, ep):
        """First relation conv applied to explicitly interleaved pairs (reference path)."""
        eq = self._check_embeddings(eq, "query")
        ep = self._check_embeddings(ep, "prototype")
        paired = _flat5(interleave_groups(eq, ep))
        return L.conv_forward(paired, self.specs["rel1"], self.params["rel1.w"], self._bias("rel1.b", self.config.rel_channels))

    def relation_forward(self, eq, ep, qi, pj, mode="train"):
        """Relation scores ``r[k] = g(eq[qi[k]], ep[pj[k]])``.

        The first grouped conv is linear in the interleaved input, so it is
        evaluated once per embedding for each half of its kernel and the
        halves are summed per pair.
        """
        cfg, p, s = self.config, self.params, self.specs
        eq = self._check_embeddings(eq, "query")
        ep = self._check_embeddings(ep, "prototype")
        qi = np.asarray(qi, dtype=np.intp)
        pj = np.asarray(pj, dtype=np.intp)
        if qi.shape != pj.shape or qi.ndim != 1:
            raise DimensionError("pair index arrays must be equal-length vectors")
        gc = cfg.group_channels
        w1 = p["rel1.w"]
        wq, wp = np.ascontiguousarray(w1[:, :gc]), np.ascontiguousarray(w1[:, gc:])
        zero = np.zeros(cfg.rel_channels)
        a_q = L.conv_forward(_flat5(eq), s["rel1_half"], wq, zero)
        a_p = L.conv_forward(_flat5(ep), s["rel1_half"], wp, zero)
        z1 = a_q[qi] + a_p[pj] + self._bias("rel1.b", cfg.rel_channels)[None, :, None, None, None]
        cache = {"eq": eq, "ep": ep, "qi": qi, "pj": pj, "wq": wq, "wp": wp}
        if cfg.relation_bn:
            h1, cache["rbn1"] = L.bn_elu_forward(z1, p["rbn1.gamma"], p["rbn1.beta"], self.bn["rbn1"], mode, self.bn_momentum)
        else:
            h1 = L.elu(z1)
        cache["h1"] = h1
        pooled = L.avg_pool_time(h1, cfg.pool_window, cfg.pool_stride)
        cache["pooled"] = pooled
        z2 = L.conv_forward(pooled, s["rel2"], p["rel2.w"], self._bias("rel2.b", cfg.rel_channels))
        if cfg.relation_bn:
            h2, cache["rbn2"] = L.bn_elu_forward(z2, p["rbn2.gamma"], p["rbn2.beta"], self.bn["rbn2"], mode, self.bn_momentum)
        else:
            h2 = L.elu(z2)
        cache["h2"] = h2
        feat = L.global_avg_pool(h2)
        cache["feat"] = feat
        hid = L.elu(L.dense(feat, p["fc1.w"], p["fc1.b"]))
        cache["hid"] = hid
        r = L.sigmoid(L.dense(hid, p["fc2.w"], p["fc2.b"]))[:, 0]
        cache["r"] = r
        return r, cache

    def relation_backward(self, d_r, cache):
        """Returns ``(d_eq, d_ep, grads)`` for upstream gradient ``d_r`` (P,)."""
        cfg, p, s = self.config, self.params, self.specs
        grads = {}
        d = L.sigmoid_backward(np.asarray(d_r, dtype=L.DTYPE), cache["r"])[:, None]
        d, grads["fc2.w"], grads["fc2.b"] = L.dense_backward(d, cache["hid"], p["fc2.w"])
        d = L.elu_backward(d, cache["hid"])
        d, grads["fc1.w"], grads["fc1.b"] = L.dense_backward(d, cache["feat"], p["fc1.w"])
        d = L.global_avg_pool_backward(d, cache["h2"].shape)
        if cfg.relation_bn:
            d, grads["rbn2.gamma"], grads["rbn2.beta"] = L.bn_elu_backward(d, cache["rbn2"])
        else:
            d = L.elu_backward(d, cache["h2"])
        d, grads["rel2.w"], g_b2 = L.conv_backward(d, cache["pooled"], s["rel2"], p["rel2.w"])
        d = L.avg_pool_time_backward(d, cfg.rel_t1, cfg.pool_window, cfg.pool_stride)
        if cfg.relation_bn:
            d, grads["rbn1.gamma"], grads["rbn1.beta"] = L.bn_elu_backward(d, cache["rbn1"])
        else:
            d = L.elu_backward(d, cache["h1"])
            grads["rel2.b"] = g_b2
            grads["rel1.b"] = d.sum(axis=(0, 2, 3, 4))

        eq, ep, qi, pj = cache["eq"], cache["ep"], cache["qi"], cache["pj"]
        flat = d.reshape(len(qi), -1)
        d_aq = (_pair_sum_matrix(qi, len(eq)) @ flat).reshape((len(eq),) + d.shape[1:])
        d_ap = (_pair_sum_matrix(pj, len(ep)) @ flat).reshape((len(ep),) + d.shape[1:])
        d_eq, g_wq, _ = L.conv_backward(d_aq, _flat5(eq), s["rel1_half"], cache["wq"])
        d_ep, g_wp, _ = L.conv_backward(d_ap, _flat5(ep), s["rel1_half"], cache["wp"])
        grads["rel1.w"] = np.concatenate([g_wq, g_wp], axis=1)
        return d_eq.reshape(eq.shape), d_ep.reshape(ep.shape), grads

    def relation_score(self, query, proto, mode="eval"):
        """Scalar relation score between one query embedding and one prototype."""
        r, _ = self.relation_forward(query, proto, [0], [0], mode)
        return float(r[0])

    def freeze_statistics(self, x_support, y_support, n_classes=None):
        """Set every running statistic to the exact support-batch statistics.

        Encoder layers take the support batch; relation layers take the
        support-vs-prototype pairs, which is what they see at test time.
        Returns the prototypes computed under the frozen statistics.
        """
        k = n_classes or self.config.n_classes
        self.bn_momentum = 1.0
        try:
            emb, _ = self.encode_forward(x_support, "train")
            protos = compute_prototypes(emb, y_support, k)
            n = len(emb)
            self.relation_forward(emb, protos, np.repeat(np.arange(n), k), np.tile(np.arange(k), n), "train")
        finally:
            self.bn_momentum = L.BN_MOMENTUM
        return protos

    # -- prototypes and prediction --------------------------------------------

    def prototypes(self, x_support, y_support, n_classes=None, mode="eval"):
        """Per-class mean support embedding, shape (K, G, C, T3)."""
        k = n_classes or self.config.n_classes
        return compute_prototypes(self.encode(x_support, mode), y_support, k)

    def score_matrix(self, e_query, prototypes, batch_size=64):
        """(Nq, K) eval-mode relation scores of every query against every prototype."""
        e_query = self._check_embeddings(e_query, "query")
        prototypes = self._check_embeddings(prototypes, "prototype")
        k = len(prototypes)
        out = np.empty((len(e_query), k))
        for start in range(0, len(e_query), batch_size):
            block = e_query[start : start + batch_size]
            nq = len(block)
            qi = np.repeat(np.arange(nq), k)
            pj = np.tile(np.arange(k), nq)
            r, _ = self.relation_forward(block, prototypes, qi, pj, "eval")
            out[start : start + nq] = r.reshape(nq, k)
        return out

    def predict(self, x_query, prototypes) -> Prediction:
        if prototypes is None or len(prototypes) == 0:
            raise ProtocolError("prediction needs one prototype per class")
        scores = self.score_matrix(self.encode(x_query, "eval"), prototypes)
        return scores_to_prediction(scores)


def compute_prototypes(embeddings, labels, n_classes):
    """Class-mean embeddings, summed in trial order."""
    embeddings = np.asarray(embeddings, dtype=L.DTYPE)
    labels = np.asarray(labels)
    protos = np.empty((n_classes,) + embeddings.shape[1:])
    for k in range(n_classes):
        members = embeddings[labels == k]
        if len(members) == 0:
            raise ProtocolError(f"class {k} has no support trials")
        acc = np.zeros(embeddings.shape[1:])
        for e in members:
            acc += e
        protos[k] = acc / len(members)
    return protos


def scores_to_prediction(scores) -> Prediction:
    """Softmax over classes; argmax with ties to the lowest class id."""
    scores = np.atleast_2d(np.asarray(scores, dtype=L.DTYPE))
    probs = L.softmax(scores, axis=1)
    return Prediction(np.argmax(probs, axis=1), probs, scores)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: GRN, prototypes=None, extra: dict | None = None) -> str:
    """Write ``manifest.json`` + ``tensors.f32`` into directory ``path``.

    Returns the hex SHA-256 digest over both files.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.params)
    for name, st in model.bn.items():
        tensors[f"{name}.running_mean"] = st.mean
        tensors[f"{name}.running_var"] = st.var
    if prototypes is not None:
        tensors["prototypes"] = np.asarray(prototypes)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(blobs)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "tensors": index,
        "extra": extra or {},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (path / "manifest.json").write_text(text)
    (path / "tensors.f32").write_bytes(payload)
    return hashlib.sha256(text.encode() + payload).hexdigest()


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, prototypes or None, extra)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} GRN checkpoint")
    payload = np.frombuffer((path / "tensors.f32").read_bytes(), dtype="<f4")
    config = GrnConfig.from_dict(manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count > payload.size:
            raise ValueError(f"{path}: payload truncated at tensor {entry['name']}")
        tensors[entry["name"]] = payload[start : start + count].astype(np.float64).reshape(entry["shape"])
    bn = {
        name: L.BatchNormState(tensors.pop(f"{name}.running_mean"), tensors.pop(f"{name}.running_var"))
        for name in bn_layers(config)
    }
    prototypes = tensors.pop("prototypes", None)
    return GRN(config, tensors, bn), prototypes, manifest.get("extra", {})
