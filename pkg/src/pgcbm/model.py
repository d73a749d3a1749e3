"""Sub-model architecture and the three composed variants.

One reduced-scale architecture serves every role: per-modality conv
encoders, sinusoidal positional branch, spatial pyramid, multi-head
self-attention, two-stage conv decoder with a residual link, and a
K-quantile head.  The composed variants are the process-guided model
(three concept sub-models feeding an aggregation sub-model), the vanilla
bottleneck (frozen concepts, medians only) and a parameter-matched
black box.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tc
from .tensor import Tensor

DEFAULT_QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)


class CheckpointFormatError(Exception):
    pass


class FrozenModelError(RuntimeError):
    pass


@dataclass
class SubModelConfig:
    input_groups: tuple = (3, 10)  # channels per modality branch
    use_position: bool = True
    encoder_width: int = 16
    pos_frequencies: int = 4
    pos_width: int = 8
    pyramid_scales: tuple = (1, 2, 4)
    width: int = 32  # fused/attention width; heads must divide it
    attention_blocks: int = 1
    attention_heads: int = 2
    decoder_width: int = 32
    quantiles: tuple = DEFAULT_QUANTILES
    dropout: float = 0.1
    norm_groups: int = 4

    def validate(self):
        q = self.quantiles
        if not all(0.0 < a < 1.0 for a in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("quantiles must be strictly increasing within (0, 1)")
        if self.width % self.attention_heads:
            raise ValueError("attention heads must divide model width")
        if self.pos_frequencies < 1:
            raise ValueError("pos_frequencies must be >= 1")

    @property
    def n_quantiles(self) -> int:
        return len(self.quantiles)


@dataclass
class QuantilePrediction:
    """K stacked quantile planes for one attribute, per record or batch."""

    values: np.ndarray  # (K, H, W) or (N, K, H, W)
    quantiles: tuple


def sinusoidal_position_encoding(lon: float, lat: float, frequencies: int) -> np.ndarray:
    """4P-vector of sin/cos features of the wrapped, normalized coordinates."""
    lon = (lon + 180.0) % 360.0 - 180.0
    lat = (lat + 90.0) % 180.0 - 90.0
    feats = []
    for u in (lon / 180.0, lat / 90.0):
        for p in range(frequencies):
            omega = np.pi * 10000.0 ** (2.0 * p / (2.0 * frequencies))
            feats.append(np.sin(u * omega))
            feats.append(np.cos(u * omega))
    return np.array(feats)


# -- parameters ------------------------------------------------------------


def init_submodel_params(cfg: SubModelConfig, seed: int) -> dict:
    """He fan-in init for weights, zero biases, spread quantile-head biases."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A7A]))
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in=None, zeros=False):
        if name in params:
            raise ValueError(f"duplicate parameter name {name}")
        if zeros:
            arr = np.zeros(shape)
        else:
            fi = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            arr = rng.normal(scale=np.sqrt(2.0 / fi), size=shape)
        params[name] = Tensor(arr, requires_grad=True)

    e = cfg.encoder_width
    for i, cin in enumerate(cfg.input_groups):
        add(f"enc{i}.conv1.w", (e, cin, 3, 3))
        add(f"enc{i}.conv1.b", (e,), zeros=True)
        params[f"enc{i}.gn1.g"] = Tensor(np.ones(e), requires_grad=True)
        add(f"enc{i}.gn1.b", (e,), zeros=True)
        add(f"enc{i}.conv2.w", (e, e, 3, 3))
        add(f"enc{i}.conv2.b", (e,), zeros=True)

    fused = e * len(cfg.input_groups) + (cfg.pos_width if cfg.use_position else 0)
    if cfg.use_position:
        add("pos.dense.w", (4 * cfg.pos_frequencies, cfg.pos_width))
        add("pos.dense.b", (cfg.pos_width,), zeros=True)

    pyr_in = fused * len(cfg.pyramid_scales)
    add("pyr.proj.w", (cfg.width, pyr_in, 3, 3))
    add("pyr.proj.b", (cfg.width,), zeros=True)
    params["pyr.gn.g"] = Tensor(np.ones(cfg.width), requires_grad=True)
    add("pyr.gn.b", (cfg.width,), zeros=True)

    c = cfg.width
    for a in range(cfg.attention_blocks):
        params[f"att{a}.ln1.g"] = Tensor(np.ones(c), requires_grad=True)
        add(f"att{a}.ln1.b", (c,), zeros=True)
        for nm in ("q", "k", "v", "o"):
            add(f"att{a}.{nm}.w", (c, c), fan_in=c)
            add(f"att{a}.{nm}.b", (c,), zeros=True)
        params[f"att{a}.ln2.g"] = Tensor(np.ones(c), requires_grad=True)
        add(f"att{a}.ln2.b", (c,), zeros=True)
        add(f"att{a}.mlp1.w", (c, 2 * c), fan_in=c)
        add(f"att{a}.mlp1.b", (2 * c,), zeros=True)
        add(f"att{a}.mlp2.w", (2 * c, c), fan_in=2 * c)
        add(f"att{a}.mlp2.b", (c,), zeros=True)

    d = cfg.decoder_width
    add("dec.conv1.w", (d, c, 3, 3))
    add("dec.conv1.b", (d,), zeros=True)
    params["dec.gn1.g"] = Tensor(np.ones(d), requires_grad=True)
    add("dec.gn1.b", (d,), zeros=True)
    add("dec.conv2.w", (d, d, 3, 3))
    add("dec.conv2.b", (d,), zeros=True)

    k = cfg.n_quantiles
    add("head.w", (k, d, 3, 3))
    params["head.b"] = Tensor(np.linspace(-1.0, 1.0, k), requires_grad=True)
    return params


def param_count(params: dict) -> int:
    return sum(int(t.data.size) for t in params.values())


def set_trainable(params: dict, trainable: bool) -> None:
    for t in params.values():
        t.requires_grad = trainable


# -- forward ---------------------------------------------------------------


def _dense(x: Tensor, params: dict, name: str) -> Tensor:
    return tc.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _attention_block(x: Tensor, params: dict, cfg: SubModelConfig, prefix: str,
                     train: bool, seed: int) -> Tensor:
    n, t, c = x.shape
    heads = cfg.attention_heads
    dh = c // heads

    h = tc.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])

    def split_heads(v):
        return v.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)

    q = split_heads(_dense(h, params, f"{prefix}.q"))
    k = split_heads(_dense(h, params, f"{prefix}.k"))
    v = split_heads(_dense(h, params, f"{prefix}.v"))
    scores = tc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = tc.softmax(scores, axis=-1)
    ctx = tc.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, c)
    ctx = _dense(ctx, params, f"{prefix}.o")
    ctx = tc.dropout(ctx, cfg.dropout, seed=seed, train=train)
    x = x + ctx

    h = tc.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = tc.gelu(_dense(h, params, f"{prefix}.mlp1"))
    h = _dense(h, params, f"{prefix}.mlp2")
    return x + h


def submodel_apply(params: dict, cfg: SubModelConfig, inputs: Tensor,
                   position: np.ndarray | None, train: bool, seed: int) -> Tensor:
    """Differentiable forward pass; returns raw (N, K, H, W) head output.

    `inputs` is the full (N, C_total, H, W) stack; it is sliced into the
    configured modality groups.  `position` is (N, 2) lon/lat degrees.
    """
    n, c_total, hh, ww = inputs.shape
    if c_total != sum(cfg.input_groups):
        raise ValueError(
            f"input channels {c_total} != configured groups {cfg.input_groups}"
        )

    branches = []
    off = 0
    for i, cin in enumerate(cfg.input_groups):
        x = inputs[:, off : off + cin]
        off += cin
        x = tc.relu(tc.conv2d(x, params[f"enc{i}.conv1.w"], params[f"enc{i}.conv1.b"]))
        x = tc.group_norm(x, cfg.norm_groups, params[f"enc{i}.gn1.g"], params[f"enc{i}.gn1.b"])
        x = tc.gelu(tc.conv2d(x, params[f"enc{i}.conv2.w"], params[f"enc{i}.conv2.b"]))
        branches.append(x)

    if cfg.use_position:
        if position is None:
            raise ValueError("model configured with a positional branch but no position given")
        enc = np.stack([
            sinusoidal_position_encoding(p[0], p[1], cfg.pos_frequencies) for p in np.asarray(position)
        ])
        pe = tc.gelu(_dense(Tensor(enc), params, "pos.dense"))  # (N, pos_width)
        pe = pe.reshape(n, cfg.pos_width, 1, 1) * Tensor(np.ones((1, 1, hh, ww)))
        branches.append(pe)

    fused = tc.concat(branches, axis=1)
    fused = tc.dropout(fused, cfg.dropout, seed=seed * 1000003 + 1, train=train)

    levels = []
    for s in cfg.pyramid_scales:
        levels.append(fused if s == 1 else tc.upsample_nearest2d(tc.avg_pool2d(fused, s), s))
    x = tc.concat(levels, axis=1)
    x = tc.conv2d(x, params["pyr.proj.w"], params["pyr.proj.b"])
    x = tc.gelu(tc.group_norm(x, cfg.norm_groups, params["pyr.gn.g"], params["pyr.gn.b"]))

    tokens = x.transpose(0, 2, 3, 1).reshape(n, hh * ww, cfg.width)
    for a in range(cfg.attention_blocks):
        tokens = _attention_block(tokens, params, cfg, f"att{a}", train,
                                  seed=seed * 1000003 + 2 + a)
    x = tokens.reshape(n, hh, ww, cfg.width).transpose(0, 3, 1, 2)

    h1 = tc.gelu(tc.group_norm(
        tc.conv2d(x, params["dec.conv1.w"], params["dec.conv1.b"]),
        cfg.norm_groups, params["dec.gn1.g"], params["dec.gn1.b"],
    ))
    h2 = tc.conv2d(h1, params["dec.conv2.w"], params["dec.conv2.b"]) + h1  # residual
    h2 = tc.dropout(tc.gelu(h2), cfg.dropout, seed=seed * 1000003 + 17, train=train)
    return tc.conv2d(h2, params["head.w"], params["head.b"])


def enforce_monotone(values: np.ndarray, axis: int) -> np.ndarray:
    """Per-pixel ascending sort of the quantile axis."""
    return np.sort(values, axis=axis)


def submodel_forward(params: dict, cfg: SubModelConfig, inputs: np.ndarray,
                     position: np.ndarray | None, mode: str = "infer",
                     seed: int = 0) -> QuantilePrediction:
    """Numpy-level forward.  Train mode emits raw head outputs; infer mode
    applies per-pixel monotone enforcement and uses no dropout."""
    single = inputs.ndim == 3
    if single:
        inputs = inputs[None]
        position = None if position is None else np.asarray(position)[None]
    train = mode == "train"
    out = submodel_apply(params, cfg, Tensor(np.asarray(inputs, dtype=np.float64)),
                         position, train=train, seed=seed).data
    if not train:
        out = enforce_monotone(out, axis=1)
    if single:
        out = out[0]
    return QuantilePrediction(values=out, quantiles=cfg.quantiles)


# -- composed variants -----------------------------------------------------

CONCEPTS = ("cover", "height", "stems")


@dataclass
class PGCBMModel:
    concept_cfg: SubModelConfig
    agg_cfg: SubModelConfig
    concept_params: dict  # name -> params dict
    agg_params: dict
    bypass_latent: bool = False

    @classmethod
    def create(cls, concept_cfg: SubModelConfig | None = None, seed: int = 0,
               bypass_latent: bool = False) -> "PGCBMModel":
        ccfg = concept_cfg or SubModelConfig()
        ccfg.validate()
        k = ccfg.n_quantiles
        agg_groups = (3 * k,) if not bypass_latent else (3 * k, sum(ccfg.input_groups))
        acfg = replace(ccfg, input_groups=agg_groups, use_position=False)
        return cls(
            concept_cfg=ccfg,
            agg_cfg=acfg,
            concept_params={
                name: init_submodel_params(ccfg, seed=seed * 7919 + i)
                for i, name in enumerate(CONCEPTS)
            },
            agg_params=init_submodel_params(acfg, seed=seed * 7919 + 101),
            bypass_latent=bypass_latent,
        )

    def total_param_count(self) -> int:
        return sum(param_count(p) for p in self.concept_params.values()) + param_count(self.agg_params)


def pgcbm_apply(model: PGCBMModel, inputs: Tensor, position: np.ndarray,
                train: bool, seed: int, concept_override: dict | None = None):
    """Differentiable composed forward: concepts first, then aggregation.

    Returns ({concept: K-plane Tensor}, task Tensor).  `concept_override`
    maps a concept name to a fixed ndarray, supporting interventions.  In
    inference mode the aggregation stage consumes the monotone-enforced
    concept planes, so recorded concepts replay exactly."""
    concepts = {}
    for i, name in enumerate(CONCEPTS):
        if concept_override and name in concept_override:
            fixed = np.asarray(concept_override[name], dtype=np.float64)
            z = Tensor(fixed if fixed.ndim == 4 else fixed[None])
        else:
            z = submodel_apply(
                model.concept_params[name], model.concept_cfg, inputs, position,
                train=train, seed=seed * 31 + i,
            )
            if not train:
                z = Tensor(enforce_monotone(z.data, axis=1))
        concepts[name] = z
    agg_in = tc.concat([concepts[n] for n in CONCEPTS], axis=1)
    if model.bypass_latent:
        agg_in = tc.concat([agg_in, inputs], axis=1)
    y = submodel_apply(model.agg_params, model.agg_cfg, agg_in, None,
                       train=train, seed=seed * 31 + 9)
    return concepts, y


def pgcbm_forward(model: PGCBMModel, inputs: np.ndarray, position: np.ndarray,
                  mode: str = "infer", seed: int = 0,
                  concept_override: dict | None = None):
    """Numpy-level composed forward returning concept and task predictions."""
    single = inputs.ndim == 3
    if single:
        inputs = inputs[None]
        position = np.asarray(position)[None]
    train = mode == "train"
    z, y = pgcbm_apply(model, Tensor(np.asarray(inputs, dtype=np.float64)),
                       position, train=train, seed=seed,
                       concept_override=concept_override)
    out = {}
    for name in CONCEPTS:
        v = z[name].data
        if not train:
            v = enforce_monotone(v, axis=1)
        out[name] = QuantilePrediction(v[0] if single else v, model.concept_cfg.quantiles)
    yv = y.data
    if not train:
        yv = enforce_monotone(yv, axis=1)
    task = QuantilePrediction(yv[0] if single else yv, model.agg_cfg.quantiles)
    return out, task


@dataclass
class VanillaCBMModel:
    """Frozen concept sub-models feeding a median-only aggregation stage."""

    concept_cfg: SubModelConfig
    agg_cfg: SubModelConfig
    concept_params: dict
    agg_params: dict
    frozen: bool = True

    @classmethod
    def create(cls, concept_cfg: SubModelConfig | None = None, seed: int = 0) -> "VanillaCBMModel":
        ccfg = concept_cfg or SubModelConfig()
        ccfg.validate()
        acfg = replace(ccfg, input_groups=(3,), use_position=False)
        return cls(
            concept_cfg=ccfg,
            agg_cfg=acfg,
            concept_params={
                name: init_submodel_params(ccfg, seed=seed * 7919 + i)
                for i, name in enumerate(CONCEPTS)
            },
            agg_params=init_submodel_params(acfg, seed=seed * 7919 + 202),
        )

    def unfreeze_concepts(self):
        raise FrozenModelError("vanilla variant concept sub-models are static by contract")


def vanilla_apply(model: VanillaCBMModel, inputs: np.ndarray, position: np.ndarray,
                  train: bool, seed: int):
    """Concepts run in inference mode with no tape; g sees medians only."""
    if not model.frozen:
        raise FrozenModelError("vanilla concept sub-models must stay frozen")
    k = model.concept_cfg.n_quantiles
    med = k // 2
    medians = []
    for i, name in enumerate(CONCEPTS):
        pred = submodel_forward(model.concept_params[name], model.concept_cfg,
                                inputs, position, mode="infer")
        vals = pred.values if pred.values.ndim == 4 else pred.values[None]
        medians.append(vals[:, med : med + 1])
    agg_in = Tensor(np.concatenate(medians, axis=1))
    y = submodel_apply(model.agg_params, model.agg_cfg, agg_in, None,
                       train=train, seed=seed * 31 + 9)
    return y


def vanilla_forward(model: VanillaCBMModel, inputs: np.ndarray, position: np.ndarray,
                    mode: str = "infer", seed: int = 0) -> QuantilePrediction:
    single = inputs.ndim == 3
    if single:
        inputs = inputs[None]
        position = np.asarray(position)[None]
    y = vanilla_apply(model, inputs, position, train=(mode == "train"), seed=seed).data
    if mode != "train":
        y = enforce_monotone(y, axis=1)
    return QuantilePrediction(y[0] if single else y, model.agg_cfg.quantiles)


def blackbox_config(base: SubModelConfig, target_params: int,
                    tolerance: float = 0.10) -> SubModelConfig:
    """Scale channel widths so one sub-model matches the composed total.

    Searches encoder / fused / decoder width combinations (kept divisible
    by the head count and norm groups) and returns the closest match,
    provided it lands within `tolerance` of `target_params`."""
    g = base.norm_groups
    step_w = int(np.lcm(base.attention_heads, g))
    enc_opts = [base.encoder_width + g * i for i in range(0, 13)]
    w_opts = [base.width + step_w * i for i in range(0, 13)]
    best = None
    for w in w_opts:
        for e in enc_opts:
            cfg = replace(base, encoder_width=e, width=w, decoder_width=w)
            n = param_count(init_submodel_params(cfg, seed=0))
            rel = abs(n - target_params) / target_params
            if best is None or rel < best[0]:
                best = (rel, cfg)
            if n > target_params * (1 + tolerance):
                break
    if best and best[0] <= tolerance:
        return best[1]
    raise ValueError(f"no width combination reaches ±{tolerance:.0%} of {target_params} parameters")


@dataclass
class BlackboxModel:
    cfg: SubModelConfig
    params: dict

    @classmethod
    def create(cls, concept_cfg: SubModelConfig | None = None, seed: int = 0) -> "BlackboxModel":
        ccfg = concept_cfg or SubModelConfig()
        target = PGCBMModel.create(ccfg, seed=0).total_param_count()
        cfg = blackbox_config(ccfg, target)
        return cls(cfg=cfg, params=init_submodel_params(cfg, seed=seed * 7919 + 303))


def blackbox_forward(model: BlackboxModel, inputs: np.ndarray, position: np.ndarray,
                     mode: str = "infer", seed: int = 0) -> QuantilePrediction:
    return submodel_forward(model.params, model.cfg, inputs, position, mode=mode, seed=seed)


# -- checkpoint format -----------------------------------------------------

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1


def write_checkpoint(path, named_params: dict, config: dict, epoch: int,
                     val_loss: float) -> None:
    """`named_params` maps flat names to float64 ndarrays (or Tensors)."""
    from .data import fnv1a

    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    items = list(named_params.items())
    chunks.append(struct.pack("<I", len(items)))
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(cfg_bytes)))
    chunks.append(cfg_bytes)
    chunks.append(struct.pack("<Id", epoch, val_loss))
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<Q", fnv1a(payload)))


def read_checkpoint(path):
    from .data import fnv1a

    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("not a PGCK checkpoint file")
    payload, (checksum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a(payload) != checksum:
        raise CheckpointFormatError("checkpoint checksum mismatch")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 8
    (count,) = struct.unpack("<I", payload[off : off + 4])
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", payload[off : off + 2])
        off += 2
        name = payload[off : off + nlen].decode()
        off += nlen
        ndim = payload[off]
        off += 1
        shape = struct.unpack(f"<{ndim}I", payload[off : off + 4 * ndim])
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(
            payload[off : off + 8 * size], dtype="<f8"
        ).reshape(shape).copy()
        off += 8 * size
    (clen,) = struct.unpack("<I", payload[off : off + 4])
    off += 4
    config = json.loads(payload[off : off + clen].decode())
    off += clen
    epoch, val_loss = struct.unpack("<Id", payload[off : off + 12])
    return params, config, epoch, val_loss
