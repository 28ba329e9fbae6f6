"""Model assembly: forward pass, region score aggregation, checkpoints.

The forward pass chains the representation stage (encode, self-attend,
pool, fuse) into the transport stage (bilinear scores, attention,
aligned features) and finishes with region score aggregation, which
turns per-patch class scores into one logit per class. Training mode
additionally produces the semantic map, the two mass distributions and
the transport loss; inference mode never touches labels.

Checkpoints hold every parameter tensor as named 32-bit little-endian
payloads after a key=value manifest of the architecture, so a saved
float32 model reloads bit-identically.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import FormatError
from .losses import AslConfig, LossWeights, classification_loss, semantic_map_loss, total_loss
from .representation import (ConfigError, EncoderConfig, EncoderParams,
                             FeatureMap, FusionParams, LabelEmbeddings,
                             SelfAttentionParams, encode, fuse_semantic,
                             global_spatial_pool, init_encoder, init_fusion,
                             init_label_embeddings, init_self_attention,
                             xavier_uniform)
from .tensor import Tensor
from .transport import (BilinearParams, backward_plan, bilinear_mass,
                        cost_matrix, ct_loss, forward_plan, init_bilinear,
                        semantic_attention, semantic_map, semantic_repr,
                        source_distribution, target_distribution)

__all__ = [
    "ClassifierParams",
    "ModelConfig",
    "ModelBundle",
    "ForwardOutput",
    "build_model",
    "forward",
    "region_score_aggregate",
    "sample_losses",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"SARLCKPT"
CKPT_VERSION = 1


@dataclass
class ClassifierParams:
    """The final per-patch classifier: weights (d_v, C), bias (C,)."""

    weights: Tensor
    bias: Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus the ablation switches."""

    num_classes: int
    feature_dim: int
    label_dim: int = 16
    bilinear_dim: int = 32
    bilinear_out: int = 16
    n_heads: int = 8
    gsp_mode: str = "avg"
    encoder: EncoderConfig = None
    disable_self_attn: bool = False
    disable_ot: bool = False
    disable_gsp_fusion: bool = False

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        if self.encoder is not None and self.encoder.feature_dim != self.feature_dim:
            raise ConfigError(
                f"encoder feature_dim {self.encoder.feature_dim} != "
                f"model feature_dim {self.feature_dim}")


@dataclass
class ForwardOutput:
    """Everything one forward pass produces.

    attention and aligned exist whenever transport is enabled;
    semantic_map, theta, beta, cost, plans and transport_cost exist only
    in training mode.
    """

    logits: Tensor
    features: FeatureMap
    semantic_features: Tensor
    aligned: Tensor
    attention: Tensor = None
    semantic_map: Tensor = None
    theta: Tensor = None
    beta: Tensor = None
    cost: Tensor = None
    plans: tuple = None
    transport_cost: Tensor = None


@dataclass
class ModelBundle:
    """All parameter groups plus the config that shaped them."""

    config: ModelConfig
    encoder: EncoderParams
    labels: LabelEmbeddings
    attention: SelfAttentionParams
    fusion: FusionParams
    map_weights: Tensor
    bilinear: BilinearParams
    classifier: ClassifierParams

    def parameters(self) -> dict:
        """Name -> Tensor, in a fixed order shared with checkpoints."""
        named = {}
        for i, (kern, bias) in enumerate(zip(self.encoder.kernels,
                                             self.encoder.biases)):
            named[f"encoder.kernel{i}"] = kern
            named[f"encoder.bias{i}"] = bias
        named["labels.table"] = self.labels.l
        named["attention.w_q"] = self.attention.w_q
        named["attention.w_k"] = self.attention.w_k
        named["attention.w_v"] = self.attention.w_v
        named["fusion.weight"] = self.fusion.weight
        named["fusion.bias"] = self.fusion.bias
        named["map.weights"] = self.map_weights
        named["bilinear.u"] = self.bilinear.u
        named["bilinear.v"] = self.bilinear.v
        named["bilinear.mix"] = self.bilinear.mix
        named["bilinear.bias"] = self.bilinear.bias
        named["bilinear.score"] = self.bilinear.score
        named["classifier.weights"] = self.classifier.weights
        named["classifier.bias"] = self.classifier.bias
        return named


def build_model(cfg: ModelConfig, seed=0, dtype=np.float64) -> ModelBundle:
    """Initialize every parameter group from one seeded stream."""
    if cfg.encoder is None:
        raise ConfigError("model config needs an encoder config")
    rng = np.random.default_rng(seed)
    d_v = cfg.feature_dim
    if cfg.encoder.mode == "tiny-conv":
        enc = init_encoder(rng, cfg.encoder, dtype)
    else:
        enc = EncoderParams([], [])
    labels = init_label_embeddings(rng, cfg.num_classes, cfg.label_dim,
                                   dtype=dtype)
    attention = init_self_attention(rng, d_v, cfg.n_heads, dtype)
    fusion = init_fusion(rng, d_v, cfg.label_dim, dtype)
    map_weights = xavier_uniform(rng, d_v, cfg.num_classes, dtype)
    bilinear = init_bilinear(rng, d_v, cfg.bilinear_dim, cfg.bilinear_out,
                             dtype)
    classifier = ClassifierParams(
        xavier_uniform(rng, d_v, cfg.num_classes, dtype),
        Tensor(np.zeros(cfg.num_classes, dtype=dtype)),
    )
    return ModelBundle(cfg, enc, labels, attention, fusion, map_weights,
                       bilinear, classifier)


def region_score_aggregate(f_r: Tensor, cls: ClassifierParams) -> Tensor:
    """Pool patch scores into class logits.

    Patch scores w~ = F_R W + b are weighted by their own per-class
    softmax over patches: z_c = sum_p softmax_p(w~)[p, c] * w~[p, c].
    Adding a constant to one class's patch scores therefore shifts that
    logit by exactly the constant.
    """
    scores = T.add(T.matmul(f_r, cls.weights), cls.bias)
    weights = T.softmax(scores, axis=0)
    return T.sum_(T.mul(weights, scores), axis=0)


def forward(x, model: ModelBundle, labels=None, train=False) -> ForwardOutput:
    """Run one sample through the full head.

    x is an (H, W, channels) image or a precomputed patch grid,
    whichever the encoder config says. Training mode needs the sample's
    binary label vector for the source and target distributions.
    """
    cfg = model.config
    if train and labels is None:
        raise ValueError("training mode needs the sample labels")

    fm = encode(x, cfg.encoder, model.encoder)
    if not cfg.disable_self_attn:
        fm = self_attention_step(fm, model)

    if cfg.disable_gsp_fusion:
        f_g = Tensor(np.zeros(cfg.feature_dim, dtype=fm.f.dtype))
    else:
        f_g = global_spatial_pool(fm, cfg.gsp_mode)
    f_s = fuse_semantic(f_g, model.labels, model.fusion)

    if cfg.disable_ot:
        logits = region_score_aggregate(fm.f, model.classifier)
        return ForwardOutput(logits=logits, features=fm,
                             semantic_features=f_s, aligned=fm.f)

    mass = bilinear_mass(fm.f, f_s, model.bilinear)
    attn = semantic_attention(mass)
    aligned = semantic_repr(attn, f_s)
    logits = region_score_aggregate(aligned, model.classifier)
    out = ForwardOutput(logits=logits, features=fm, semantic_features=f_s,
                        aligned=aligned, attention=attn)
    if train:
        out.semantic_map = semantic_map(fm.f, model.map_weights)
        out.theta = source_distribution(out.semantic_map, labels)
        out.beta = target_distribution(labels)
        out.cost = cost_matrix(fm.f, f_s)
        fwd = forward_plan(mass, out.theta)
        bwd = backward_plan(mass, out.beta)
        out.plans = (fwd, bwd)
        out.transport_cost = ct_loss(fwd, bwd, out.cost)
    return out


def self_attention_step(fm: FeatureMap, model: ModelBundle) -> FeatureMap:
    from .representation import self_attention
    return self_attention(fm, model.attention)


def sample_losses(out: ForwardOutput, labels, asl_cfg: AslConfig,
                  weights: LossWeights):
    """Per-sample (total, l_cls, l_m, l_ot) given a training-mode forward.

    With transport disabled the map and transport terms are zero and the
    total is the classification loss alone.
    """
    l_cls = classification_loss(out.logits, labels, asl_cfg)
    if out.transport_cost is None:
        zero = Tensor(np.zeros((), dtype=out.logits.dtype))
        return l_cls, l_cls, zero, zero
    l_m = semantic_map_loss(out.semantic_map, labels, asl_cfg)
    total = total_loss(l_cls, l_m, out.transport_cost, weights)
    return total, l_cls, l_m, out.transport_cost


def _manifest_text(cfg: ModelConfig) -> str:
    enc = cfg.encoder
    pairs = [
        ("num_classes", cfg.num_classes),
        ("feature_dim", cfg.feature_dim),
        ("label_dim", cfg.label_dim),
        ("bilinear_dim", cfg.bilinear_dim),
        ("bilinear_out", cfg.bilinear_out),
        ("n_heads", cfg.n_heads),
        ("gsp_mode", cfg.gsp_mode),
        ("disable_self_attn", int(cfg.disable_self_attn)),
        ("disable_ot", int(cfg.disable_ot)),
        ("disable_gsp_fusion", int(cfg.disable_gsp_fusion)),
        ("encoder.in_channels", enc.in_channels),
        ("encoder.grid_h", enc.grid_h),
        ("encoder.grid_w", enc.grid_w),
        ("encoder.conv_blocks", enc.conv_blocks),
        ("encoder.mode", enc.mode),
    ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _config_from_manifest(text: str) -> ModelConfig:
    entries = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            entries[key] = value
    try:
        encoder = EncoderConfig(
            in_channels=int(entries["encoder.in_channels"]),
            grid_h=int(entries["encoder.grid_h"]),
            grid_w=int(entries["encoder.grid_w"]),
            feature_dim=int(entries["feature_dim"]),
            conv_blocks=int(entries["encoder.conv_blocks"]),
            mode=entries["encoder.mode"],
        )
        return ModelConfig(
            num_classes=int(entries["num_classes"]),
            feature_dim=int(entries["feature_dim"]),
            label_dim=int(entries["label_dim"]),
            bilinear_dim=int(entries["bilinear_dim"]),
            bilinear_out=int(entries["bilinear_out"]),
            n_heads=int(entries["n_heads"]),
            gsp_mode=entries["gsp_mode"],
            encoder=encoder,
            disable_self_attn=bool(int(entries["disable_self_attn"])),
            disable_ot=bool(int(entries["disable_ot"])),
            disable_gsp_fusion=bool(int(entries["disable_gsp_fusion"])),
        )
    except KeyError as missing:
        raise FormatError(f"checkpoint manifest missing {missing}") from None


def save_checkpoint(path, model: ModelBundle):
    """Write the manifest and every parameter as float32 little-endian."""
    manifest = _manifest_text(model.config).encode()
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<2I", CKPT_VERSION, len(manifest)))
    buf.write(manifest)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        shape = tensor.data.shape
        buf.write(struct.pack("<I", len(shape)))
        if shape:
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(tensor.data.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelBundle:
    """Rebuild a float32 model from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)

    def take(n, what):
        data = view.read(n)
        if len(data) != n:
            raise FormatError(
                f"truncated {what}: wanted {n} bytes at offset "
                f"{view.tell() - len(data)}, got {len(data)}")
        return data

    magic = take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    version, manifest_len = struct.unpack("<2I", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg = _config_from_manifest(take(manifest_len, "manifest").decode())
    model = build_model(cfg, seed=0, dtype=np.float32)
    params = model.parameters()
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    if count != len(params):
        raise FormatError(
            f"checkpoint has {count} tensors, model wants {len(params)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode()
        if name not in params:
            raise FormatError(f"unknown tensor {name!r} in checkpoint")
        (ndim,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape")) if ndim else ()
        want = params[name].data.shape
        if shape != want:
            raise FormatError(f"tensor {name!r} has shape {shape}, model wants {want}")
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = np.frombuffer(take(4 * size, f"payload of {name!r}"),
                                dtype="<f4")
        params[name].data = payload.reshape(shape).copy()
    if view.read(1):
        raise FormatError("trailing data after last tensor")
    return model
