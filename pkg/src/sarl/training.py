"""Training loop, optimizer, evaluation, and attention export.

Everything runs in float32 so that a saved checkpoint reloads into an
evaluation that is bit-identical to the one before saving. One tape per
sample, gradients averaged over the batch, AdamW with decoupled weight
decay, and an optional EMA shadow of every parameter. Shuffling draws
from a dedicated seeded stream, so two runs with the same config produce
identical epoch logs and identical checkpoints.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .data import Dataset, SyntheticConfig, read_manifest, write_manifest
from .head import (ModelBundle, ModelConfig, build_model, forward,
                   sample_losses, save_checkpoint)
from .losses import AslConfig, LossWeights
from .metrics import (MetricReport, PredictionSet, compute_report,
                      format_report, report_entries, write_predictions)
from .representation import EncoderConfig
from .tensor import Tape
from .transport import semantic_map

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingError",
    "TrainResult",
    "preset",
    "config_from_file",
    "config_entries",
    "synthetic_config",
    "model_config",
    "init_optimizer",
    "adamw_step",
    "ema_update",
    "train",
    "evaluate",
    "export_attention",
    "write_pgm",
]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training aborted; the message names the offending tensor."""


@dataclass
class TrainConfig:
    """Every knob for one run: data, architecture, optimization, ablations."""

    # data
    seed: int = 0
    n_train: int = 500
    n_test: int = 200
    num_classes: int = 6
    image_size: int = 8
    channels: int = 3
    signal: float = 3.0
    noise: float = 0.5
    cardinality: float = 1.5
    # architecture
    feature_dim: int = 32
    label_dim: int = 16
    bilinear_dim: int = 32
    bilinear_out: int = 16
    n_heads: int = 8
    gsp_mode: str = "avg"
    conv_blocks: int = 2
    # optimization
    lr: float = 2e-3
    batch_size: int = 16
    epochs: int = 50
    weight_decay: float = 1e-4
    lambda1: float = 0.04
    lambda2: float = 0.5
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    clip: float = 0.05
    use_ema: bool = True
    ema_decay: float = 0.9997
    # ablations
    disable_self_attn: bool = False
    disable_ot: bool = False
    disable_gsp_fusion: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay {self.ema_decay} outside [0, 1]")


PRESETS = {
    # batch sizes and learning rates quoted from the source protocols;
    # the synthetic task and model sizes stay at desk scale
    "voc2007": dict(lr=9e-5, batch_size=64, lambda1=0.04, lambda2=0.5),
    "ms-coco": dict(lr=5e-5, batch_size=52, lambda1=0.2, lambda2=0.5),
}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, have {sorted(PRESETS)}")
    return replace(TrainConfig(), **PRESETS[name])


def _parse_field(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return type(current)(value)


def config_from_file(path, base: TrainConfig = None) -> TrainConfig:
    """Read key=value lines into a TrainConfig; unknown keys are errors."""
    base = base if base is not None else TrainConfig()
    entries = read_manifest(path)
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for key, value in entries.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _parse_field(value, getattr(base, key))
    return replace(base, **updates)


def config_entries(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}


def synthetic_config(cfg: TrainConfig) -> SyntheticConfig:
    return SyntheticConfig(
        seed=cfg.seed, n_train=cfg.n_train, n_test=cfg.n_test,
        num_classes=cfg.num_classes, height=cfg.image_size,
        width=cfg.image_size, channels=cfg.channels, signal=cfg.signal,
        noise=cfg.noise, cardinality=cfg.cardinality)


def _conv_output_size(size, blocks):
    for _ in range(blocks):
        size = (size - 1) // 2 + 1
    return size


def model_config(cfg: TrainConfig) -> ModelConfig:
    grid = _conv_output_size(cfg.image_size, cfg.conv_blocks)
    encoder = EncoderConfig(
        in_channels=cfg.channels, grid_h=grid, grid_w=grid,
        feature_dim=cfg.feature_dim, conv_blocks=cfg.conv_blocks)
    return ModelConfig(
        num_classes=cfg.num_classes, feature_dim=cfg.feature_dim,
        label_dim=cfg.label_dim, bilinear_dim=cfg.bilinear_dim,
        bilinear_out=cfg.bilinear_out, n_heads=cfg.n_heads,
        gsp_mode=cfg.gsp_mode, encoder=encoder,
        disable_self_attn=cfg.disable_self_attn,
        disable_ot=cfg.disable_ot,
        disable_gsp_fusion=cfg.disable_gsp_fusion)


def asl_config(cfg: TrainConfig) -> AslConfig:
    return AslConfig(gamma_pos=cfg.gamma_pos, gamma_neg=cfg.gamma_neg,
                     clip=cfg.clip)


def loss_weights(cfg: TrainConfig) -> LossWeights:
    lambda2 = 0.0 if cfg.disable_ot else cfg.lambda2
    return LossWeights(lambda1=cfg.lambda1, lambda2=lambda2)


@dataclass
class OptimizerState:
    """First/second moment buffers mirroring the parameter dict."""

    m: dict
    v: dict
    step: int = 0


def init_optimizer(params: dict) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr,
               betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place on params."""
    b1, b2 = betas
    state.step += 1
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def ema_update(shadow: dict, params: dict, decay):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, p in params.items():
        shadow[name] = decay * shadow[name] + (1.0 - decay) * p.data
    return shadow


@dataclass
class TrainResult:
    model: ModelBundle
    history: list
    report: MetricReport
    predictions: PredictionSet
    shadow: dict = None


def _first_non_finite(tape: Tape, params: dict) -> str:
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            return f"parameter {name}"
    for t in tape.tensors():
        if not np.isfinite(t.data).all():
            return f"op {t.op!r} output of shape {t.data.shape}"
    return "loss"


def train(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
          log=None, out_dir=None) -> TrainResult:
    """Run the full optimization and evaluate on the test split.

    Logs one line per epoch with the total loss and its three
    components, all averaged over the epoch's samples. When out_dir is
    given, writes model.ckpt (and model_ema.ckpt), predictions.txt and
    metrics.txt there.
    """
    say = log if log is not None else (lambda line: None)
    mcfg = model_config(cfg)
    acfg = asl_config(cfg)
    weights = loss_weights(cfg)
    model = build_model(mcfg, seed=cfg.seed, dtype=np.float32)
    params = model.parameters()
    state = init_optimizer(params)
    shadow = ({name: p.data.copy() for name, p in params.items()}
              if cfg.use_ema else None)
    shuffle_rng = np.random.default_rng([cfg.seed, 0x5EED])
    n = len(train_ds)
    images = train_ds.payload
    labels = train_ds.labels.astype(np.float64)

    for key, value in sorted(config_entries(cfg).items()):
        say(f"config {key}={value}")

    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"total": 0.0, "cls": 0.0, "map": 0.0, "ot": 0.0}
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            grad_sum = {name: np.zeros_like(p.data)
                        for name, p in params.items()}
            for i in batch:
                with Tape() as tape:
                    out = forward(images[i], model, labels=labels[i],
                                  train=True)
                    total, l_cls, l_m, l_ot = sample_losses(
                        out, labels[i], acfg, weights)
                    if not np.isfinite(total.data):
                        raise TrainingError(
                            "non-finite loss; first bad tensor: "
                            + _first_non_finite(tape, params))
                    tape.backward(total)
                for name, p in params.items():
                    if p.grad is not None:
                        grad_sum[name] += p.grad
                sums["total"] += total.item()
                sums["cls"] += l_cls.item()
                sums["map"] += l_m.item()
                sums["ot"] += l_ot.item()
            grads = {name: g / len(batch) for name, g in grad_sum.items()}
            adamw_step(params, grads, state, cfg.lr,
                       weight_decay=cfg.weight_decay)
            if shadow is not None:
                ema_update(shadow, params, cfg.ema_decay)
        means = {key: value / n for key, value in sums.items()}
        history.append({"epoch": epoch, **means})
        say(f"epoch {epoch:3d}  loss {means['total']:.6f}  "
            f"cls {means['cls']:.6f}  map {means['map']:.6f}  "
            f"ot {means['ot']:.6f}")

    report, preds = evaluate(model, test_ds)
    say(f"final test mAP {report.mean_ap:.4f}")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model)
        if shadow is not None:
            ema = shadow_model(model, shadow)
            save_checkpoint(os.path.join(out_dir, "model_ema.ckpt"), ema)
        write_predictions(os.path.join(out_dir, "predictions.txt"), preds)
        write_manifest(os.path.join(out_dir, "metrics.txt"),
                       report_entries(report))
        say(format_report(report))
    return TrainResult(model, history, report, preds, shadow)


def shadow_model(model: ModelBundle, shadow: dict) -> ModelBundle:
    """A fresh bundle carrying the EMA weights; training weights untouched."""
    twin = build_model(model.config, seed=0,
                       dtype=next(iter(shadow.values())).dtype)
    for name, p in twin.parameters().items():
        p.data = shadow[name].copy()
    return twin


def evaluate(model: ModelBundle, ds: Dataset):
    """Score every sample (inference mode) and build the metric report."""
    n = len(ds)
    num_c = model.config.num_classes
    if ds.num_classes != num_c:
        raise ValueError(
            f"dataset has {ds.num_classes} classes, model wants {num_c}")
    scores = np.zeros((n, num_c))
    for i in range(n):
        out = forward(ds.payload[i], model)
        scores[i] = T.sigmoid(out.logits).data
    preds = PredictionSet(scores, ds.labels.astype(np.uint8))
    return compute_report(preds), preds


def export_attention(model: ModelBundle, x, class_id, map_path, attn_path):
    """Write the semantic-map and attention columns for one class as PGM.

    The class's column over patches is reshaped to the patch grid and
    min-max scaled to [0, 255]; a constant column becomes all black.
    """
    if not 0 <= class_id < model.config.num_classes:
        raise ValueError(f"class {class_id} out of range")
    out = forward(x, model)
    grid_h, grid_w = out.features.h, out.features.w
    m = semantic_map(out.features, model.map_weights).data[:, class_id]
    write_pgm(map_path, m.reshape(grid_h, grid_w))
    if out.attention is None:
        raise ValueError("transport is disabled; no attention to export")
    b = out.attention.data[:, class_id]
    write_pgm(attn_path, b.reshape(grid_h, grid_w))


def write_pgm(path, grid):
    """Binary PGM (P5), min-max normalized; zero-range grids become black."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        scaled = np.round((grid - lo) * (255.0 / (hi - lo)))
    else:
        scaled = np.zeros_like(grid)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.astype(np.uint8).tobytes())
