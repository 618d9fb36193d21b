"""Config parsing and the end-to-end training loop.

Once per epoch every cross-scale gate is redrawn from the epoch's generator;
batches are lambda-mixed, crowd samples are augmented (random crop, flips,
colour jitter), and one combined backward drives a single Adam step over
L = L_density + L_confidence + L_background. Validation MAE/MSE is measured
every epoch with eval-mode gates.

Determinism: all per-epoch randomness comes from default_rng([seed, epoch]),
so resuming from a checkpoint at epoch k replays exactly the stream an
uninterrupted run would have used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .analysis import evaluate_mae_mse
from .data import CrowdSample, augment, downsample_density
from .model import ModelSpec, ScaleTreeNet, build_model
from .optim import AdamState, adam_init, adam_step
from .supervision import (
    MixedBatch,
    compose_batch,
    downsample_label_max,
    loss_background,
    loss_confidence,
    loss_density,
    loss_total,
    make_crowd_label,
)
from .tensor import Tensor, backward, zero_grads


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    lam: float = 0.125
    d_channels: int = 18
    enhancer_count: int = 6
    head_channels: int = 32
    in_channels: int = 1
    crop: int = 64
    sigma: float = 4.0
    leaf_assignment: str = "reverse"
    block_kind: str = "tree"
    aux_levels: str = "hml"
    flip_prob: float = 0.5
    jitter: float = 0.2

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            enhancer_count=self.enhancer_count,
            d_channels=self.d_channels,
            head_channels=self.head_channels,
            in_channels=self.in_channels,
            block_kind=self.block_kind,
            leaf_assignment=self.leaf_assignment,
            aux_levels=self.aux_levels,
        )

    def as_dict(self) -> dict:
        return asdict(self)


_INT_KEYS = {"seed", "epochs", "batch_size", "d_channels", "enhancer_count",
             "head_channels", "in_channels", "crop"}
_FLOAT_KEYS = {"lr", "lam", "sigma", "flip_prob", "jitter"}
_STR_KEYS = {"leaf_assignment", "block_kind", "aux_levels"}
_PATH_KEYS = {"train_dir", "val_dir", "background_dir", "out_dir"}


def parse_config(text: str) -> Tuple[TrainConfig, dict]:
    """Parse flat "key = value" lines ('#' starts a comment; "lambda" is
    accepted as an alias for lam). Returns the train config and the path
    entries."""
    values = {}
    paths = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "lambda":
            key = "lam"
        if key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        elif key in _STR_KEYS:
            values[key] = val
        elif key in _PATH_KEYS:
            paths[key] = val
        else:
            known = sorted(_INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _PATH_KEYS | {"lambda"})
            raise ValueError(f"config line {lineno}: unknown key {key!r} (known: {known})")
    return TrainConfig(**values), paths


def config_to_text(config: TrainConfig, paths: Optional[dict] = None) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    for k, v in (paths or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class EpochLog:
    epoch: int
    loss_density: float
    loss_confidence: float
    loss_background: float
    loss_total: float
    val_mae: float
    val_mse: float

    def record_line(self) -> str:
        return (
            f"EPOCH {self.epoch} ld={self.loss_density:.6f} "
            f"lc={self.loss_confidence:.6f} lb={self.loss_background:.6f} "
            f"total={self.loss_total:.6f} val_mae={self.val_mae:.4f} "
            f"val_mse={self.val_mse:.4f}"
        )


def _batch_arrays(batch: MixedBatch, config: TrainConfig, factor: int,
                  rng: np.random.Generator):
    """Augment the drawn samples and stack them into network inputs."""
    crop = config.crop
    crowd_imgs, gts, labels = [], [], []
    for s in batch.crowd:
        a = augment(s, crop, rng, flip_prob=config.flip_prob, jitter=config.jitter)
        density = a.density_gt if a.density_gt is not None else np.zeros((crop, crop))
        crowd_imgs.append(a.image)
        gts.append(downsample_density(density, factor))
        label = make_crowd_label(density[np.newaxis, np.newaxis])
        labels.append(downsample_label_max(label, factor).map[0])
    bg_imgs = []
    for s in batch.background:
        a = augment(s, crop, rng, flip_prob=config.flip_prob, jitter=config.jitter)
        bg_imgs.append(a.image)
    crowd_x = Tensor(np.stack(crowd_imgs))
    gt = np.stack(gts)[:, np.newaxis]
    label_map = np.stack(labels)
    bg_x = Tensor(np.stack(bg_imgs)) if bg_imgs else None
    return crowd_x, gt, label_map, bg_x


def train_step(model: ScaleTreeNet, batch: MixedBatch, config: TrainConfig,
               params: Sequence[Tensor], opt_state: AdamState,
               rng: np.random.Generator) -> Tuple[float, float, float, float]:
    """Forward both sub-batches, combine the three losses, backprop, and
    apply one Adam update. Returns (ld, lc, lb, total) as floats."""
    from .supervision import CrowdLabel

    factor = model.spec.total_pool_factor
    crowd_x, gt, label_map, bg_x = _batch_arrays(batch, config, factor, rng)

    density, confidence = model.forward(crowd_x)
    ld = loss_density(density, gt, batch.lam, batch.n)
    lc = loss_confidence(confidence, CrowdLabel(label_map), batch.lam, batch.n)
    lb = None
    if bg_x is not None:
        _, bg_conf = model.forward(bg_x)
        lb = loss_background(bg_conf, batch.lam, batch.n)
    total = loss_total(ld, lc, lb)

    zero_grads(params)
    backward(total)
    adam_step(params, opt_state)
    lb_value = lb.item() if lb is not None else 0.0
    return ld.item(), lc.item(), lb_value, total.item()


def train_loop(
    config: TrainConfig,
    crowd_train: Sequence[CrowdSample],
    crowd_val: Sequence[CrowdSample],
    background_pool: Sequence[CrowdSample],
    *,
    model: Optional[ScaleTreeNet] = None,
    opt_state: Optional[AdamState] = None,
    start_epoch: int = 1,
    log_fn=None,
) -> Tuple[ScaleTreeNet, List[EpochLog]]:
    """Train for config.epochs epochs (resumable via model/opt_state/
    start_epoch). The returned log starts with an epoch-0 entry holding the
    untrained validation metrics when training starts from scratch."""
    if not crowd_train:
        raise ValueError("empty training pool")
    if model is None:
        model = build_model(config.model_spec(), seed=config.seed)
    params_by_name = model.named_parameters()
    params = list(params_by_name.values())
    if opt_state is None:
        opt_state = adam_init(params, lr=config.lr)

    logs: List[EpochLog] = []

    def emit(entry: EpochLog):
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry)

    if start_epoch == 1:
        metrics = evaluate_mae_mse(model, crowd_val) if crowd_val else None
        emit(EpochLog(0, float("nan"), float("nan"), float("nan"), float("nan"),
                      metrics.mae if metrics else float("nan"),
                      metrics.mse if metrics else float("nan")))

    crowd_per_batch = config.batch_size - (
        0 if config.lam == 0.0 else max(1, round(config.lam * config.batch_size))
    )
    steps_per_epoch = max(1, len(crowd_train) // crowd_per_batch)

    from .enhancer import resample_gates

    for epoch in range(start_epoch, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        model.train_mode()
        resample_gates(model.blocks, rng)
        sums = np.zeros(4)
        for step in range(steps_per_epoch):
            batch = compose_batch(crowd_train, background_pool,
                                  config.batch_size, config.lam, rng)
            try:
                values = train_step(model, batch, config, params, opt_state, rng)
            except FloatingPointError as e:
                raise FloatingPointError(
                    f"epoch {epoch} batch {step}: {e}"
                ) from e
            sums += np.array(values)
        means = sums / steps_per_epoch
        metrics = evaluate_mae_mse(model, crowd_val) if crowd_val else None
        emit(EpochLog(
            epoch, means[0], means[1], means[2], means[3],
            metrics.mae if metrics else float("nan"),
            metrics.mse if metrics else float("nan"),
        ))
    return model, logs
