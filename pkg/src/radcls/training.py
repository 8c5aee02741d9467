"""Loss, optimizer, learning-rate schedule, and the per-fold training loop."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from . import imaging, network
from .dataset import FoldAssignment, ImageRecord, Manifest
from .imaging import AugmentSpec, PreprocessOptions
from .metrics import Prediction
from .network import ModelConfig

LOG_HEADER = ["epoch", "train_loss", "val_loss", "val_accuracy"]


class TrainingDivergedError(RuntimeError):
    """The training loss stopped being finite."""


class ConfigFileError(ValueError):
    """A training config file contains an unknown key or a bad value."""


@dataclass
class ScheduleConfig:
    """Cosine annealing with warm restarts.

    ``cycle_steps`` and ``warmup_steps`` left as None are resolved once the
    dataset size is known: ten epochs' worth of batches per cycle, one
    epoch's worth of warmup.
    """

    cycle_steps: int | None = None
    warmup_steps: int | None = None
    lr_min: float = 1e-5
    cycle_mult: float = 1.0
    decay_gamma: float = 1.0

    def __post_init__(self):
        if self.cycle_steps is not None and self.cycle_steps < 1:
            raise ValueError(f"cycle_steps must be >= 1, got {self.cycle_steps}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if (self.cycle_steps is not None and self.warmup_steps is not None
                and self.warmup_steps >= self.cycle_steps):
            raise ValueError("warmup_steps must be smaller than cycle_steps")
        if self.lr_min < 0:
            raise ValueError(f"lr_min must be >= 0, got {self.lr_min}")
        if self.cycle_mult < 1:
            raise ValueError(f"cycle_mult must be >= 1, got {self.cycle_mult}")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")

    def resolved(self, steps_per_epoch: int) -> "ScheduleConfig":
        cycle = self.cycle_steps if self.cycle_steps is not None \
            else max(2, 10 * steps_per_epoch)
        warmup = self.warmup_steps if self.warmup_steps is not None \
            else min(steps_per_epoch, cycle - 1)
        return replace(self, cycle_steps=cycle, warmup_steps=warmup)


@dataclass
class TrainConfig:
    lr_max: float = 0.01
    batch_size: int = 8
    epochs: int = 50
    momentum: float = 0.9
    dropout_p: float = 0.2
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError(f"lr_max must be positive, got {self.lr_max}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    Uses the max-subtraction stabilization, so logits with magnitude up to
    1e4 neither overflow nor underflow to NaN.  Accepts a torch tensor
    (stays differentiable, returns a 0-dim tensor) or any array-like
    (returns a float).
    """
    as_tensor = isinstance(logits, torch.Tensor)
    z = logits if as_tensor else torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-d (N, C), got shape {tuple(z.shape)}")
    idx = []
    for lab in labels:
        lab = int(lab)
        if lab not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {lab}")
        idx.append(lab)
    if len(idx) != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {len(idx)} labels")
    shifted = z - z.detach().amax(dim=1, keepdim=True)
    log_p = shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))
    loss = -log_p[torch.arange(z.shape[0]), torch.as_tensor(idx)].mean()
    return loss if as_tensor else float(loss)


def sgd_step(params: dict, grads: dict, lr: float, momentum: float,
             state: dict | None = None) -> tuple[dict, dict]:
    """One momentum-SGD update, pure in its inputs.

    velocity <- momentum * velocity + grad;  param <- param - lr * velocity.
    Parameters without a gradient (e.g. running statistics) pass through
    unchanged.  Works on numpy arrays and torch tensors alike.
    """
    state = {} if state is None else state
    next_params = dict(params)
    next_state = dict(state)
    for name, grad in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter '{name}'")
        param = params[name]
        if tuple(param.shape) != tuple(grad.shape):
            raise ValueError(
                f"shape mismatch for parameter '{name}': "
                f"param {tuple(param.shape)} vs grad {tuple(grad.shape)}"
            )
        velocity = state.get(name)
        velocity = grad if velocity is None else momentum * velocity + grad
        next_params[name] = param - lr * velocity
        next_state[name] = velocity
    return next_params, next_state


def lr_at(step: int, s: ScheduleConfig, lr_max: float) -> float:
    """Learning rate at a global step under warm cosine restarts.

    Each cycle ramps linearly from lr_min to its peak over the warmup
    steps, then follows a half cosine from the peak back down to lr_min.
    Cycle lengths grow by cycle_mult, peaks decay by decay_gamma.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if s.cycle_steps is None or s.warmup_steps is None:
        raise ValueError("schedule is unresolved; call resolved() first")
    cycle = 0
    remaining = step
    while True:
        length = max(1, round(s.cycle_steps * s.cycle_mult ** cycle))
        if remaining < length:
            break
        remaining -= length
        cycle += 1
    peak = lr_max * s.decay_gamma ** cycle
    if remaining < s.warmup_steps:
        return s.lr_min + (peak - s.lr_min) * (remaining / s.warmup_steps)
    t = remaining - s.warmup_steps
    span = length - s.warmup_steps
    return s.lr_min + 0.5 * (peak - s.lr_min) * (1.0 + math.cos(math.pi * t / span))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    log: list[EpochStats]


def write_training_log(path, log: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_HEADER)
        for row in log:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss),
                             repr(row.val_accuracy)])


def _mix_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


def _shuffle_rng(*parts):
    import random

    return random.Random("|".join(str(p) for p in parts))


def _load_inputs(records: list[ImageRecord], input_size: int,
                 opts: PreprocessOptions) -> dict[str, np.ndarray]:
    cache: dict[str, np.ndarray] = {}
    for rec in records:
        try:
            img = imaging.load_gray(rec.image_path)
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read image '{rec.image_path}': {exc}") from exc
        cache[rec.key] = imaging.preprocess(img, rec.roi_box, input_size, opts)
    return cache


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _forward_batch(model, cache, records, augment_spec, train_cfg, epoch):
    planes = []
    labels = []
    for rec in records:
        img = cache[rec.key]
        if augment_spec is not None:
            img = imaging.augment(img, augment_spec,
                                  _mix_seed(train_cfg.seed, rec.key, epoch))
        planes.append(imaging.normalize(img))
        labels.append(rec.label.index)
    x = torch.from_numpy(np.stack(planes)[:, None, :, :])
    logits = model(x)
    return logits, labels


def train_fold(manifest: Manifest, folds: FoldAssignment, fold_i: int,
               model_cfg: ModelConfig, train_cfg: TrainConfig,
               preprocess_opts: PreprocessOptions | None = None,
               progress=None) -> TrainResult:
    """Train on every subject outside fold ``fold_i``, validating on it.

    Per image: ROI crop, CLAHE, resize to the model input, then (training
    side only) random augmentation, then normalization to [-1, 1].  The
    geometric part is computed once and cached; augmentation is re-drawn
    each epoch from a seed mixing (run seed, record key, epoch), so results
    do not depend on iteration order.  Returns the parameters from the
    epoch with the lowest validation loss.
    """
    if not 0 <= fold_i < folds.k:
        raise ValueError(f"fold {fold_i} out of range 0..{folds.k - 1}")
    opts = preprocess_opts or PreprocessOptions()
    model_cfg = replace(model_cfg, dropout_p=train_cfg.dropout_p,
                        cbam=replace(model_cfg.cbam))
    train_subjects = set(folds.train_subjects(fold_i))
    val_subjects = set(folds.test_subjects(fold_i))
    train_records = [r for r in manifest if r.subject_id in train_subjects]
    val_records = [r for r in manifest if r.subject_id in val_subjects]
    if not train_records or not val_records:
        raise ValueError(f"fold {fold_i} leaves an empty train or validation side")

    cache = _load_inputs(train_records + val_records, model_cfg.input_size, opts)
    steps_per_epoch = math.ceil(len(train_records) / train_cfg.batch_size)
    schedule = train_cfg.schedule.resolved(steps_per_epoch)

    torch.manual_seed(_mix_seed(train_cfg.seed, "fold", fold_i))
    model = network.build_model(
        model_cfg, seed=_mix_seed(train_cfg.seed, "init", fold_i))

    best_params: dict[str, np.ndarray] | None = None
    best_epoch = -1
    best_val_loss = math.inf
    log: list[EpochStats] = []
    velocity: dict = {}
    global_step = 0
    for epoch in range(train_cfg.epochs):
        order = list(train_records)
        _shuffle_rng(train_cfg.seed, "order", fold_i, epoch).shuffle(order)
        model.train()
        loss_sum = 0.0
        for batch in _batches(order, train_cfg.batch_size):
            logits, labels = _forward_batch(
                model, cache, batch, train_cfg.augment, train_cfg, epoch)
            loss = cross_entropy(logits, labels)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"training loss is not finite at step {global_step}")
            named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
            grads = torch.autograd.grad(loss, [p for _, p in named])
            lr = lr_at(global_step, schedule, train_cfg.lr_max)
            params = {n: p.detach() for n, p in named}
            new_params, velocity = sgd_step(
                params, dict(zip([n for n, _ in named], grads)),
                lr, train_cfg.momentum, velocity)
            with torch.no_grad():
                for n, p in named:
                    p.copy_(new_params[n])
            loss_sum += loss_val * len(batch)
            global_step += 1
        train_loss = loss_sum / len(train_records)

        val_loss, val_accuracy, _ = _evaluate(model, cache, val_records,
                                              train_cfg.batch_size)
        stats = EpochStats(epoch, train_loss, val_loss, val_accuracy)
        log.append(stats)
        if progress is not None:
            progress(stats)
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_epoch = epoch
            best_params = network.params_of(model)
    return TrainResult(model_cfg, best_params, best_epoch, best_val_loss, log)


def _evaluate(model, cache, records, batch_size):
    model.eval()
    loss_sum = 0.0
    correct = 0
    scores: list[float] = []
    with torch.no_grad():
        for batch in _batches(records, batch_size):
            planes = [imaging.normalize(cache[r.key]) for r in batch]
            labels = [r.label.index for r in batch]
            x = torch.from_numpy(np.stack(planes)[:, None, :, :])
            logits = model(x)
            loss_sum += float(cross_entropy(logits, labels)) * len(batch)
            probs = torch.softmax(logits, dim=1)
            scores.extend(float(v) for v in probs[:, 1])
            correct += int((logits.argmax(dim=1)
                            == torch.as_tensor(labels)).sum())
    return loss_sum / len(records), correct / len(records), scores


def predict_records(model_cfg: ModelConfig, params: dict[str, np.ndarray],
                    records: list[ImageRecord],
                    preprocess_opts: PreprocessOptions | None = None,
                    batch_size: int = 8) -> list[Prediction]:
    """Score records with a trained model; score is the tear-class probability."""
    opts = preprocess_opts or PreprocessOptions()
    model = network.build_model(model_cfg, params=params)
    cache = _load_inputs(records, model_cfg.input_size, opts)
    _, _, scores = _evaluate(model, cache, records, batch_size)
    return [
        Prediction(str(rec.image_path), rec.subject_id, rec.label.index, score)
        for rec, score in zip(records, scores)
    ]


_CONFIG_PARSERS: dict[str, tuple] = {}


def _bool_of(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _int_list_of(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _register_config_keys():
    def add(prefix, cls, parsers):
        for f in fields(cls):
            if f.name in parsers:
                _CONFIG_PARSERS[prefix + f.name] = (prefix, f.name, parsers[f.name])

    add("", TrainConfig, {
        "lr_max": float, "batch_size": int, "epochs": int,
        "momentum": float, "dropout_p": float, "seed": int,
    })
    add("schedule.", ScheduleConfig, {
        "cycle_steps": int, "warmup_steps": int, "lr_min": float,
        "cycle_mult": float, "decay_gamma": float,
    })
    add("augment.", AugmentSpec, {
        "rotation_deg": float, "hflip_prob": float, "crop_fraction": float,
        "scale_lo": float, "scale_hi": float, "translate_fraction": float,
        "brightness_delta": float, "invert_prob": float,
        "enable_rotation": _bool_of, "enable_hflip": _bool_of,
        "enable_crop": _bool_of, "enable_scale": _bool_of,
        "enable_translate": _bool_of, "enable_brightness": _bool_of,
        "enable_invert": _bool_of,
    })
    add("model.", ModelConfig, {
        "stage_block_counts": _int_list_of, "stage_channels": _int_list_of,
        "num_classes": int, "dropout_p": float, "input_size": int,
        "cbam_per_block": _bool_of,
    })
    add("model.cbam.", network.CbamConfig, {
        "reduction_ratio": int, "spatial_kernel": int,
    })


_register_config_keys()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse flat key=value lines into typed values keyed by dotted path."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key=value, got '{line}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_PARSERS:
            known = ", ".join(sorted(_CONFIG_PARSERS))
            raise ConfigFileError(f"{source}:{lineno}: unknown key '{key}' "
                                  f"(valid keys: {known})")
        _, _, parser = _CONFIG_PARSERS[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigFileError(f"{source}:{lineno}: bad value for '{key}': {exc}") \
                from exc
    return values


def configs_from_values(values: dict[str, object],
                        model_base: ModelConfig | None = None) -> tuple[TrainConfig, ModelConfig]:
    """Build TrainConfig and ModelConfig from parsed key=value pairs."""
    groups: dict[str, dict[str, object]] = {"": {}, "schedule.": {}, "augment.": {},
                                            "model.": {}, "model.cbam.": {}}
    for key, value in values.items():
        prefix, name, _ = _CONFIG_PARSERS[key]
        groups[prefix][name] = value

    base = model_base or ModelConfig()
    try:
        cbam = replace(base.cbam, **groups["model.cbam."])
        model_cfg = replace(base, cbam=cbam, **groups["model."])
        train_cfg = TrainConfig(
            schedule=ScheduleConfig(**groups["schedule."]),
            augment=replace(AugmentSpec(), **groups["augment."]),
            **groups[""],
        )
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc
    return train_cfg, model_cfg


def load_config_file(path, model_base: ModelConfig | None = None) -> tuple[TrainConfig, ModelConfig]:
    with open(path) as f:
        text = f.read()
    return configs_from_values(parse_config_text(text, source=str(path)), model_base)
