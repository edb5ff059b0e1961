"""Pre-training and fine-tuning loops, AdamW, warmup + cosine schedule, flips."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from .checkpoint import save_checkpoint
from .data.ops import flip_sample
from .data.store import Dataset, Sample
from .errors import GeometryMismatchError, NonFiniteError, RangeError, UnknownBandError, ValidationError
from .masking import MaskPlan, batch_masks
from .model.usat import ModelSpec, USatModel, bce_with_logits, softmax_cross_entropy
from .patch_embed import TokenLayout, patchify

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValidationError("warmup_epochs must lie in [0, total_epochs]")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at the final step."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise RangeError(f"step {step} outside [0, {total}]")
    if step < warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only: biases, norms and the mask token are exempt."""
    return value.ndim >= 2 and ".norm" not in name


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def optimizer_step(params: dict, grads: dict, moments: tuple[dict, dict], step: int, lr: float, wd: float,
                   beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> dict:
    """One AdamW update in place.  ``step`` counts from 1.  Parameters without
    a gradient are left alone."""
    m, v = moments
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    updates = {}
    for name, g in grads.items():
        p = params[name]
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        upd = lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
        if wd and decays(name, p):
            upd = upd + lr * wd * p
        if not np.all(np.isfinite(upd)):
            raise NonFiniteError(f"non-finite update for {name}")
        updates[name] = upd
    for name, upd in updates.items():
        params[name] -= upd.astype(params[name].dtype)
    return params


@dataclass
class AdamW:
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"weight_decay": self.weight_decay, "betas": list(self.betas), "eps": self.eps,
                "clip_norm": self.clip_norm}

    def update(self, params: dict, grads: dict, lr: float) -> float:
        norm = clip_global_norm(grads, self.clip_norm)
        self.step += 1
        optimizer_step(params, grads, (self.m, self.v), self.step, lr, self.weight_decay,
                       self.betas[0], self.betas[1], self.eps)
        return norm


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def augment_flips(bands: dict, rng: np.random.Generator, p: float = 0.5) -> dict:
    """Random horizontal and vertical flips applied identically to every band."""
    h = bool(rng.random() < p)
    v = bool(rng.random() < p)
    if not (h or v):
        return dict(bands)
    return flip_sample(bands, h, v)


def batch_patches(dataset: Dataset, samples: Sequence[Sample], layout: TokenLayout,
                  rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Normalised, optionally flipped, patchified bands: ``{key: [B, p^2, s^2]}``."""
    keys = layout.band_keys
    per = []
    for s in samples:
        missing = [k for k in keys if k not in s.bands]
        if missing:
            raise UnknownBandError(f"sample {s.id} lacks bands {missing}")
        bands = dataset.normalize(s, keys)
        if rng is not None:
            bands = augment_flips(bands, rng)
        per.append(bands)
    out = {}
    for g, ks in zip(layout.groups, layout.bands):
        for k in ks:
            out[k] = patchify(np.stack([b[k] for b in per]), g.patch_count, g.patch_size)
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    mode: str = "pretrain"
    bands: tuple[str, ...] | None = None
    sensors: tuple[str, ...] | None = None
    mask_ratio: float = 0.75
    batch_size: int = 160
    seed: int = 0
    weight_decay: float = 0.05
    epochs: int = 25
    warmup_epochs: int = 1
    base_lr: float = 1.5e-4
    flips: bool = True
    clip_norm: float | None = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    group_index_mode: str = "finetune"
    linear_probe: bool = False
    select_metric: str | None = None
    train_split: str = "train"
    eval_split: str = "val"

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def finetune_defaults(cls, **kw) -> "RunConfig":
        base = dict(mode="finetune", base_lr=1e-3, weight_decay=0.1, epochs=5, warmup_epochs=1,
                    betas=(0.9, 0.999), flips=True)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["bands"] = list(self.bands) if self.bands else None
        d["sensors"] = list(self.sensors) if self.sensors else None
        d["betas"] = list(self.betas)
        return d


def _train_samples(dataset: Dataset, split: str) -> list[Sample]:
    samples = dataset.samples if split == "all" else dataset.split(split)
    if not samples:
        raise ValidationError(f"dataset has no {split!r} samples")
    return samples


@dataclass
class PretrainResult:
    model: USatModel
    losses: list[float]
    optimizer: AdamW


def heldout_mae_loss(model: USatModel, dataset: Dataset, samples: Sequence[Sample], mask_ratio: float = 0.75,
                     seed: int = 12345, batch_size: int = 16, layout: TokenLayout | None = None) -> float:
    """Reconstruction loss on fixed masks, no augmentation."""
    layout = layout or model.layout()
    plan = MaskPlan.build(layout.groups, mask_ratio, seed)
    total, n = 0.0, 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        patches = batch_patches(dataset, chunk, layout)
        mask = batch_masks(plan, range(i, i + len(chunk)))
        loss, _, _ = model.mae_forward(patches, mask, layout)
        total += loss * len(chunk)
        n += len(chunk)
    return total / n


def pretrain(dataset: Dataset, spec: ModelSpec, run: RunConfig, out_dir=None, log_file=None,
             on_step: Callable | None = None) -> PretrainResult:
    """MAE loop: embed, mask, encode visible, decode, masked MSE, AdamW step."""
    if spec.decoder is None:
        raise ValidationError("pre-training needs a decoder")
    model = USatModel.create(spec, seed=run.seed)
    layout = model.layout(spec.geometry.resolve_bands(run.bands, run.sensors))
    plan = MaskPlan.build(layout.groups, run.mask_ratio, run.seed)
    samples = _train_samples(dataset, run.train_split)
    steps_per_epoch = math.ceil(len(samples) / run.batch_size)
    sched = Schedule(run.base_lr, min(run.warmup_epochs, run.epochs), run.epochs, steps_per_epoch)
    opt = AdamW(run.weight_decay, tuple(run.betas), run.eps, run.clip_norm)
    rng = np.random.default_rng([run.seed, 1])
    losses: list[float] = []
    fh = open(log_file, "a", encoding="utf-8") if log_file else None
    drawn = 0
    last_good = {k: v.copy() for k, v in model.params.items()}
    try:
        step = 0
        for _epoch in range(run.epochs):
            for idx in _batches(len(samples), run.batch_size, rng):
                chunk = [samples[i] for i in idx]
                patches = batch_patches(dataset, chunk, layout, rng if run.flips else None)
                mask = batch_masks(plan, range(drawn, drawn + len(chunk)))
                drawn += len(chunk)
                lr = lr_at(step, sched)
                loss, grads = model.mae_loss_and_grads(patches, mask, layout)
                if not math.isfinite(loss):
                    model.params = last_good
                    if out_dir is not None:
                        save_checkpoint(out_dir, model, {"run": run.to_dict(), "aborted_at_step": step})
                    raise NonFiniteError(f"loss became non-finite at step {step}")
                opt.update(model.params, grads, lr)
                step += 1
                losses.append(loss)
                line = f"step={step} lr={lr:.6g} loss={loss:.6f}"
                log.debug(line)
                if fh:
                    fh.write(line + "\n")
                if on_step:
                    on_step(step, lr, loss)
                if run.epochs and step % max(1, steps_per_epoch) == 0:
                    last_good = {k: v.copy() for k, v in model.params.items()}
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir, model, {"run": run.to_dict(), "norm_stats": dataset.norm_stats,
                                         "classes": dataset.classes}, optimizer=opt)
    return PretrainResult(model, losses, opt)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: USatModel
    history: list[dict]
    best: dict
    transferred: list[str]


def finetune_spec(base: ModelSpec, dataset: Dataset, run: RunConfig, task: str = "multilabel") -> ModelSpec:
    geometry = base.geometry
    fp = geometry.footprint
    if not math.isclose(dataset.footprint_m, fp.image_footprint_m, rel_tol=1e-9):
        try:
            geometry = geometry.refit(dataset.footprint_m)
        except ValidationError as exc:
            raise GeometryMismatchError(f"dataset footprint {dataset.footprint_m} m incompatible: {exc}") from exc
    bands = geometry.resolve_bands(run.bands, run.sensors)
    return replace(base, geometry=geometry, band_keys=bands, decoder=None, n_classes=len(dataset.classes),
                   encodings=base.encodings.replace_mode(run.group_index_mode), task=task)


def transfer(dst: USatModel, src: USatModel | None) -> list[str]:
    """Copy every same-named, same-shaped parameter except the classifier head."""
    if src is None:
        return []
    moved = []
    for name, value in dst.params.items():
        if name.startswith("head."):
            continue
        other = src.params.get(name)
        if other is not None and other.shape == value.shape:
            dst.params[name] = other.astype(value.dtype).copy()
            moved.append(name)
    return moved


def _labels(samples: Sequence[Sample], task: str):
    y = np.stack([s.labels for s in samples])
    return y.argmax(axis=1) if task == "single" else y.astype(np.float32)


def predict(model: USatModel, dataset: Dataset, samples: Sequence[Sample], batch_size: int = 16) -> np.ndarray:
    layout = model.layout()
    out = [model.logits(batch_patches(dataset, samples[i:i + batch_size], layout), layout)
           for i in range(0, len(samples), batch_size)]
    return np.concatenate(out)


def evaluate(model: USatModel, dataset: Dataset, split: str = "val") -> dict:
    samples = _train_samples(dataset, split)
    scores = predict(model, dataset, samples)
    return M.evaluate(scores, np.stack([s.labels for s in samples]), model.spec.task)


def _default_metric(task):
    return "accuracy" if task == "single" else "micro_ap"


def finetune(dataset: Dataset, run: RunConfig, source: USatModel | None = None, base_spec: ModelSpec | None = None,
             task: str = "multilabel", out_dir=None, log_file=None) -> FinetuneResult:
    """Fine-tune (or linear-probe) on ``dataset``, keeping the best epoch by validation metric.

    ``source`` is a pre-trained model; with ``None`` the run starts from a
    fresh initialisation of ``base_spec``.
    """
    if source is None and base_spec is None:
        raise ValidationError("need a source model or a base spec")
    spec = finetune_spec(source.spec if source is not None else base_spec, dataset, run, task)
    for s in dataset.samples[:1]:
        missing = [k for k in spec.band_keys if k not in s.bands]
        if missing:
            raise UnknownBandError(f"dataset lacks bands {missing}")
    model = USatModel.create(spec, seed=run.seed)
    moved = transfer(model, source)
    layout = model.layout()
    train = _train_samples(dataset, run.train_split)
    val = _train_samples(dataset, run.eval_split)
    y_train, y_val = _labels(train, task), np.stack([s.labels for s in val])
    metric = run.select_metric or _default_metric(task)
    steps_per_epoch = math.ceil(len(train) / run.batch_size)
    sched = Schedule(run.base_lr, min(run.warmup_epochs, run.epochs), run.epochs, steps_per_epoch)
    opt = AdamW(run.weight_decay, tuple(run.betas), run.eps, run.clip_norm)
    rng = np.random.default_rng([run.seed, 2])
    loss_fn = bce_with_logits if task == "multilabel" else softmax_cross_entropy

    if run.linear_probe:
        feats_train = _features(model, dataset, train, layout)
        feats_val = _features(model, dataset, val, layout)

    history, best, best_params = [], None, None
    fh = open(log_file, "a", encoding="utf-8") if log_file else None
    step = 0
    try:
        for epoch in range(run.epochs):
            for idx in _batches(len(train), run.batch_size, rng):
                lr = lr_at(step, sched)
                if run.linear_probe:
                    f = feats_train[idx]
                    logits = f @ model.params["head.weight"] + model.params["head.bias"]
                    loss, dlogits = loss_fn(logits, y_train[idx])
                    grads = {"head.weight": f.T @ dlogits, "head.bias": dlogits.sum(axis=0)}
                else:
                    patches = batch_patches(dataset, [train[i] for i in idx], layout, rng if run.flips else None)
                    loss, grads = model.cls_loss_and_grads(patches, y_train[idx], layout)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"fine-tune loss became non-finite at step {step}")
                opt.update(model.params, grads, lr)
                step += 1
                if fh:
                    fh.write(f"step={step} lr={lr:.6g} loss={loss:.6f}\n")
            if run.linear_probe:
                scores = feats_val @ model.params["head.weight"] + model.params["head.bias"]
            else:
                scores = predict(model, dataset, val)
            res = {"epoch": epoch + 1, **M.evaluate(scores, y_val, task)}
            history.append(res)
            if out_dir is not None:
                mdir = Path(out_dir) / "metrics"
                mdir.mkdir(parents=True, exist_ok=True)
                (mdir / f"epoch_{epoch + 1:03d}.json").write_text(json.dumps(res, indent=1))
            if best is None or res[metric] > best[metric]:
                best = res
                best_params = {k: v.copy() for k, v in model.params.items()}
    finally:
        if fh:
            fh.close()
    if best_params is not None:
        model.params = best_params
    best = best or {}
    if out_dir is not None:
        save_checkpoint(out_dir, model, {"run": run.to_dict(), "norm_stats": dataset.norm_stats,
                                         "classes": dataset.classes, "best": best, "transferred": moved})
        (Path(out_dir) / "metrics.json").write_text(json.dumps({"best": best, "history": history}, indent=1))
    return FinetuneResult(model, history, best, moved)


def _features(model, dataset, samples, layout, batch_size=16):
    return np.concatenate([model.features(batch_patches(dataset, samples[i:i + batch_size], layout), layout)
                           for i in range(0, len(samples), batch_size)])
