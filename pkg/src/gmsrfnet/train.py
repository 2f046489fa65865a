"""Training engine: batched Adam training with deep supervision, evaluation
into metric reports, single-image prediction, and the two-center
generalization report."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, augment, read_pnm, resize_image, write_pnm
from .errors import ConfigError, FormatError, NumericsError
from .losses import build_report, total_loss
from .network import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .optim import Adam
from .tensor import Tensor, backward, no_grad


@dataclass
class TrainConfig:
    """Optimization protocol settings plus the embedded model config."""

    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    augment: bool = True
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        return TrainConfig(**d)

    @staticmethod
    def from_json(path):
        with open(path) as f:
            return TrainConfig.from_dict(json.load(f))


@dataclass
class TrainResult:
    model: object
    epoch_rows: list
    step_losses: list
    final_path: str | None
    best_path: str | None


def _stack_batch(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return Tensor(images), masks


def _prepare_samples(samples, indices, cfg, epoch, policy):
    def prep(i):
        s = samples[int(i)]
        if policy is None:
            return s
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        return augment(s, rng, policy)

    if cfg.threads > 1:
        # per-sample seeding keeps results identical to sequential execution
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(prep, indices))
    return [prep(i) for i in indices]


def _mean_dsc(model, dataset, batch_size=8):
    report = evaluate_model(model, dataset, label="val", batch_size=batch_size)
    return report.means["dsc"]


def best_checkpoint_path(final_path):
    return final_path + ".best"


def train(cfg, train_set, val_set=None, out_path=None, log_path=None):
    """Run the training loop; returns the model, per-epoch log rows, and the
    raw per-step loss trace.

    Saves the final checkpoint at out_path and the best-validation-DSC
    checkpoint alongside it. A NumericsError aborts after re-saving the
    parameters from the last completed step.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    size = cfg.model.input_size
    for s in train_set:
        if s.image.shape[1:] != (size, size):
            raise FormatError(
                f"sample {s.id} has size {s.image.shape[1:]}, model expects {size}x{size}"
            )

    model = build_model(cfg.model)
    adam = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    policy = AugmentPolicy() if cfg.augment else None
    best_path = best_checkpoint_path(out_path) if out_path else None

    epoch_rows = []
    step_losses = []
    best_dsc = -1.0
    step = 0
    n = len(train_set)
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            epoch_losses = []
            model.set_training(True)
            for start in range(0, n, cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                batch = _prepare_samples(train_set.samples, batch_idx, cfg, epoch, policy)
                images, masks = _stack_batch(batch)
                maps = model(images)
                loss = total_loss(maps, masks)
                adam.zero_grad()
                backward(loss)
                adam.step()
                value = loss.item()
                epoch_losses.append(value)
                step_losses.append(value)
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
            if val_set is not None and len(val_set):
                val_dsc = _mean_dsc(model, val_set, cfg.batch_size)
                row["val_dsc"] = val_dsc
                if best_path and val_dsc > best_dsc:
                    best_dsc = val_dsc
                    save_checkpoint(model, best_path)
            epoch_rows.append(row)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    except NumericsError:
        if out_path:
            save_checkpoint(model, out_path)
        raise
    if out_path:
        save_checkpoint(model, out_path)
    if log_path:
        write_log(epoch_rows, log_path)
    return TrainResult(model, epoch_rows, step_losses, out_path, best_path)


def write_log(rows, path):
    fields = ["epoch", "train_loss"] + (["val_dsc"] if any("val_dsc" in r for r in rows) else [])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in fields})


# -- evaluation -----------------------------------------------------------------


def predict_maps(model, dataset, batch_size=8):
    """Primary probability maps for every sample, in dataset order."""
    model.set_training(False)
    preds = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images, _ = _stack_batch(dataset.samples[start : start + batch_size])
            maps = model(images)
            preds.extend(maps[-1].data[i] for i in range(images.shape[0]))
    return preds


def evaluate_model(model, dataset, label="", threshold=0.5, batch_size=8,
                   miou_mode="foreground"):
    preds = predict_maps(model, dataset, batch_size)
    targets = [s.mask for s in dataset.samples]
    return build_report(dataset.ids(), preds, targets, label, threshold, miou_mode)


def evaluate(checkpoint, dataset, out_base=None, label="", threshold=0.5,
             miou_mode="foreground"):
    """Evaluate a checkpoint (path or loaded model) on a dataset; optionally
    write <out_base>.csv and <out_base>.json."""
    model = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    size = model.config.input_size
    for s in dataset:
        if s.image.shape[1:] != (size, size):
            raise FormatError(
                f"sample {s.id} has size {s.image.shape[1:]}, checkpoint expects {size}x{size}"
            )
    report = evaluate_model(model, dataset, label or dataset.center_id, threshold,
                            miou_mode=miou_mode)
    if out_base:
        report.write_csv(out_base + ".csv")
        report.write_json(out_base + ".json")
    return report


def predict(checkpoint_path, image_path, out_mask_path, threshold=0.5):
    """Segment one PPM image; writes a {0, 255} P5 mask at the input's own
    resolution."""
    model = load_checkpoint(checkpoint_path)
    size = model.config.input_size
    image = read_pnm(image_path)
    if image.shape[0] != 3:
        raise FormatError(f"{image_path}: expected a P6 color image")
    orig_h, orig_w = image.shape[1:]
    resized = resize_image(image, size, size)
    model.set_training(False)
    with no_grad():
        maps = model(Tensor(resized[None]))
    prob = maps[-1].data[0, 0]
    mask_small = (prob >= threshold)
    rows = np.minimum((np.arange(orig_h) + 0.5) * size // orig_h, size - 1).astype(int)
    cols = np.minimum((np.arange(orig_w) + 0.5) * size // orig_w, size - 1).astype(int)
    mask = mask_small[rows][:, cols]
    write_pnm((mask[None].astype(np.float32)), out_mask_path)


# -- generalization report ---------------------------------------------------------


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        digest.update(f.read())
    return digest.hexdigest()


def generalization_report(ckpt_a, ckpt_b, data_a, data_b, out_base=None,
                          threshold=0.5):
    """2x2 cross-center evaluation: each model on its own test split and on
    the other center's full dataset, with the source-minus-unseen DSC gap."""
    model_a = load_checkpoint(ckpt_a) if isinstance(ckpt_a, (str, os.PathLike)) else ckpt_a
    model_b = load_checkpoint(ckpt_b) if isinstance(ckpt_b, (str, os.PathLike)) else ckpt_b

    def source_split(ds):
        test = ds.subset("test")
        return test if len(test) else ds

    rows = []
    for name, model, source, unseen in (
        ("model-a", model_a, source_split(data_a), data_b),
        ("model-b", model_b, source_split(data_b), data_a),
    ):
        src = evaluate_model(model, source, label="source", threshold=threshold).means
        uns = evaluate_model(model, unseen, label="unseen", threshold=threshold).means
        rows.append({
            "model": name,
            "source_dsc": src["dsc"], "source_miou": src["miou"],
            "source_recall": src["recall"], "source_precision": src["precision"],
            "unseen_dsc": uns["dsc"], "unseen_miou": uns["miou"],
            "unseen_recall": uns["recall"], "unseen_precision": uns["precision"],
            "gap_dsc": src["dsc"] - uns["dsc"],
        })

    if out_base:
        fields = list(rows[0].keys())
        with open(out_base + ".csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        with open(out_base + ".json", "w") as f:
            json.dump({"rows": rows}, f, indent=2)
    return rows
