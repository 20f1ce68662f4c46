"""Training loop, run manifests and checkpoint-based resume."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .autodiff import Tape, adamw_step, load_checkpoint, lr_schedule, save_checkpoint
from .data import Windows
from .model import HGMamba, ModelConfig, horizontal_flip, loss
from .numeric import NumericError

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.hgm"
MANIFEST = "manifest.json"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 90
    lr: float = 5e-4
    lr_decay: float = 0.99
    weight_decay: float = 0.01
    max_steps: int | None = None
    flip_augment: bool = True
    workers: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.workers < 1 or self.eval_every < 1:
            raise ValueError("batch_size, workers and eval_every must be >= 1 and epochs >= 0")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.weight_decay < 0:
            raise ValueError(f"invalid optimizer settings lr={self.lr} decay={self.lr_decay} wd={self.weight_decay}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# Toy presets: same optimizer, compressed schedule for desk-scale runs.
TRAIN_PRESETS = {
    "tiny": dict(epochs=500, lr=2e-3, lr_decay=0.995, max_steps=2000, flip_augment=False),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**TRAIN_PRESETS.get(name, {}), **overrides})


@dataclass
class RunManifest:
    model: dict
    train: dict
    seed: int
    dataset_hash: str
    checkpoint: str = ""
    history: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def identity(self) -> str:
        """Hash of the run definition (config, seed, data); names the run directory."""
        key = json.dumps({"model": self.model, "train": self.train, "seed": self.seed,
                          "dataset": self.dataset_hash}, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps({**dataclasses.asdict(self), "manifest_hash": self.identity()}, indent=2)

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d.pop("manifest_hash", None)
        return cls(**d)


def evaluate_windows(model: HGMamba, windows: Windows, flip_test: bool = False) -> metrics.EvalReport:
    pred = model.predict(windows.inputs, flip_test=flip_test)
    return metrics.evaluate(pred, windows.targets, root=model.skeleton.root)


class Trainer:
    """Mini-batch AdamW on windowed data; one checkpoint per epoch.

    All randomness derives from ``(seed, epoch)`` for batch order and
    ``(seed, step, ...)`` for augmentation and shuffles, so a resumed run
    follows the uninterrupted trajectory exactly.
    """

    def __init__(self, model: HGMamba, config: TrainConfig, windows: Windows, run_dir, dataset_hash: str = ""):
        if windows.targets is None:
            raise ValueError("training windows need 3D targets")
        if windows.inputs.shape[1] != model.config.frames:
            raise ValueError(f"windows have {windows.inputs.shape[1]} frames, model expects {model.config.frames}")
        self.model = model
        self.config = config
        self.windows = windows
        self.run_dir = Path(run_dir)
        self.manifest = RunManifest(model.config.to_dict(), dataclasses.asdict(config), model.config.seed,
                                    dataset_hash)
        self.epoch = 0

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / CHECKPOINT

    def batches(self, epoch: int):
        n = len(self.windows)
        order = np.random.default_rng([self.model.config.seed, epoch, 0xB]).permutation(n)
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def step(self, idx: np.ndarray, lr: float) -> float:
        model, cfg = self.model, self.config
        step = model.store.step
        x = self.windows.inputs[idx]
        y = self.windows.targets[idx]
        if cfg.flip_augment:
            flip = np.random.default_rng([model.config.seed, step, 0]).random(len(idx)) < 0.5
            x = np.where(flip[:, None, None, None], horizontal_flip(x, model.skeleton), x)
            y = np.where(flip[:, None, None, None], horizontal_flip(y, model.skeleton), y)
        shards = np.array_split(np.arange(len(idx)), min(cfg.workers, len(idx)))
        total = 0.0
        for s, part in enumerate(shards):
            with Tape() as tape:
                pred = model.forward(x[part], training=True, step=step, shard=s)
                value = loss(pred, y[part], model.config.velocity_weight)
                weighted = value * (len(part) / len(idx))
            lv = float(value.data)
            if not math.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at step {step}")
            tape.backward(weighted)
            total += lv * len(part) / len(idx)
        adamw_step(model.store, lr, weight_decay=cfg.weight_decay)
        return total

    def save(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.checkpoint_path, self.model.store,
                        {"epoch": self.epoch, "model": self.model.config.to_dict(),
                         "train": dataclasses.asdict(self.config), "manifest_hash": self.manifest.identity()})
        self.manifest.checkpoint = str(self.checkpoint_path)
        (self.run_dir / MANIFEST).write_text(self.manifest.to_json())

    def resume(self) -> bool:
        """Restore state from the run directory if a checkpoint exists."""
        if not self.checkpoint_path.exists():
            return False
        meta = load_checkpoint(self.checkpoint_path, self.model.store)
        if meta.get("manifest_hash") != self.manifest.identity():
            raise ValueError(f"checkpoint {self.checkpoint_path} belongs to a different run definition")
        self.epoch = int(meta["epoch"])
        self.manifest.history = RunManifest.load(self.run_dir / MANIFEST).history
        self.manifest.wall_clock_s = RunManifest.load(self.run_dir / MANIFEST).wall_clock_s
        return True

    def done(self) -> bool:
        cfg = self.config
        return self.epoch >= cfg.epochs or (cfg.max_steps is not None and self.model.store.step >= cfg.max_steps)

    def run_epoch(self) -> dict:
        cfg = self.config
        t0 = time.perf_counter()
        lr = lr_schedule(self.epoch, cfg.lr, cfg.lr_decay)
        losses = []
        for idx in self.batches(self.epoch):
            if cfg.max_steps is not None and self.model.store.step >= cfg.max_steps:
                break
            value = self.step(idx, lr)
            losses.append(value)
            log.debug("step %d loss %.6f", self.model.store.step, value)
        self.epoch += 1
        record = {"epoch": self.epoch, "steps": self.model.store.step, "lr": lr,
                  "loss": float(np.mean(losses)) if losses else float("nan")}
        if self.epoch % cfg.eval_every == 0 or self.done():
            record["train_mpjpe_mm"] = evaluate_windows(self.model, self.windows).mpjpe_mm
        elapsed = time.perf_counter() - t0
        record["wall_s"] = elapsed
        self.manifest.history.append(record)
        self.manifest.wall_clock_s += elapsed
        self.save()
        log.info("epoch %d  step %d  lr %.3g  loss %.4f  mpjpe %s", record["epoch"], record["steps"], lr,
                 record["loss"], f"{record['train_mpjpe_mm']:.2f}" if "train_mpjpe_mm" in record else "-")
        return record

    def fit(self, stop_after_epochs: int | None = None) -> RunManifest:
        """Train until the schedule ends (or for ``stop_after_epochs`` more epochs)."""
        if self.epoch == 0 and not self.checkpoint_path.exists():
            self.save()
        n = 0
        while not self.done() and (stop_after_epochs is None or n < stop_after_epochs):
            self.run_epoch()
            n += 1
        return self.manifest


def run_directory(root, model_config: ModelConfig, train_config: TrainConfig, dataset_hash: str) -> Path:
    m = RunManifest(model_config.to_dict(), dataclasses.asdict(train_config), model_config.seed, dataset_hash)
    return Path(root) / m.identity()
