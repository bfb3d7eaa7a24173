"""Diffusion-phase training: corrupt the target, reconstruct it, minimise cross-entropy."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .approximator import (
    Approximator,
    ConditioningConfig,
    TransformerConfig,
    build_model,
    score_items,
)
from .data import SplitDataset, dataset_digest, make_batches
from .diffusion import ConfigError, DiffusionConfig, NoiseSchedule, build_schedule, sample_offset_noise
from .evaluation import evaluate
from .inference import InferenceConfig, Recommender

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "diffurec-checkpoint"
CHECKPOINT_VERSION = 1

# variant -> (conditioning mode, offset noise)
VARIANTS = {
    "baseline": ("sum", False),
    "cross_attn": ("cross_attention", False),
    "cross_attn_offset": ("cross_attention", True),
}

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 41
    lr: float = 0.001
    weight_decay: float = 0.0001
    weight_decay_mode: str = "decoupled"
    lr_decay_epoch: int = 30
    lr_decay_factor: float = 0.1
    batch_size: int = 1024
    seed: int = 0
    variant: str = "baseline"
    sliding_window: bool = False
    eval_seed: int = 0
    eval_k: int = 10
    dtype: str = "float32"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 1 <= self.lr_decay_epoch <= self.epochs:
            raise ConfigError("lr_decay_epoch must lie in [1, epochs]")
        if self.weight_decay_mode not in ("decoupled", "coupled"):
            raise ConfigError("weight_decay_mode must be decoupled or coupled")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass(frozen=True)
class ModelConfigs:
    """Everything needed to rebuild the model and its schedule."""

    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_variant(self, variant: str | None = None) -> "ModelConfigs":
        """Route the variant name to conditioning mode and offset noise."""
        variant = variant or self.train.variant
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        mode, offset = VARIANTS[variant]
        return replace(
            self,
            diffusion=replace(self.diffusion, use_offset_noise=offset),
            conditioning=replace(self.conditioning, mode=mode),
            train=replace(self.train, variant=variant),
        )

    def to_dict(self) -> dict:
        return {
            "diffusion": asdict(self.diffusion),
            "transformer": asdict(self.transformer),
            "conditioning": asdict(self.conditioning),
            "train": asdict(self.train),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfigs":
        return cls(
            diffusion=DiffusionConfig(**d["diffusion"]),
            transformer=TransformerConfig(**d["transformer"]),
            conditioning=ConditioningConfig(**d["conditioning"]),
            train=TrainConfig(**d["train"]),
        )


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over the batch."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if bool((targets == 0).any()):
        raise ValueError("target is the padding index")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    log_norm = torch.logsumexp(shifted, dim=-1)
    picked = shifted.gather(-1, targets[:, None]).squeeze(-1)
    return (log_norm - picked).mean()


def diffuse_targets(model: Approximator, targets, schedule: NoiseSchedule, dcfg: DiffusionConfig,
                    generator: torch.Generator):
    """Sample step indices and the corrupted target latents x_s for a batch."""
    batch = targets.shape[0]
    dtype = model.item_emb.weight.dtype
    s = diffusion.sample_step_index(schedule.T, generator, size=batch)
    e_target = model.item_emb(targets)
    x0 = diffusion.embed_to_x0(e_target, schedule, generator)
    if dcfg.use_offset_noise:
        noise = sample_offset_noise((batch, model.d), dcfg, generator, dtype=dtype)
    else:
        noise = torch.randn((batch, model.d), generator=generator, dtype=dtype)
    return diffusion.forward_diffuse(x0, s, schedule, noise), s


def batch_loss(model, items, targets, schedule, dcfg, generator):
    x_s, s = diffuse_targets(model, targets, schedule, dcfg, generator)
    x0_hat = model(items, x_s, s, generator=generator)
    return cross_entropy_loss(score_items(x0_hat, model.item_emb.weight), targets)


def make_optimizer(model, tcfg: TrainConfig):
    if tcfg.weight_decay_mode == "decoupled":
        return torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def learning_rate(tcfg: TrainConfig, epoch: int) -> float:
    """Rate for 0-based ``epoch``: decayed once from epoch ``lr_decay_epoch`` on."""
    return tcfg.lr * (tcfg.lr_decay_factor if epoch >= tcfg.lr_decay_epoch else 1.0)


def train_step(model, optimizer, batch, schedule, dcfg, generator, step_id=None) -> float:
    model.train()
    items = torch.as_tensor(batch.items)
    targets = torch.as_tensor(batch.targets)
    loss = batch_loss(model, items, targets, schedule, dcfg, generator)
    if not torch.isfinite(loss):
        raise TrainingError(
            "non-finite loss",
            {"step": step_id, "loss": float(loss.detach()), "targets": batch.targets[:8].tolist()},
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: Approximator, configs: ModelConfigs, schedule: NoiseSchedule,
                    extra: dict | None = None) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "configs": configs.to_dict(),
        "num_items": model.num_items,
        "schedule_digest": schedule.digest(),
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "params": state,
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Return (model, configs, schedule, raw payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a diffurec checkpoint")
    configs = ModelConfigs.from_dict(payload["configs"])
    schedule = build_schedule(configs.diffusion)
    if schedule.digest() != payload["schedule_digest"]:
        raise ValueError(f"{path}: schedule digest mismatch")
    model = Approximator(payload["num_items"], configs.diffusion.T, configs.transformer, configs.conditioning)
    model = model.to(DTYPES[configs.train.dtype])
    model.load_state_dict(payload["params"])
    model.eval()
    return model, configs, schedule, payload


# -- fitting -----------------------------------------------------------------


@dataclass
class FitResult:
    model: Approximator
    schedule: NoiseSchedule
    configs: ModelConfigs
    manifest: dict
    final_model: Approximator | None = None


def _seeds(seed: int) -> tuple[int, int, int]:
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return int(a), int(b), int(c)


def validation_hr(model, schedule, dataset, tcfg: TrainConfig) -> float:
    rec = Recommender(model, schedule, InferenceConfig(seeds=(tcfg.eval_seed,)))
    report = evaluate(rec, dataset, "valid", ks=(tcfg.eval_k,))
    return report.metrics[f"HR@{tcfg.eval_k}"]


def fit(dataset: SplitDataset, configs: ModelConfigs, out_dir=None, resume: bool = False,
        stop_after: int | None = None, echo=None) -> FitResult:
    """Train for ``configs.train.epochs`` epochs, keeping the best validation checkpoint.

    With ``out_dir`` set, ``last.pt``, ``best.pt`` and ``run.json`` are written
    after every epoch.  ``resume`` continues from ``last.pt``; ``stop_after``
    ends the call after that many epochs in total (simulated interruption).
    """
    configs = configs.with_variant()
    tcfg = configs.train
    tcfg.validate()
    schedule = build_schedule(configs.diffusion)
    dtype = DTYPES[tcfg.dtype]
    init_seed, sample_seed, dropout_seed = _seeds(tcfg.seed)

    model = build_model(dataset.vocab.num_items, schedule.T, configs.transformer,
                        configs.conditioning, seed=init_seed, dtype=dtype)
    optimizer = make_optimizer(model, tcfg)
    generator = torch.Generator().manual_seed(sample_seed)
    torch.manual_seed(dropout_seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    examples = dataset.training_examples(tcfg.sliding_window)
    if not examples:
        raise ValueError("dataset has no training examples (all training prefixes shorter than 2)")

    manifest = {
        "format": "diffurec-run",
        "variant": tcfg.variant,
        "configs": configs.to_dict(),
        "schedule_digest": schedule.digest(),
        "dataset_digest": dataset_digest(dataset),
        "num_items": dataset.vocab.num_items,
        "num_users": len(dataset),
        "num_train_examples": len(examples),
        "epochs": [],
        "best_epoch": None,
        "best_val_hr": None,
        "wall_clock_seconds": 0.0,
        "checkpoints": {},
    }
    best_state = None
    start_epoch = 0
    if resume:
        if out is None:
            raise ValueError("resume requires an output directory")
        payload = torch.load(out / "last.pt", map_location="cpu", weights_only=False)
        model.load_state_dict(payload["params"])
        optimizer.load_state_dict(payload["optimizer"])
        generator.set_state(payload["generator_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        manifest = payload["manifest"]
        start_epoch = len(manifest["epochs"])
        if (out / "best.pt").exists():
            best_state = torch.load(out / "best.pt", map_location="cpu", weights_only=False)["params"]

    step_id = 0
    for epoch in range(start_epoch, tcfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        t0 = time.perf_counter()
        lr = learning_rate(tcfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        losses = []
        for batch in make_batches(examples, tcfg.batch_size, True, tcfg.seed, epoch, dataset.max_len):
            losses.append(train_step(model, optimizer, batch, schedule, configs.diffusion, generator,
                                     step_id=(epoch, step_id)))
            step_id += 1
        val_hr = validation_hr(model, schedule, dataset, tcfg)
        seconds = time.perf_counter() - t0
        manifest["wall_clock_seconds"] += seconds
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss": float(np.mean(losses)),
            f"val_HR@{tcfg.eval_k}": val_hr,
            "seconds": seconds,
            "wall_clock": manifest["wall_clock_seconds"],
        }
        manifest["epochs"].append(record)
        if manifest["best_val_hr"] is None or val_hr > manifest["best_val_hr"]:
            manifest["best_val_hr"] = val_hr
            manifest["best_epoch"] = epoch + 1
            best_state = copy.deepcopy(model.state_dict())
            if out is not None:
                save_checkpoint(out / "best.pt", model, configs, schedule, {"epoch": epoch + 1})
        if echo is not None:
            echo(f"epoch {epoch + 1}/{tcfg.epochs} loss={record['loss']:.4f} "
                 f"val_HR@{tcfg.eval_k}={val_hr:.4f} lr={lr:g}")
        if out is not None:
            manifest["checkpoints"] = {"best": str(out / "best.pt"), "last": str(out / "last.pt")}
            save_checkpoint(out / "last.pt", model, configs, schedule, {
                "epoch": epoch + 1,
                "optimizer": optimizer.state_dict(),
                "generator_state": generator.get_state(),
                "torch_rng_state": torch.get_rng_state(),
                "manifest": manifest,
            })
            with open(out / "run.json", "w") as fh:
                json.dump(manifest, fh, indent=2)

    final_model = model
    best_model = copy.deepcopy(model)
    if best_state is not None:
        best_model.load_state_dict(best_state)
    best_model.eval()
    return FitResult(best_model, schedule, configs, manifest, final_model)
