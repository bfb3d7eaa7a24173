"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, lists are comma separated.
Unknown keys are errors.  Defaults reproduce the published setup: d=128,
batch 1024, 4 blocks, dropout 0.1/0.3, lambda N(0.001, 0.001^2), T=32,
41 epochs, lr 0.001, weight decay 0.0001, N=100, K in {5, 10, 20}.
"""
from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields, replace

from .approximator import ConditioningConfig, TransformerConfig
from .diffusion import ConfigError, DiffusionConfig
from .inference import InferenceConfig
from .training import VARIANTS, ModelConfigs, TrainConfig

SEED_ENV = "DIFFUREC_SEED"


@dataclass
class ExperimentConfig:
    # data
    data_path: str = ""
    data_format: str = "auto"
    k_core: int = 5
    max_len: int = 100
    bundle: str = ""
    out_dir: str = "runs"
    # approximator
    d: int = 128
    blocks: int = 4
    heads: int = 4
    ffn_dim: int = 0
    dropout_attn_block: float = 0.1
    dropout_item_embedding: float = 0.3
    attention_mask: str = "bidirectional"
    conditioning_heads: int = 4
    lambda_mean: float = 0.001
    lambda_std: float = 0.001
    # diffusion
    T: int = 32
    beta_min: float = 1e-4
    beta_max: float = 0.02
    offset_scale: float = 0.1
    delta_c: float = 1.0
    posterior_variant: str = "standard"
    noise_scale_variant: str = "std"
    # training
    epochs: int = 41
    lr: float = 0.001
    weight_decay: float = 0.0001
    weight_decay_mode: str = "decoupled"
    lr_decay_epoch: int = 30
    lr_decay_factor: float = 0.1
    batch_size: int = 1024
    variant: str = "baseline"
    sliding_window: bool = False
    eval_seed: int = 0
    eval_k: int = 10
    dtype: str = "float32"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # inference / evaluation
    exclude_history: bool = False
    k_list: list[int] = field(default_factory=lambda: [5, 10, 20])
    infer_seeds: list[int] = field(default_factory=lambda: [0])
    top_k: int = 10
    # ablation
    ablation_variants: list[str] = field(
        default_factory=lambda: ["baseline", "cross_attn", "cross_attn_offset"]
    )
    comparisons: list[str] = field(
        default_factory=lambda: ["cross_attn:baseline", "cross_attn_offset:baseline"]
    )
    ttest_pairing: str = "metric"

    provided: frozenset = field(default=frozenset(), compare=False, repr=False)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
        for v in self.ablation_variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {v!r}")
        if self.data_format not in ("auto", "tsv-header", "csv"):
            raise ConfigError("data_format must be auto, tsv-header or csv")
        if self.ttest_pairing not in ("metric", "seed", "both"):
            raise ConfigError("ttest_pairing must be metric, seed or both")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        for pair in self.comparisons:
            if pair.count(":") != 1:
                raise ConfigError(f"comparison {pair!r} must look like variant:baseline")
        self.model_configs().train.validate()
        self.model_configs().diffusion.validate()

    def model_configs(self, seed: int | None = None, variant: str | None = None) -> ModelConfigs:
        configs = ModelConfigs(
            diffusion=DiffusionConfig(
                T=self.T, beta_min=self.beta_min, beta_max=self.beta_max,
                offset_scale=self.offset_scale, delta_c=self.delta_c,
                posterior_variant=self.posterior_variant,
                noise_scale_variant=self.noise_scale_variant,
            ),
            transformer=TransformerConfig(
                d=self.d, blocks=self.blocks, heads=self.heads, ffn_dim=self.ffn_dim or None,
                dropout_attn_block=self.dropout_attn_block,
                dropout_item_embedding=self.dropout_item_embedding,
                max_len=self.max_len, attention_mask=self.attention_mask,
            ),
            conditioning=ConditioningConfig(
                delta=self.lambda_mean, lambda_std=self.lambda_std, heads=self.conditioning_heads,
            ),
            train=TrainConfig(
                epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                weight_decay_mode=self.weight_decay_mode, lr_decay_epoch=self.lr_decay_epoch,
                lr_decay_factor=self.lr_decay_factor, batch_size=self.batch_size,
                seed=self.seeds[0] if seed is None else seed, variant=variant or self.variant,
                sliding_window=self.sliding_window, eval_seed=self.eval_seed,
                eval_k=self.eval_k, dtype=self.dtype,
            ),
        )
        return configs.with_variant()

    def inference_config(self, seeds=None) -> InferenceConfig:
        return InferenceConfig(
            exclude_history=self.exclude_history,
            seeds=tuple(self.infer_seeds if seeds is None else seeds),
            K_list=tuple(self.k_list),
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "provided"}


_HINTS = None


def _field_types() -> dict:
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(ExperimentConfig)
    return _HINTS


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, text: str):
    tp = _field_types()[key]
    text = text.strip().strip('"').strip("'")
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    inner = typing.get_args(tp)[0]
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return [inner(p) for p in parts]


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)} - {"provided"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(**values)
    cfg.provided = frozenset(values)
    cfg.validate()
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(map(str, value))
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def resolve_seeds(cfg: ExperimentConfig, cli_seed: int | None = None, count: int | None = None) -> list[int]:
    """Seed list: ``--seed`` beats the config file, which beats ``DIFFUREC_SEED``.

    A single base seed expands to ``count`` consecutive seeds.
    """
    n = count or len(cfg.seeds)
    if cli_seed is not None:
        return [cli_seed + i for i in range(n)]
    if "seeds" in cfg.provided:
        return list(cfg.seeds)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            base = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return [base + i for i in range(n)]
    return list(cfg.seeds)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    out = replace(cfg, **kw)
    out.provided = cfg.provided | frozenset(kw)
    out.validate()
    return out
