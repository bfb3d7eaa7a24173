"""Reverse diffusion from Gaussian noise, rounding to items and seed ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffusion
from .approximator import sample_lambda
from .data import pad_histories


@dataclass(frozen=True)
class InferenceConfig:
    exclude_history: bool = False
    seeds: tuple[int, ...] = (0,)
    K_list: tuple[int, ...] = (5, 10, 20)

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")


@dataclass
class RankedList:
    items: np.ndarray
    scores: np.ndarray


def _as_items(history, max_len: int) -> torch.Tensor:
    if isinstance(history, torch.Tensor):
        return history if history.ndim == 2 else history[None, :]
    arr = np.asarray(history)
    if arr.ndim == 2:
        return torch.as_tensor(arr, dtype=torch.long)
    rows, _ = pad_histories([history], max_len)
    return torch.as_tensor(rows)


@torch.no_grad()
def reverse_generate(model, history, schedule: diffusion.NoiseSchedule, seed: int,
                     dtype=None) -> torch.Tensor:
    """Run the full reverse chain from x_T ~ N(0, I) down to x_0.

    ``history`` is a left-padded (batch, n) index tensor or a single item
    list.  All random draws come from a generator seeded with ``seed`` and are
    shared across the batch, so a row's result does not depend on which other
    rows are in the batch.  ``model`` is called as
    ``model(items, x, s, lam=...)`` and must return (batch, d).
    """
    T = schedule.T
    if getattr(model, "T", T) != T:
        raise ValueError(f"schedule has T={T} but the approximator was built for T={model.T}")
    max_len = model.tcfg.max_len if hasattr(model, "tcfg") else 100
    items = _as_items(history, max_len)
    if dtype is None:
        dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float64
    d = model.d
    ccfg = model.ccfg
    cfg = schedule.config
    noise_variant = cfg.noise_scale_variant if cfg else "std"
    batch, n = items.shape

    was_training = getattr(model, "training", False)
    if isinstance(model, torch.nn.Module):
        model.eval()
    try:
        g = torch.Generator().manual_seed(int(seed))
        x = torch.randn(d, generator=g, dtype=torch.float64).to(dtype).expand(batch, d)
        for s in range(T, 0, -1):
            lam = sample_lambda((n,), ccfg, g, dtype=dtype).expand(batch, n)
            eps = torch.randn(d, generator=g, dtype=torch.float64).to(dtype).expand(batch, d)
            steps = torch.full((batch,), s, dtype=torch.long)
            x0_hat = model(items, x, steps, lam=lam)
            x = diffusion.reverse_step(x, x0_hat, s, schedule, None, noise=eps,
                                       noise_scale_variant=noise_variant)
    finally:
        if isinstance(model, torch.nn.Module):
            model.train(was_training)
    return x


def item_scores(x0, item_table, histories=None, exclude_history: bool = False) -> np.ndarray:
    """Inner products with every item in float64; padding column is -inf."""
    x0 = torch.as_tensor(x0).detach().to(torch.float64)
    table = torch.as_tensor(item_table).detach().to(torch.float64)
    scores = (x0 @ table.T).numpy().copy()
    scores[..., 0] = -np.inf
    if exclude_history and histories is not None:
        for r, h in enumerate(histories):
            idx = [i for i in np.asarray(h).ravel() if i != 0]
            scores[r, idx] = -np.inf
    return scores


def round_to_ranking(x0, item_table, history=None, cfg: InferenceConfig = InferenceConfig()) -> RankedList:
    """Full descending ranking of real items; equal scores go to the lower index."""
    x = torch.as_tensor(x0).detach().reshape(1, -1)
    hist = [history] if history is not None else None
    scores = item_scores(x, item_table, hist, cfg.exclude_history)[0]
    idx = np.arange(1, scores.shape[0])
    real = scores[1:]
    if cfg.exclude_history and history is not None:
        keep = np.isfinite(real)
        idx, real = idx[keep], real[keep]
    order = np.lexsort((idx, -real))
    return RankedList(items=idx[order], scores=real[order])


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_infer(model, history, schedule, cfg: InferenceConfig, runner=None) -> np.ndarray:
    """Average of per-seed softmax distributions over items.

    Returns (batch, |I| + 1) probabilities with column 0 (padding) equal to 0.
    ``runner(seed) -> scores`` may replace the reverse pass (used by stubs).
    """
    cfg.validate()
    max_len = model.tcfg.max_len if hasattr(model, "tcfg") else 100
    items = _as_items(history, max_len) if runner is None else None
    hist_rows = items.numpy() if items is not None else None
    total = None
    for seed in cfg.seeds:
        if runner is None:
            x0 = reverse_generate(model, items, schedule, seed)
            scores = item_scores(x0, model.item_emb.weight, hist_rows, cfg.exclude_history)
        else:
            scores = np.asarray(runner(seed), dtype=np.float64)
        p = softmax(scores)
        total = p if total is None else total + p
    return total / len(cfg.seeds)


@dataclass
class Recommender:
    """Wraps a trained approximator as a scorer for :func:`evaluation.evaluate`."""

    model: torch.nn.Module
    schedule: diffusion.NoiseSchedule
    cfg: InferenceConfig = field(default_factory=InferenceConfig)

    def score(self, histories) -> np.ndarray:
        rows, _ = pad_histories(list(histories), self.model.tcfg.max_len)
        items = torch.as_tensor(rows)
        if len(self.cfg.seeds) == 1:
            x0 = reverse_generate(self.model, items, self.schedule, self.cfg.seeds[0])
            return item_scores(x0, self.model.item_emb.weight, rows, self.cfg.exclude_history)
        return ensemble_infer(self.model, items, self.schedule, self.cfg)

    def recommend(self, histories, k: int = 10):
        """Top-k (items, probabilities) per history via the ensemble path."""
        rows, _ = pad_histories(list(histories), self.model.tcfg.max_len)
        probs = ensemble_infer(self.model, torch.as_tensor(rows), self.schedule, self.cfg)
        out = []
        for p in probs:
            idx = np.arange(1, p.shape[0])
            order = np.lexsort((idx, -p[1:]))[:k]
            out.append((idx[order], p[1:][order]))
        return out

    def represent(self, histories, seed: int) -> np.ndarray:
        rows, _ = pad_histories(list(histories), self.model.tcfg.max_len)
        x0 = reverse_generate(self.model, torch.as_tensor(rows), self.schedule, seed)
        return x0.detach().to(torch.float64).numpy()
