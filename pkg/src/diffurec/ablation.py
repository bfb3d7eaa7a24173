"""Variant x seed ablation grid with mean/std tables and paired t-tests."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import SplitDataset
from .evaluation import ZeroVarianceError, evaluate, paired_t_test
from .inference import InferenceConfig, Recommender
from .training import ModelConfigs, fit

log = logging.getLogger(__name__)

METRIC_ORDER = ("HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10", "NDCG@20")
IDENTICAL = "not significant: identical"


@dataclass
class AblationPlan:
    variants: list[str] = field(default_factory=lambda: ["baseline", "cross_attn", "cross_attn_offset"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    comparisons: list[tuple[str, str]] = field(
        default_factory=lambda: [("cross_attn", "baseline"), ("cross_attn_offset", "baseline")]
    )
    pairing: str = "metric"

    def labels(self) -> list[str]:
        """Unique row labels; a repeated variant becomes ``name-2`` and so on."""
        seen: dict[str, int] = {}
        out = []
        for v in self.variants:
            seen[v] = seen.get(v, 0) + 1
            out.append(v if seen[v] == 1 else f"{v}-{seen[v]}")
        return out

    def validate(self) -> None:
        if len(self.variants) < 2:
            raise ValueError("an ablation needs at least two variants")
        if len(self.seeds) < 2:
            raise ValueError("an ablation needs at least two seeds per variant")
        labels = set(self.labels())
        for a, b in self.comparisons:
            if a not in labels or b not in labels:
                raise ValueError(f"comparison {a}:{b} names a variant outside the plan")


def _run_cell(args):
    label, variant, seed, dataset, configs, out_dir, ks = args
    cell_dir = Path(out_dir) / label / f"seed{seed}" if out_dir is not None else None
    try:
        cfgs = replace(configs, train=replace(configs.train, seed=seed)).with_variant(variant)
        result = fit(dataset, cfgs, out_dir=cell_dir)
        rec = Recommender(result.model, result.schedule, InferenceConfig(seeds=(cfgs.train.eval_seed,)))
        report = evaluate(rec, dataset, "test", ks=ks)
        if cell_dir is not None:
            with open(cell_dir / "metrics.json", "w") as fh:
                json.dump(report.to_dict(), fh, indent=2)
        return {"label": label, "variant": variant, "seed": seed, "metrics": report.metrics,
                "wall_clock_seconds": result.manifest["wall_clock_seconds"]}
    except Exception as exc:  # recorded as a failure row, the grid carries on
        log.exception("ablation cell %s seed %s failed", label, seed)
        return {"label": label, "variant": variant, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def summarize(runs: list[dict], plan: AblationPlan, metrics=METRIC_ORDER) -> dict:
    """Aggregate per-run metrics into mean/std rows and t-tests."""
    rows = {}
    for label in plan.labels():
        ok = [r for r in runs if r["label"] == label and "metrics" in r]
        ok.sort(key=lambda r: plan.seeds.index(r["seed"]))
        per_seed = {str(r["seed"]): r["metrics"] for r in ok}
        values = {m: [r["metrics"][m] for r in ok] for m in metrics}
        rows[label] = {
            "runs": per_seed,
            "mean": {m: float(np.mean(v)) if v else None for m, v in values.items()},
            "std": {m: float(np.std(v, ddof=1)) if len(v) > 1 else None for m, v in values.items()},
            "wall_clock_seconds": float(np.mean([r["wall_clock_seconds"] for r in ok])) if ok else None,
        }

    ttests = []
    for a, b in plan.comparisons:
        if plan.pairing in ("metric", "both"):
            xa = [rows[a]["mean"][m] for m in metrics]
            xb = [rows[b]["mean"][m] for m in metrics]
            ttests.append(_ttest_record(a, b, "metric", None, xa, xb))
        if plan.pairing in ("seed", "both"):
            shared = [s for s in map(str, plan.seeds) if s in rows[a]["runs"] and s in rows[b]["runs"]]
            for m in metrics:
                xa = [rows[a]["runs"][s][m] for s in shared]
                xb = [rows[b]["runs"][s][m] for s in shared]
                ttests.append(_ttest_record(a, b, "seed", m, xa, xb))
    return {
        "metrics": list(metrics),
        "variants": rows,
        "ttests": ttests,
        "failures": [r for r in runs if "error" in r],
    }


def _ttest_record(a, b, pairing, metric, xa, xb) -> dict:
    rec = {"variant": a, "baseline": b, "pairing": pairing, "n": len(xa)}
    if metric is not None:
        rec["metric"] = metric
    if any(v is None for v in xa + xb) or len(xa) < 2:
        rec["error"] = "insufficient paired values"
        return rec
    try:
        rec.update(paired_t_test(xa, xb).to_dict())
        rec["significant_0.05"] = rec["p_value"] < 0.05
    except ZeroVarianceError as exc:
        rec["error"] = str(exc)
        rec["verdict"] = IDENTICAL
    return rec


def markdown_report(summary: dict) -> str:
    metrics = summary["metrics"]
    lines = ["| Variant | " + " | ".join(metrics) + " |", "|---" * (len(metrics) + 1) + "|"]
    for label, row in summary["variants"].items():
        cells = []
        for m in metrics:
            mean, std = row["mean"][m], row["std"][m]
            if mean is None:
                cells.append("n/a")
            elif std is None:
                cells.append(f"{mean:.4f}")
            else:
                cells.append(f"{mean:.4f} ± {std:.4f}")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines += ["", "| Compared | Baseline | Pairing | t-statistic | p-value | Avg. Diff. |", "|---|---|---|---|---|---|"]
    for t in summary["ttests"]:
        pairing = t["pairing"] + (f" ({t['metric']})" if "metric" in t else "")
        if "error" in t:
            lines.append(f"| {t['variant']} | {t['baseline']} | {pairing} | - | - | {t.get('verdict', t['error'])} |")
        else:
            lines.append(
                f"| {t['variant']} | {t['baseline']} | {pairing} | {t['t_statistic']:.4f} | "
                f"{t['p_value']:.4f} | {100 * t['mean_difference']:.4f}% |"
            )
    if summary["failures"]:
        lines += ["", "Failed runs:"]
        lines += [f"- {f['label']} seed {f['seed']}: {f['error']}" for f in summary["failures"]]
    return "\n".join(lines) + "\n"


def run_ablation(dataset: SplitDataset, configs: ModelConfigs, plan: AblationPlan, out_dir=None,
                 parallel: int = 1, ks=(5, 10, 20)) -> dict:
    plan.validate()
    cells = [
        (label, variant, seed, dataset, configs, out_dir, ks)
        for label, variant in zip(plan.labels(), plan.variants)
        for seed in plan.seeds
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(_run_cell, cells))
    else:
        runs = [_run_cell(c) for c in cells]
    summary = summarize(runs, plan, METRIC_ORDER if tuple(ks) == (5, 10, 20) else _metric_names(ks))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        with open(out / "ttest.json", "w") as fh:
            json.dump(summary["ttests"], fh, indent=2)
        (out / "ablation.md").write_text(markdown_report(summary), encoding="utf-8")
    return summary


def _metric_names(ks) -> tuple[str, ...]:
    return tuple(f"HR@{k}" for k in ks) + tuple(f"NDCG@{k}" for k in ks)
