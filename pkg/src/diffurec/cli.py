"""Command-line harness: prepare, train, evaluate, ablate, infer, export-repr.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data
from .ablation import AblationPlan, run_ablation
from .config import ExperimentConfig, dump_config, load_config, resolve_seeds, with_overrides
from .diffusion import ConfigError
from .evaluation import evaluate
from .inference import InferenceConfig, Recommender
from .training import fit, load_checkpoint

log = logging.getLogger("diffurec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--seed", type=int, help="overrides the config seed list")
    p.add_argument("--variant", choices=["baseline", "cross_attn", "cross_attn_offset"])
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="diffurec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="filter, split and write a dataset bundle")
    p.add_argument("--input", help="interaction file (overrides data_path)")
    p.add_argument("--format", choices=["auto", "tsv-header", "csv"])

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--bundle", help="prepared bundle directory (overrides bundle)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")
    p.add_argument("--stop-after", type=int, help="stop once this many epochs are done")

    p = sub.add_parser("evaluate", parents=[common], help="compute HR@K / NDCG@K for a run")
    p.add_argument("run_dir")
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--segments", action="store_true", help="add head/tail and length breakdowns")
    p.add_argument("--seeds", help="comma separated inference seeds (ensemble when >1)")

    p = sub.add_parser("ablate", parents=[common], help="variant x seed grid with t-tests")
    p.add_argument("--bundle")
    p.add_argument("--parallel", type=int, default=1)

    p = sub.add_parser("infer", parents=[common], help="top-K recommendations as JSON lines")
    p.add_argument("run_dir")
    p.add_argument("--users", help="comma separated user ids (default: all)")
    p.add_argument("--seeds", help="comma separated seeds (ensemble when >1)")
    p.add_argument("--k", type=int, help="list length (default: top_k from config)")

    p = sub.add_parser("export-repr", parents=[common], help="reverse-generated x_0 per user as TSV")
    p.add_argument("run_dir")
    p.add_argument("--split", choices=["valid", "test", "full"], default="test")
    return parser


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma separated integers, got {text!r}") from None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, variant=getattr(args, "variant", None))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _load_bundle(cfg: ExperimentConfig, override) -> tuple[data.SplitDataset, Path]:
    bundle = override or cfg.bundle
    if not bundle:
        raise UsageError("no dataset bundle given (set bundle in the config or pass --bundle)")
    path = Path(bundle)
    if not (path / "sequences.tsv").exists():
        raise UsageError(f"{path} is not a prepared bundle")
    return data.load_bundle(path, cfg.max_len), path.resolve()


def cmd_prepare(args) -> int:
    cfg = _config(args)
    src = args.input or cfg.data_path
    if not src:
        raise UsageError("no input file (set data_path or pass --input)")
    fmt = args.format or cfg.data_format
    if fmt == "auto":
        fmt = data.infer_format(src)
    out = Path(args.out or cfg.bundle or "bundle")
    try:
        dataset = data.prepare(src, fmt, cfg.k_core, cfg.max_len)
    except (data.RowError, data.SchemaError) as exc:
        raise RuntimeError(f"{src}: {exc}") from exc
    data.save_bundle(dataset, out)
    stats = data.dataset_stats(dataset)
    stats.update({"source": str(src), "format": fmt, "k_core": cfg.k_core,
                  "digest": data.bundle_digest(out)})
    _write_json(out / "prepare.json", stats)
    print(json.dumps(stats))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset, bundle = _load_bundle(cfg, args.bundle)
    seed = resolve_seeds(cfg, args.seed, 1)[0]
    configs = cfg.model_configs(seed=seed)
    out = Path(args.out or Path(cfg.out_dir) / f"{configs.train.variant}-seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    result = fit(dataset, configs, out_dir=out, resume=args.resume, stop_after=args.stop_after,
                 echo=print)
    result.schedule.dump(out / "schedule.json")
    manifest = result.manifest
    manifest["bundle"] = str(bundle)
    manifest["experiment"] = cfg.to_dict()
    _write_json(out / "run.json", manifest)
    return 0


def _load_run(run_dir):
    run_dir = Path(run_dir)
    ckpt = run_dir / "best.pt"
    if not ckpt.exists():
        raise RuntimeError(f"no checkpoint at {ckpt}")
    with open(run_dir / "run.json") as fh:
        manifest = json.load(fh)
    model, configs, schedule, _ = load_checkpoint(ckpt)
    cfg = ExperimentConfig(**manifest["experiment"]) if "experiment" in manifest else ExperimentConfig()
    dataset = data.load_bundle(manifest["bundle"], configs.transformer.max_len)
    return model, schedule, dataset, cfg


def cmd_evaluate(args) -> int:
    model, schedule, dataset, cfg = _load_run(args.run_dir)
    seeds = _int_list(args.seeds) if args.seeds else [cfg.eval_seed]
    icfg = InferenceConfig(exclude_history=cfg.exclude_history, seeds=tuple(seeds),
                           K_list=tuple(cfg.k_list))
    report = evaluate(Recommender(model, schedule, icfg), dataset, args.split, ks=icfg.K_list,
                      segments=args.segments)
    report.config = {"seeds": seeds, "exclude_history": cfg.exclude_history, "split": args.split}
    out = Path(args.out) if args.out else Path(args.run_dir) / "metrics.json"
    _write_json(out, report.to_dict())
    print(json.dumps(report.metrics))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    dataset, _ = _load_bundle(cfg, args.bundle)
    seeds = resolve_seeds(cfg, args.seed)
    plan = AblationPlan(
        variants=list(cfg.ablation_variants),
        seeds=seeds,
        comparisons=[tuple(p.split(":")) for p in cfg.comparisons],
        pairing=cfg.ttest_pairing,
    )
    try:
        plan.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or Path(cfg.out_dir) / "ablation")
    summary = run_ablation(dataset, cfg.model_configs(), plan, out_dir=out,
                           parallel=args.parallel, ks=tuple(cfg.k_list))
    print((out / "ablation.md").read_text(encoding="utf-8"))
    return 2 if summary["failures"] else 0


def cmd_infer(args) -> int:
    model, schedule, dataset, cfg = _load_run(args.run_dir)
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.infer_seeds)
    k = args.k or cfg.top_k
    rec = Recommender(model, schedule, InferenceConfig(cfg.exclude_history, tuple(seeds), tuple(cfg.k_list)))
    index = {u: i for i, u in enumerate(dataset.users)}
    wanted = [u.strip() for u in args.users.split(",")] if args.users else list(dataset.users)
    lines = []
    known = [u for u in wanted if u in index]
    results = dict(zip(known, rec.recommend([dataset.history(index[u], "full") for u in known], k)))
    for u in wanted:
        if u not in results:
            lines.append({"user": u, "error": "unknown user"})
            continue
        items, probs = results[u]
        rec_line = {"user": u, "items": [dataset.vocab.decode(int(i)) for i in items],
                    "scores": [float(p) for p in probs]}
        if len(seeds) > 1:
            rec_line["seeds"] = seeds
        lines.append(rec_line)
    text = "".join(json.dumps(x) + "\n" for x in lines)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_repr(args) -> int:
    model, schedule, dataset, cfg = _load_run(args.run_dir)
    seed = args.seed if args.seed is not None else cfg.eval_seed
    rec = Recommender(model, schedule)
    histories = [dataset.history(u, args.split) for u in range(len(dataset))]
    rows = []
    for start in range(0, len(histories), 512):
        vecs = rec.represent(histories[start:start + 512], seed)
        for off, v in enumerate(vecs):
            rows.append(f"{dataset.users[start + off]}\t{','.join(repr(float(x)) for x in v)}\n")
    out = Path(args.out) if args.out else Path(args.run_dir) / f"repr_{args.split}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(rows), encoding="utf-8")
    print(str(out))
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
    "export-repr": cmd_export_repr,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"diffurec {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"diffurec {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
