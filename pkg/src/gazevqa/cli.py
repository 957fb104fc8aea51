"""Command-line entry point: ``gazevqa {stats,roi,train,eval,ablate,synth}``.

Exit codes: 0 success, 2 validation/input error, 3 runtime or training failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any

import torch

from . import __version__
from .dataset import Dataset, compute_statistics, load_dataset, typology_counts
from .decoder import GenerationConfig
from .errors import GazeVQAError, ValidationError
from .evaluation import EvalReport, HashNgramEmbedder, evaluate
from .gaze_roi import binarize, extract_roi, load_heatmap
from .model_core import ModelConfig, build_model, count_parameters
from .pipeline import encode_dataset, parse_variant
from .synthetic import make_corpus, write_manifest
from .training import TrainConfig, load_checkpoint, load_into, save_checkpoint, train

log = logging.getLogger("gazevqa")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

DEFAULT_RUN_CONFIG: dict[str, Any] = {
    "model": {},
    "pretrain": None,
    "finetune": {"dataset": None, "regime": "adapter_only", "variant": "full", "train": {}},
    "test": None,
    "seeds": [0],
    "generation": {"beam_width": 10, "max_new_tokens": 16},
}


# --- helpers -------------------------------------------------------------------


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: Any, seeds, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "toolkit_version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    config = copy.deepcopy(config)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"override {item!r} is not key=value")
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[parts[-1]] = _parse_value(raw)
    return config


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve(path: str | None, base: Path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else base / p


def _gen_config(cfg: dict, eos_id: int, args) -> GenerationConfig:
    g = dict(cfg.get("generation") or {})
    if getattr(args, "beam_width", None) is not None:
        g["beam_width"] = args.beam_width
    if getattr(args, "max_new_tokens", None) is not None:
        g["max_new_tokens"] = args.max_new_tokens
    return GenerationConfig(eos_id=eos_id, **g)


# --- commands ----------------------------------------------------------------------


def cmd_stats(args) -> int:
    ds = load_dataset(args.dataset)
    stats = compute_statistics(ds)
    types = typology_counts(ds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "statistics": stats.to_json(),
        "typology": [{"type": t.major, "subtype": t.minor, "count": c} for t, c in types.items()],
        "declared_split_sizes": (ds.manifest or {}).get("declared_split_sizes"),
    }
    (out / "stats.json").write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    write_run_manifest(out, "stats", {"dataset": str(args.dataset)}, None, [args.dataset], [out / "stats.json"])
    print(f"images            {stats.n_images}")
    print(f"QA pairs          {stats.n_qa_pairs}")
    print(f"unique questions  {stats.n_unique_questions}")
    print(f"unique answers    {stats.n_unique_answers}")
    print(f"avg question len  {stats.avg_question_length:.2f}")
    print(f"avg answer len    {stats.avg_answer_length:.2f}")
    print()
    for t, c in types.items():
        print(f"{str(t):<24}{c}")
    return EXIT_OK


def cmd_roi(args) -> int:
    h = load_heatmap(args.heatmap)
    mask = binarize(h, args.threshold)
    box = extract_roi(mask, tuple(args.image_size))
    result = {
        "x": box.x,
        "y": box.y,
        "w": box.w,
        "h": box.h,
        "fallback": not mask.bits.any(),
    }
    text = json.dumps(result)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "roi.json").write_text(text + "\n")
        cfg = {"heatmap": str(args.heatmap), "image_size": list(args.image_size), "threshold": args.threshold}
        write_run_manifest(out, "roi", cfg, None, [args.heatmap], [out / "roi.json"])
    return EXIT_OK


def _build_alphabet(cfg: dict, datasets: list[Dataset]) -> dict:
    tok = dict(cfg["model"].get("tokenizer") or {"kind": "char", "alphabet": ""})
    if tok.get("kind", "char") == "char" and not tok.get("alphabet"):
        chars = set("".join(cfg["model"].get("prompt") or ModelConfig().prompt))
        for ds in datasets:
            for s in ds:
                chars.update(s.ambiguous_question)
                for a in s.answers:
                    chars.update(a)
        tok = {"kind": "char", "alphabet": "".join(sorted(chars))}
    return tok


def cmd_train(args) -> int:
    config_path = Path(args.config)
    user = json.loads(config_path.read_text(encoding="utf-8"))
    cfg = apply_overrides(_merge(DEFAULT_RUN_CONFIG, user), args.set or [])
    if args.seeds:
        cfg["seeds"] = args.seeds
    base = config_path.parent
    ft = cfg.get("finetune") or {}
    if not ft.get("dataset"):
        raise ValidationError("finetune.dataset is required")
    pre = cfg.get("pretrain")
    for section in (ft, pre):
        if section:
            section["dataset"] = str(_resolve(section["dataset"], base).resolve())
    if cfg.get("test"):
        cfg["test"] = str(_resolve(cfg["test"], base).resolve())
    if cfg.get("init_checkpoint"):
        cfg["init_checkpoint"] = str(_resolve(cfg["init_checkpoint"], base).resolve())
    ft_ds = load_dataset(ft["dataset"])
    pre_ds = load_dataset(pre["dataset"]) if pre else None
    cfg["model"]["tokenizer"] = _build_alphabet(cfg, [d for d in (pre_ds, ft_ds) if d is not None])
    if args.jobs:
        torch.set_num_threads(args.jobs)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    loss_rows: list[tuple[int, str, int, float]] = []
    outputs = [out / "config.json", out / "loss.csv"]
    for seed in cfg["seeds"]:
        seed_dir = out / f"seed_{seed}"
        model_cfg = ModelConfig.from_json({**cfg["model"], "init_seed": seed})
        if pre:
            base_model = build_model(ModelConfig.from_json({**model_cfg.to_json(), "adapters": False}))
            tc = TrainConfig(**{"stage": "pretrain", **pre.get("train", {}), "seed": seed})
            res = train(base_model, encode_dataset(base_model, pre_ds), tc, pre.get("regime", "full"))
            loss_rows += [(seed, "pretrain", i, v) for i, v in enumerate(res.losses)]
            save_checkpoint(base_model, seed_dir / "pretrained", pre.get("regime", "full"), tc)
        model = build_model(model_cfg)
        if pre:
            load_into(model, seed_dir / "pretrained")
        elif cfg.get("init_checkpoint"):
            load_into(model, cfg["init_checkpoint"])
        tc = TrainConfig(**{**ft.get("train", {}), "seed": seed})
        regime = ft.get("regime", "adapter_only")

        def checkpoint(epoch: int, m, _dir=seed_dir, _tc=tc, _regime=regime) -> None:
            save_checkpoint(m, _dir / "checkpoints" / f"epoch_{epoch + 1:03d}", _regime, _tc)

        res = train(model, encode_dataset(model, ft_ds), tc, regime, parse_variant(ft.get("variant", "full")), checkpoint)
        loss_rows += [(seed, "finetune", i, v) for i, v in enumerate(res.losses)]
        save_checkpoint(model, seed_dir / "model", regime, tc)
        outputs.append(seed_dir / "model")
        counts = count_parameters(model, regime)
        log.info("seed %s: %d steps, final loss %.4f, trainable %d", seed, res.steps, res.losses[-1], counts["trainable"])

    with (out / "loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "stage", "step", "loss"])
        w.writerows((s, st, i, repr(v)) for s, st, i, v in loss_rows)
    inputs = [config_path, ft_ds.root] + ([pre_ds.root] if pre_ds else [])
    write_run_manifest(out, "train", cfg, cfg["seeds"], inputs, outputs)
    print(json.dumps({"run_dir": str(out), "seeds": cfg["seeds"]}))
    return EXIT_OK


def _load_run(run_dir: Path, seeds: list[int] | None):
    cfg = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    seeds = seeds or cfg["seeds"]
    models = []
    for s in seeds:
        path = run_dir / f"seed_{s}" / "model"
        if not (path / "manifest.json").exists():
            raise ValidationError(f"missing trained model for seed {s} at {path}")
        models.append(load_checkpoint(path))
    return cfg, seeds, models


def _evaluate_and_write(args, variant_name: str, command: str, default_sub: str) -> int:
    run_dir = Path(args.run_dir)
    cfg, seeds, models = _load_run(run_dir, args.seeds)
    test_path = args.testset or cfg.get("test")
    if not test_path:
        raise ValidationError("no test set given and none recorded in the run config")
    testset = load_dataset(test_path)
    if args.jobs:
        torch.set_num_threads(args.jobs)
    gen = _gen_config(cfg, models[0].eos_id, args)
    report: EvalReport = evaluate(models, testset, HashNgramEmbedder(), gen, parse_variant(variant_name), args.jobs or 1)
    out = Path(args.out_dir) if args.out_dir else run_dir / default_sub
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    (out / "per_type.csv").write_text(report.per_type_csv(), encoding="utf-8")
    run_cfg = {"run_config_hash": config_hash(cfg), "variant": report.variant, "generation": gen.__dict__}
    write_run_manifest(out, command, run_cfg, seeds, [run_dir, test_path], [out / "report.json", out / "per_type.csv"])
    print(json.dumps({"variant": report.variant, "acc": round(report.acc, 2), "bs": round(report.bs, 2), "runs": len(seeds)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    return _evaluate_and_write(args, "full", "eval", "eval")


def cmd_ablate(args) -> int:
    variant = parse_variant(args.variant)
    return _evaluate_and_write(args, variant.name, "ablate", f"ablate_{variant.name.replace(':', '_')}")


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    path = make_corpus(
        out, args.n, seed=args.seed, split=args.split, caption_style=args.caption_style,
        miss_rate=args.miss_rate, filename=args.filename,
    )
    write_manifest(out, {args.split: args.n})
    print(path)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gazevqa", description="Gaze-grounded VQA toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="corpus statistics and question typology")
    p.add_argument("dataset")
    p.add_argument("--out-dir", default="runs/stats")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("roi", help="gaze RoI from a heatmap file")
    p.add_argument("heatmap")
    p.add_argument("--image-size", nargs=2, type=int, metavar=("W", "H"), required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("train", help="train one model per seed into a run directory")
    p.add_argument("config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help=f"{name} trained run(s)")
        p.add_argument("run_dir")
        if name == "ablate":
            p.add_argument("variant", help="drop_image_series | drop_question | image_is_roi:estimated | image_is_roi:gt")
        p.add_argument("--testset", default=None)
        p.add_argument("--seeds", nargs="+", type=int)
        p.add_argument("--beam-width", type=int, default=None)
        p.add_argument("--max-new-tokens", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="write a synthetic gaze-QA corpus")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.add_argument("--caption-style", action="store_true")
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--filename", default="dataset.jsonl")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, OSError, json.JSONDecodeError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except GazeVQAError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
