"""Command-line entry point: ``focusre <command> [options]``.

Every command writes one ``manifest.json`` into its ``--out`` directory;
``focusre rerun --manifest PATH`` replays it.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import (
    AnnotationError,
    Document,
    GeneratorConfig,
    generate_synthetic_corpus,
    read_jsonl,
    split_dataset,
    write_jsonl,
    write_kv_config,
)
from .evaluate import MetricsReport, format_table, pipeline_eval, rc_correct_entities
from .masks import build_task_mask, dump_mask
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    evaluate_model,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics_log,
)

log = logging.getLogger("focusre")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECK_FAILED = 5

DATA_ENV = "FOCUSRE_DATA"
SPLITS = ("train", "dev", "test")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def code_version() -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data")


def _out_dir(args) -> Path:
    out = Path(args.out or f"runs/{args.command}")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def resolve_train_config(args) -> TrainConfig:
    """CLI flag > config file > dataclass default."""
    overrides = {
        "seed": args.seed, "mode": getattr(args, "mode", None), "k_focus": args.k,
        "mask_variant": getattr(args, "mask_variant", None), "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "n_layers": args.layers,
    }
    try:
        if args.config:
            return TrainConfig.from_file(args.config, **overrides)
        return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise ConfigError(f"bad training configuration: {exc}") from exc


def load_split(data_dir, split: str, required: bool = True) -> list[Document]:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        if required:
            raise DataError(f"missing {path}")
        return []
    try:
        return read_jsonl(path)
    except (AnnotationError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _check_lengths(docs, config: TrainConfig) -> None:
    longest = max((len(d.text) for d in docs), default=0) + 2
    if longest > config.max_len:
        raise ConfigError(f"longest document needs {longest} positions but max_len={config.max_len}")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _report_json(rep: MetricsReport | None) -> dict | None:
    return None if rep is None else rep.to_dict()


def _label_rows(rep: MetricsReport) -> list[tuple[str, list]]:
    rows = [(label, [rep.per_label[label]]) for label in sorted(rep.per_label)]
    return rows + [("Overall (micro)", [rep.micro])]


def _train_on(data_dir, config: TrainConfig):
    train_docs = load_split(data_dir, "train")
    dev_docs = load_split(data_dir, "dev", required=False)
    test_docs = load_split(data_dir, "test", required=False)
    _check_lengths(train_docs + dev_docs + test_docs, config)
    result = train(train_docs, dev_docs, config)
    return result, dev_docs, test_docs


# ---------------------------------------------------------------------------
# commands; each returns the command-specific part of its manifest
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> dict:
    try:
        gen = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise ConfigError(f"bad generator configuration: {exc}") from exc
    if args.n_docs < 1:
        raise ConfigError("--n-docs must be >= 1")
    out = Path(args.out or default_data_dir())
    args.out = str(out)
    seed = 0 if args.seed is None else args.seed
    docs = generate_synthetic_corpus(args.n_docs, seed=seed, config=gen)
    outputs = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, part in zip(SPLITS, split_dataset(docs, seed=seed)):
            path = out / f"{name}.jsonl"
            write_jsonl(part, path)
            outputs[name] = str(path)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    print(f"wrote {len(docs)} documents to {out}")
    return {"config": {**asdict(gen), "n_docs": args.n_docs}, "seed": seed, "outputs": outputs}


def cmd_train(args) -> dict:
    config = resolve_train_config(args)
    out = _out_dir(args)
    result, dev_docs, test_docs = _train_on(args.data_dir, config)
    ckpt, metrics_log = out / "model.ckpt", out / "metrics.jsonl"
    save_checkpoint(result.model, ckpt, config.to_dict())
    write_metrics_log(result.history, metrics_log)
    summary = {"best_epoch": result.best_epoch, "lr_used": result.lr_used}
    for name, docs in (("dev", dev_docs), ("test", test_docs)):
        ner, rc = evaluate_model(result.model, docs, config.mode)
        summary[name] = {"ner": _report_json(ner), "rc": _report_json(rc)}
        if docs:
            parts = [f"{task} F1={rep.f1:.4f}" for task, rep in (("NER", ner), ("RC", rc)) if rep is not None]
            print(f"{name}: " + ", ".join(parts))
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return {"config": config.to_dict(), "seed": config.seed, "metrics": summary,
            "outputs": {"checkpoint": str(ckpt), "metrics_log": str(metrics_log),
                        "eval": str(out / "eval.json")}}


def cmd_evaluate(args) -> dict:
    model = _load_model(args.checkpoint)
    docs = load_split(args.data_dir, args.split)
    out = _out_dir(args)
    ner, rc_pred = pipeline_eval(model, docs)
    rc_gold = rc_correct_entities(model, docs)
    print(format_table(f"NER ({args.split})", ["NER"], _label_rows(ner), "Entity type"))
    print()
    print(format_table(f"RC with correct entities ({args.split})", ["RC"], _label_rows(rc_gold), "Relation"))
    print()
    print(format_table(f"RC with predicted entities ({args.split})", ["RC"], _label_rows(rc_pred), "Relation"))
    metrics = {"ner": ner.to_dict(), "rc_correct_entities": rc_gold.to_dict(),
               "rc_predicted_entities": rc_pred.to_dict()}
    path = out / "eval.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    return {"config": {"checkpoint": str(args.checkpoint), "split": args.split}, "metrics": metrics,
            "outputs": {"eval": str(path)}}


def predict_records(model, texts: list[str], dump_masks: bool = False) -> list[dict]:
    """Decoded entities and positive relation triples for raw text lines."""
    from .data import RELATION_LABELS, NO_RELATION

    docs = [Document(t) for t in texts]
    entities = model.predict_entities(docs)
    pairs = model.classify_pairs(docs, entities=entities)
    records = []
    for doc, ents, doc_pairs in zip(docs, entities, pairs):
        rec = {
            "text": doc.text,
            "entities": [{"start": e.start, "end": e.end, "type": e.etype, "text": doc.text[e.start:e.end]}
                         for e in ents],
            "relations": [],
        }
        for inst, label in doc_pairs:
            name = RELATION_LABELS[label]
            i, j = inst.pair
            entry = {"e1": i, "e2": j, "label": name}
            if dump_masks:
                T_len = len(doc.text) + 2
                entry["mask"] = dump_mask(build_task_mask(model.mask_variant, T_len, inst.positions, T_len))
            if name != NO_RELATION or dump_masks:
                rec["relations"].append(entry)
        records.append(rec)
    return records


def cmd_predict(args) -> dict:
    model = _load_model(args.checkpoint)
    try:
        if args.input == "-":
            lines = sys.stdin.read().splitlines()
        else:
            lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    texts = [ln.strip() for ln in lines if ln.strip()]
    longest = max((len(t) for t in texts), default=0) + 2
    if longest > model.config.max_len:
        raise DataError(f"input line needs {longest} positions; model max_len={model.config.max_len}")
    out = _out_dir(args)
    records = predict_records(model, texts, args.dump_masks)
    path = out / "predictions.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            line = json.dumps(rec, ensure_ascii=False)
            fh.write(line + "\n")
            print(line)
            if args.dump_masks:
                for rel in rec["relations"]:
                    print(f"# mask for pair ({rel['e1']}, {rel['e2']})", file=sys.stderr)
                    print(rel["mask"], file=sys.stderr)
    return {"config": {"checkpoint": str(args.checkpoint), "input": args.input,
                       "dump_masks": args.dump_masks},
            "outputs": {"predictions": str(path)}}


def _parse_list(raw: str, cast, name: str) -> list:
    try:
        return [cast(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {name} list {raw!r}") from exc


def run_sweep(data_dir, base: TrainConfig, ks, variants) -> list[dict]:
    """Train one cell per (K, mask variant); a failed cell is recorded, not fatal."""
    train_docs = load_split(data_dir, "train")
    dev_docs = load_split(data_dir, "dev")
    _check_lengths(train_docs + dev_docs, base)
    cells = []
    for k in ks:
        for variant in variants:
            cell = {"k": k, "mask_variant": variant, "ner": None, "rc": None, "error": None}
            try:
                config = TrainConfig(**{**base.to_dict(), "k_focus": k, "mask_variant": variant})
                result = train(train_docs, dev_docs, config)
                ner, rc = evaluate_model(result.model, dev_docs, config.mode)
                cell.update(ner=ner, rc=rc, best_epoch=result.best_epoch)
            except (ValueError, TrainingError) as exc:
                cell["error"] = str(exc)
                log.error("sweep cell K=%s %s failed: %s", k, variant, exc)
            cells.append(cell)
    return cells


def sweep_table(cells: list[dict]) -> str:
    rows = [((str(c["k"]), c["mask_variant"]), [c["ner"], c["rc"]]) for c in cells]
    return format_table("Dev results by focused-layer count K and RC mask", ["NER", "RC"], rows,
                        ("K", "Mask"))


def cmd_sweep(args) -> dict:
    ks = _parse_list(args.ks, int, "K")
    variants = _parse_list(args.variants, str, "mask variant")
    bad = [v for v in variants if v not in ("v1", "v2")]
    if not ks or not variants or bad:
        raise ConfigError(f"sweep needs non-empty K and variant lists from v1/v2, got {ks} {variants}")
    if args.layers is None and not (args.config and _file_sets(args.config, "n_layers")):
        args.layers = max(ks)
    base = resolve_train_config(args)
    out = _out_dir(args)
    cells = run_sweep(args.data_dir, base, ks, variants)
    table = sweep_table(cells)
    print(table)
    (out / "sweep.txt").write_text(table + "\n", encoding="utf-8")
    metrics = [{**c, "ner": _report_json(c["ner"]), "rc": _report_json(c["rc"])} for c in cells]
    (out / "sweep.json").write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    return {"config": base.to_dict(), "seed": base.seed, "grid": {"k": ks, "mask_variant": variants},
            "metrics": metrics, "outputs": {"table": str(out / "sweep.txt"), "cells": str(out / "sweep.json")}}


def _file_sets(path, key: str) -> bool:
    from .data import read_kv_config

    try:
        return key in read_kv_config(path, {f.name: f.type for f in fields(TrainConfig)})
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


ABLATION_ROWS = (("Only NER", "ner_only"), ("Only RC", "rc_only"), ("Joint", "joint"))


def run_ablation(data_dir, base: TrainConfig, known: dict | None = None) -> dict[str, tuple]:
    """Train each mode and score it on test; `known` supplies already-evaluated modes."""
    train_docs = load_split(data_dir, "train")
    dev_docs = load_split(data_dir, "dev", required=False)
    test_docs = load_split(data_dir, "test", required=False) or dev_docs
    _check_lengths(train_docs + dev_docs + test_docs, base)
    results = dict(known or {})
    for _, mode in ABLATION_ROWS:
        if mode in results:
            continue
        config = TrainConfig(**{**base.to_dict(), "mode": mode})
        model = train(train_docs, dev_docs, config).model
        results[mode] = evaluate_model(model, test_docs, mode)
    return results


def ablation_summary(results: dict[str, tuple]) -> tuple[str, bool]:
    rows = [(label, list(results[mode])) for label, mode in ABLATION_ROWS]
    table = format_table("Separate vs joint training (test)", ["NER", "RC"], rows)
    joint_ner, joint_rc = results["joint"]
    wins = joint_ner.f1 >= results["ner_only"][0].f1 or joint_rc.f1 >= results["rc_only"][1].f1
    verdict = "joint >= separate on at least one task: " + ("yes" if wins else "no")
    return table + "\n" + verdict, wins


def cmd_ablation(args) -> dict:
    base = resolve_train_config(args)
    out = _out_dir(args)
    results = run_ablation(args.data_dir, base)
    text, wins = ablation_summary(results)
    print(text)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    metrics = {mode: {"ner": _report_json(n), "rc": _report_json(r)} for mode, (n, r) in results.items()}
    metrics["joint_wins_one_task"] = wins
    return {"config": base.to_dict(), "seed": base.seed, "metrics": metrics,
            "outputs": {"table": str(out / "ablation.txt")}}


def cmd_grad_check(args) -> dict:
    from .gradcheck import format_report, run_grad_checks

    seed = 0 if args.seed is None else args.seed
    results = run_grad_checks(trials=args.trials, seed=seed)
    report = format_report(results)
    print(report)
    out = _out_dir(args)
    (out / "grad_check.txt").write_text(report + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    outcome = {"config": {"trials": args.trials}, "seed": seed,
               "metrics": {r.name: r.max_error for r in results},
               "outputs": {"report": str(out / "grad_check.txt")}}
    if failed:
        outcome["failed"] = failed
        raise CheckFailed(outcome)
    return outcome


_REPLAYED_FLAGS = ("--config", "--out")


def rerun_argv(manifest: dict, config_path: Path, out: str) -> list[str]:
    """The recorded argv with config and output pointed at fresh locations."""
    argv = list(manifest["argv"])
    cleaned, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in _REPLAYED_FLAGS:
            skip = True
            continue
        if any(tok.startswith(f + "=") for f in _REPLAYED_FLAGS):
            continue
        cleaned.append(tok)
    return cleaned + ["--config", str(config_path), "--out", out]


def cmd_rerun(args) -> dict:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, snapshot = manifest["command"], manifest["config"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable manifest {args.manifest}: {exc}") from exc
    if command in ("rerun", "evaluate", "predict", "grad-check"):
        # these carry no config file; replay argv as recorded with a new --out
        out = args.out or str(Path(args.manifest).parent / "rerun")
        argv = [t for t in manifest["argv"]]
        if "--out" in argv:
            argv[argv.index("--out") + 1] = out
        else:
            argv += ["--out", out]
    else:
        out = args.out or str(Path(args.manifest).parent / "rerun")
        Path(out).mkdir(parents=True, exist_ok=True)
        config_path = Path(out) / "replayed_config.ini"
        if command == "generate-data":
            snapshot = {k: v for k, v in snapshot.items() if k != "n_docs"}
        write_kv_config(snapshot, config_path)
        argv = rerun_argv(manifest, config_path, out)
    log.info("replaying: %s", " ".join(argv))
    code = main(argv)
    return {"config": {"manifest": str(args.manifest), "replayed": argv}, "exit_code": code,
            "outputs": {"rerun_dir": out}, "_dir": out}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, with_mode: bool = True, with_mask: bool = True) -> None:
    p.add_argument("--data-dir", default=None, help=f"dataset directory (default ${DATA_ENV} or ./data)")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--seed", type=int)
    if with_mode:
        p.add_argument("--mode", choices=("joint", "ner_only", "rc_only"))
    p.add_argument("--k", type=int, help="number of focused (task-masked) top layers")
    if with_mask:
        p.add_argument("--mask-variant", choices=("v1", "v2"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--layers", type=int, help="total encoder layers N")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focusre", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic train/dev/test corpus")
    p.add_argument("--n-docs", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key = value generator config file")
    p.add_argument("--out", help=f"corpus directory (default ${DATA_ENV} or ./data)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and save the best-dev checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="tag raw text lines and classify entity pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-", help="UTF-8 text file, one document per line ('-' = stdin)")
    p.add_argument("--dump-masks", action="store_true", help="also emit the RC attention mask grids")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="grid over K and RC mask variant")
    _add_train_flags(p, with_mask=False)
    p.add_argument("--ks", default="2,4,6")
    p.add_argument("--variants", default="v1,v2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", help="compare ner_only, rc_only and joint training")
    _add_train_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("grad-check", help="finite-difference check of every kernel")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerun)
    return parser


def _write_manifest(args, argv, started: str, body: dict) -> None:
    out = Path(body.pop("_dir", None) or args.out or f"runs/{args.command}")
    if args.command == "rerun":
        out = out / "rerun_manifest"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": argv,
        "code_version": code_version(),
        "started": started,
        "finished": _now(),
        "seed": body.pop("seed", None),
        **body,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False),
                                       encoding="utf-8")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "data_dir", "unset") is None:
        args.data_dir = default_data_dir()
    started = _now()
    command_argv = argv[argv.index(args.command):]
    try:
        body = args.func(args)
        code = body.get("exit_code", EXIT_OK) if args.command == "rerun" else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckFailed as exc:
        body = exc.args[0]
        print(f"check failed: {', '.join(body['failed'])}", file=sys.stderr)
        code = EXIT_CHECK_FAILED
    _write_manifest(args, command_argv, started, body)
    return code


if __name__ == "__main__":
    sys.exit(main())
